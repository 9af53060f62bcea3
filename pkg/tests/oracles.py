"""Independent reference implementations used only by tests."""

import numpy as np

from cabcnn.audio import AudioClip, synth_class_params


def matched_filter_predict(clip: AudioClip, n_classes: int) -> int:
    """Pick the class whose tone carries the most energy (quadrature correlation)."""
    t = np.arange(clip.samples.size) / clip.sample_rate
    scores = []
    for freq, _duty in synth_class_params(n_classes):
        z = np.exp(-2j * np.pi * freq * t)
        scores.append(abs(np.dot(clip.samples, z)))
    return int(np.argmax(scores))


def bucket_max_loop(x: np.ndarray, rate: int, buckets: int = 4000) -> np.ndarray:
    """Enumerate each second's buckets one by one."""
    out = []
    for s0 in range(0, x.size, rate):
        sec = x[s0:s0 + rate]
        n = sec.size
        for b in range(buckets):
            lo, hi = (b * n) // buckets, ((b + 1) * n) // buckets
            if hi > lo:
                out.append(max(sec[lo:hi]))
    return np.array(out)
