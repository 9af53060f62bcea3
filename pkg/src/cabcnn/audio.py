"""Audio ingestion and preprocessing, dataset splitting, synthetic corpus.

The preprocessing pipeline is ``normalize -> max_downsample -> truncate``:
z-score the waveform, replace every second by the maxima of 4000 contiguous
buckets, then keep at most the first ``T`` seconds.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, WavParseError
from .model import read_container, write_container

BUCKETS_PER_SECOND = 4000
SPLIT_RATIOS = (0.6, 0.1, 0.3)
MIN_PER_CLASS = 10

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int | None = None
    clip_id: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise DegenerateError("audio clip has no samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class DatasetSplit:
    train: list[tuple[str, int]] = field(default_factory=list)
    validation: list[tuple[str, int]] = field(default_factory=list)
    test: list[tuple[str, int]] = field(default_factory=list)

    def parts(self) -> dict[str, list[tuple[str, int]]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def _read_chunks(raw: bytes, path) -> dict[bytes, bytes]:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavParseError(f"{path}: not a RIFF/WAVE file")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            name = cid.decode("latin-1").strip()
            raise WavParseError(
                f"{path}: truncated '{name}' chunk: expected {size} bytes, found {len(body)}"
            )
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def load_wav(path: str | os.PathLike, label: int | None = None) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    raw = Path(path).read_bytes()
    chunks = _read_chunks(raw, path)
    if b"fmt " not in chunks:
        raise WavParseError(f"{path}: missing 'fmt ' chunk")
    if b"data" not in chunks:
        raise WavParseError(f"{path}: missing 'data' chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise WavParseError(f"{path}: 'fmt ' chunk too short ({len(fmt)} bytes)")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise WavParseError(f"{path}: extensible 'fmt ' chunk too short")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise WavParseError(f"{path}: invalid header (channels={channels}, rate={rate})")

    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavParseError(f"{path}: unsupported codec (format tag {tag:#06x}, {bits} bits)")
    if block_align != channels * bits // 8:
        raise WavParseError(f"{path}: block align {block_align} inconsistent with {channels}x{bits} bits")

    data = chunks[b"data"]
    usable = len(data) - len(data) % block_align
    frames = np.frombuffer(data[:usable], dtype=dtype).astype(np.float64).reshape(-1, channels)
    if frames.shape[0] == 0:
        raise WavParseError(f"{path}: no audio frames")
    samples = frames.mean(axis=1) * scale
    return AudioClip(samples, rate, label, Path(path).stem)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int, float32: bool = False) -> None:
    """Write mono samples in [-1, 1] as 16-bit PCM (default) or 32-bit float."""
    samples = np.asarray(samples, dtype=np.float64)
    if float32:
        payload = samples.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize(clip: AudioClip) -> AudioClip:
    x = clip.samples
    if x.size < 2:
        raise DegenerateError("normalization needs at least 2 samples")
    mu = x.mean()
    sd = x.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateError("cannot normalize a constant signal (standard deviation is 0)")
    return AudioClip((x - mu) / sd, clip.sample_rate, clip.label, clip.clip_id)


def bucket_starts(n_samples: int, buckets: int = BUCKETS_PER_SECOND) -> np.ndarray:
    """Start offsets of the non-empty buckets when ``n_samples`` are split
    into ``buckets`` near-equal contiguous runs."""
    b = np.arange(buckets, dtype=np.int64)
    starts = (b * n_samples) // buckets
    ends = ((b + 1) * n_samples) // buckets
    return starts[ends > starts]


def max_downsample(clip: AudioClip) -> np.ndarray:
    """Per-second maxima over 4000 buckets; returns a (1, n) array.

    A trailing partial second is split into 4000 buckets over the samples it
    actually has; buckets that end up empty are dropped.
    """
    rate = clip.sample_rate
    if rate < BUCKETS_PER_SECOND:
        raise ConfigError(f"sample rate {rate} Hz is below {BUCKETS_PER_SECOND}; buckets would be empty")
    x = clip.samples
    full, rem = divmod(x.size, rate)
    per_second = bucket_starts(rate)
    starts = (np.arange(full, dtype=np.int64)[:, None] * rate + per_second).ravel()
    if rem:
        starts = np.concatenate([starts, full * rate + bucket_starts(rem)])
    return np.maximum.reduceat(x, starts)[None, :]


def truncate(array: np.ndarray, t_seconds: int) -> np.ndarray:
    if t_seconds <= 0:
        raise ConfigError(f"T must be positive, got {t_seconds}")
    return array[..., : BUCKETS_PER_SECOND * t_seconds]


def preprocess(clip: AudioClip, t_seconds: int) -> np.ndarray:
    """Full pipeline; returns a 1-D float64 array."""
    return truncate(max_downsample(normalize(clip)), t_seconds)[0]


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = _round_half_up(SPLIT_RATIOS[0] * n)
    n_val = _round_half_up(SPLIT_RATIOS[1] * n)
    return n_train, n_val, n - n_train - n_val


def split_dataset(corpus: Iterable[tuple[str, int]], seed: int) -> DatasetSplit:
    """Stratified 60/10/30 split; deterministic for a given seed."""
    by_class: dict[int, list[str]] = {}
    for clip_id, label in corpus:
        by_class.setdefault(int(label), []).append(clip_id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < MIN_PER_CLASS:
            raise DegenerateError(f"class {label} has {len(ids)} clips; at least {MIN_PER_CLASS} are required")
    rng = np.random.default_rng(seed)
    split = DatasetSplit()
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        n_train, n_val, _ = split_sizes(len(ids))
        split.train += [(i, label) for i in ids[:n_train]]
        split.validation += [(i, label) for i in ids[n_train:n_train + n_val]]
        split.test += [(i, label) for i in ids[n_train + n_val:]]
    return split


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_RATE = 8000
SYNTH_DURATION = (2.0, 5.0)
SYNTH_BURST_PERIOD = 0.2
SYNTH_NOISE = 0.05
SYNTH_AMPLITUDE = (0.25, 0.5)


def synth_class_params(n_classes: int) -> list[tuple[float, float]]:
    """(tone frequency in Hz, duty cycle) for each class."""
    freqs = np.linspace(300.0, 1500.0, n_classes)
    duties = np.linspace(0.25, 0.75, n_classes)
    return [(float(f), float(d)) for f, d in zip(freqs, duties)]


def synth_clip(label: int, n_classes: int, rng: np.random.Generator, clip_id: str | None = None) -> AudioClip:
    freq, duty = synth_class_params(n_classes)[label]
    duration = rng.uniform(*SYNTH_DURATION)
    n = int(duration * SYNTH_RATE)
    t = np.arange(n) / SYNTH_RATE
    offset = rng.uniform(0.0, SYNTH_BURST_PERIOD)
    gate = ((t + offset) % SYNTH_BURST_PERIOD) < duty * SYNTH_BURST_PERIOD
    amp = rng.uniform(*SYNTH_AMPLITUDE)
    phase = rng.uniform(0.0, 2 * np.pi)
    tone = amp * np.sin(2 * np.pi * freq * t + phase) * gate
    noise = SYNTH_NOISE * rng.standard_normal(n)
    return AudioClip(tone + noise, SYNTH_RATE, label, clip_id)


def synth_corpus(n_per_class: int, n_classes: int = 3, seed: int = 0) -> list[AudioClip]:
    """Noise floor plus gated tone bursts whose pitch and duty cycle encode the class."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be at least 1")
    if n_classes < 2:
        raise ConfigError("n_classes must be at least 2")
    rng = np.random.default_rng(seed)
    clips = []
    for label in range(n_classes):
        for i in range(n_per_class):
            clips.append(synth_clip(label, n_classes, rng, f"class{label}_{i:04d}"))
    return clips


# ---------------------------------------------------------------------------
# manifests and preprocessed arrays
# ---------------------------------------------------------------------------

def write_manifest(path: str | os.PathLike, rows: Sequence[tuple[str, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for p, label in rows:
            writer.writerow([p, int(label)])


def read_manifest(path: str | os.PathLike) -> list[tuple[str, int]]:
    """Rows of (absolute path, label); relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: manifest needs 'path' and 'label' columns")
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            rows.append((str(p), int(row["label"])))
    return rows


def save_array(path: str | os.PathLike, array: np.ndarray, clip_id: str, label: int | None) -> None:
    """Store a preprocessed array in the checkpoint container plus a JSON sidecar."""
    array = np.asarray(array, dtype=np.float64)
    meta = {"clip_id": clip_id, "label": label, "length": int(array.size)}
    write_container(path, {"kind": "cabcnn-array", **meta}, [("samples", array)])
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_array(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    _, arrays = read_container(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return arrays["samples"], meta
