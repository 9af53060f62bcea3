"""Finite-difference verification of every differentiable component.

Each check builds a small random problem, reduces the component output to a
scalar through a fixed random projection, and compares the backward-pass
gradient with central differences. The reported error is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over every
checked entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers
from .acb import ACB
from .model import ModelConfig, build
from .tensor import Tensor, finite_difference_grad, relative_error, relu, softmax, tsum, mul
from .training import cross_entropy

EPS = 1e-5
LAYER_THRESHOLD = 1e-4
END_TO_END_THRESHOLD = 1e-3
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    component: str
    worst_error: float
    threshold: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(self.worst_error < self.threshold)


def _projection(shape, rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _check(loss_fn: Callable[[], Tensor], tensors: list[Tensor]) -> float:
    """Worst error over ``tensors``, which ``loss_fn`` reads in place."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        original = t.data

        def f(probe, t=t):
            t.data = probe.data
            return loss_fn()

        try:
            numeric = finite_difference_grad(f, Tensor(original), EPS)
        finally:
            t.data = original
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _uniform(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def check_conv1d(rng) -> float:
    x, w, b = _uniform(rng, (2, 2, 7)), _uniform(rng, (3, 2, 4)), _uniform(rng, 3)
    proj = _projection((2, 3, 7), rng)
    return _check(lambda: tsum(mul(layers.conv1d(x, w, b), proj)), [x, w, b])


def check_maxpool(rng) -> float:
    worst = 0.0
    for size, stride, length in ((4, 2, 9), (10, 5, 23)):
        x = _uniform(rng, (2, 3, length))
        proj = _projection((2, 3, layers.pool_output_length(length, stride)), rng)
        worst = max(worst, _check(lambda: tsum(mul(layers.maxpool1d(x, size, stride), proj)), [x]))
    return worst


def check_batchnorm(rng) -> float:
    worst = 0.0
    for mode in (layers.TRAIN, layers.INFER):
        bn = layers.BatchNormLayer.create(3)
        bn.running_mean = rng.uniform(-0.5, 0.5, 3)
        bn.running_var = rng.uniform(0.5, 1.5, 3)
        bn.gamma, bn.beta = _uniform(rng, 3, 0.5, 1.5), _uniform(rng, 3)
        x = _uniform(rng, (2, 3, 5))
        proj = _projection((2, 3, 5), rng)
        worst = max(
            worst,
            _check(lambda: tsum(mul(layers.batchnorm_forward(bn, x, mode), proj)), [x, bn.gamma, bn.beta]),
        )
    return worst


def check_dense(rng) -> float:
    layer = layers.DenseLayer(5, 3, _uniform(rng, (3, 5)), _uniform(rng, 3))
    x = _uniform(rng, (4, 5))
    proj = _projection((4, 3), rng)
    return _check(lambda: tsum(mul(layers.dense_forward(layer, x), proj)), [x, layer.weights, layer.bias])


def check_relu(rng) -> float:
    # keep inputs clear of the kink at 0
    x = Tensor(rng.uniform(0.05, 1.0, (4, 6)) * rng.choice([-1.0, 1.0], (4, 6)))
    proj = _projection((4, 6), rng)
    return _check(lambda: tsum(mul(relu(x), proj)), [x])


def check_dropout(rng) -> float:
    x = _uniform(rng, (3, 8))
    proj = _projection((3, 8), rng)
    seed = int(rng.integers(1 << 31))
    return _check(lambda: tsum(mul(layers.dropout_forward(x, 0.3, layers.TRAIN, seed), proj)), [x])


def check_softmax(rng) -> float:
    v = _uniform(rng, 6)
    proj = _projection(6, rng)
    return _check(lambda: tsum(mul(softmax(v), proj)), [v])


def check_cross_entropy(rng) -> float:
    logits = _uniform(rng, (4, 3))
    labels = rng.integers(0, 3, 4)
    return _check(lambda: cross_entropy(softmax(logits), labels), [logits])


def check_acb(rng) -> float:
    block = ACB.create(6, 4, 3, rng)
    a = _uniform(rng, (3, 6))
    proj = _projection((3, 3), rng)
    return _check(lambda: tsum(mul(block(a), proj)), [a] + [t for _, t in block.parameters()])


def check_end_to_end(rng, n_params: int = 60) -> float:
    """Cross-entropy of the full default network w.r.t. a random parameter subset."""
    model = build(ModelConfig(seed=int(rng.integers(1 << 31))))
    x = rng.standard_normal((2, 400))
    y = rng.integers(0, model.config.n_classes, 2)
    dropout_seed = int(rng.integers(1 << 31))

    def loss() -> Tensor:
        return cross_entropy(model(x, layers.TRAIN, np.random.default_rng(dropout_seed)), y)

    model.zero_grad()
    loss().backward()
    params = model.parameters()
    sizes = np.array([t.size for _, t in params])
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        t = params[k][1]
        i = int(flat - offsets[k])
        analytic.append(t.grad.reshape(-1)[i])
        view = t.data.reshape(-1)
        orig = view[i]
        view[i] = orig + EPS
        up = loss().item()
        view[i] = orig - EPS
        down = loss().item()
        view[i] = orig
        numeric.append((up - down) / (2 * EPS))
    return relative_error(np.array(analytic), np.array(numeric))


LAYER_CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "Conv1D": check_conv1d,
    "MaxPool1D": check_maxpool,
    "BatchNorm": check_batchnorm,
    "Dense": check_dense,
    "ReLU": check_relu,
    "Dropout": check_dropout,
    "Softmax": check_softmax,
    "CrossEntropy": check_cross_entropy,
}


def run_gradcheck(seed: int = 0, n_seeds: int = len(DEFAULT_SEEDS)) -> list[CheckResult]:
    """Run every component check over ``n_seeds`` consecutive seeds."""
    seeds = [seed + k for k in range(n_seeds)]
    components = list(LAYER_CHECKS.items()) + [("ACB", check_acb), ("EndToEnd", check_end_to_end)]
    results = []
    for name, fn in components:
        threshold = END_TO_END_THRESHOLD if name == "EndToEnd" else LAYER_THRESHOLD
        worst = max(fn(np.random.default_rng(s)) for s in seeds)
        results.append(CheckResult(name, worst, threshold, len(seeds)))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'component':<14}{'worst rel err':>16}{'threshold':>12}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.component:<14}{r.worst_error:>16.3e}{r.threshold:>12.0e}  {status}")
    return "\n".join(lines)


