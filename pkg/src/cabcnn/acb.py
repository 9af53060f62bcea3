"""Attention-gated bank of small classifiers.

At every timestep the block sees one feature vector ``a_t``. Each of ``n``
tiny MLP classifiers turns it into a class-probability vector ``c_ti``; an
attention MLP turns the same vector into importance weights ``alpha_t``
over the classifiers; the block output is ``c_t = sum_i alpha_ti * c_ti``.
The per-clip prediction is the plain mean of ``c_t`` over time.

The bank stores the ``n`` classifiers as stacked weight tensors so that all
of them run as a few batched matrix products. :meth:`ClassifierBank.unit`
and :meth:`ClassifierBank.from_units` convert to and from standalone
:class:`ClassifierUnit` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, ShapeError
from .layers import DenseLayer, glorot_uniform
from .tensor import Tensor, matmul, mean, relu, softmax, stack, transpose, tsum

CLASSIFIER_HIDDEN = (8, 4)
ATTENTION_HIDDEN = (160, 80)


@dataclass
class ClassifierUnit:
    dense1: DenseLayer
    dense2: DenseLayer
    head: DenseLayer

    @classmethod
    def create(cls, feature_dim: int, n_classes: int, rng: np.random.Generator) -> ClassifierUnit:
        h1, h2 = CLASSIFIER_HIDDEN
        return cls(
            DenseLayer.create(feature_dim, h1, rng),
            DenseLayer.create(h1, h2, rng),
            DenseLayer.create(h2, n_classes, rng),
        )

    def __call__(self, a: Tensor) -> Tensor:
        return softmax(self.head(relu(self.dense2(relu(self.dense1(a))))))


@dataclass
class AttentionUnit:
    dense1: DenseLayer
    dense2: DenseLayer
    head: DenseLayer

    @classmethod
    def create(cls, feature_dim: int, n_classifiers: int, rng: np.random.Generator) -> AttentionUnit:
        h1, h2 = ATTENTION_HIDDEN
        return cls(
            DenseLayer.create(feature_dim, h1, rng),
            DenseLayer.create(h1, h2, rng),
            DenseLayer.create(h2, n_classifiers, rng),
        )

    def __call__(self, a: Tensor) -> Tensor:
        return softmax(self.head(relu(self.dense2(relu(self.dense1(a))))))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name in ("dense1", "dense2", "head"):
            layer = getattr(self, name)
            out += [(f"{name}.{p}", t) for p, t in layer.parameters()]
        return out


def classify(unit: ClassifierUnit, a_t: Tensor) -> Tensor:
    return unit(a_t)


def attend(attention: AttentionUnit, a_t: Tensor) -> Tensor:
    return attention(a_t)


class ClassifierBank:
    """``n`` classifier units with stacked parameters.

    Weight tensors are ``(n, out, in)`` and biases ``(n, out)``.
    """

    def __init__(self, weights: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(weights) != 3 or len(biases) != 3:
            raise ConfigError("a classifier bank has exactly three stacked dense layers")
        self.weights = list(weights)
        self.biases = list(biases)
        self.n = self.weights[0].shape[0]
        self.feature_dim = self.weights[0].shape[2]
        self.n_classes = self.weights[2].shape[1]

    @classmethod
    def create(cls, n: int, feature_dim: int, n_classes: int, rng: np.random.Generator) -> ClassifierBank:
        dims = (feature_dim, *CLASSIFIER_HIDDEN, n_classes)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = glorot_uniform(rng, (n, fan_out, fan_in), fan_in, fan_out)
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros((n, fan_out)), requires_grad=True))
        return cls(weights, biases)

    @classmethod
    def from_units(cls, units: Sequence[ClassifierUnit]) -> ClassifierBank:
        layers = [[u.dense1, u.dense2, u.head] for u in units]
        weights = [Tensor(np.stack([row[j].weights.data for row in layers]), requires_grad=True) for j in range(3)]
        biases = [Tensor(np.stack([row[j].bias.data for row in layers]), requires_grad=True) for j in range(3)]
        return cls(weights, biases)

    def unit(self, i: int) -> ClassifierUnit:
        """Standalone copy of classifier ``i``."""
        dense = [DenseLayer.from_arrays(w.data[i].copy(), b.data[i].copy()) for w, b in zip(self.weights, self.biases)]
        return ClassifierUnit(*dense)

    def __len__(self) -> int:
        return self.n

    def __call__(self, a: Tensor) -> Tensor:
        """Class probabilities of every unit for rows ``a`` (R, D) -> (n, R, m)."""
        w1, w2, w3 = self.weights
        b1, b2, b3 = self.biases
        rows = a.shape[0]
        h1_dim = w1.shape[1]
        # first layer of all units in one product: (R, D) @ (D, n*h1)
        flat_w1 = transpose(w1.reshape(self.n * h1_dim, self.feature_dim))
        h = matmul(a, flat_w1).reshape(rows, self.n, h1_dim) + b1
        h = relu(transpose(h, (1, 0, 2)))  # (n, R, h1)
        h = relu(matmul(h, transpose(w2, (0, 2, 1))) + b2.reshape(self.n, 1, -1))
        logits = matmul(h, transpose(w3, (0, 2, 1))) + b3.reshape(self.n, 1, -1)
        return softmax(logits, axis=-1)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for j, name in enumerate(("dense1", "dense2", "head")):
            out += [(f"{name}.weights", self.weights[j]), (f"{name}.bias", self.biases[j])]
        return out


@dataclass
class ACBOutput:
    context: Tensor  # (R, m)
    attention: Tensor  # (R, n)
    classifier_probs: Tensor  # (n, R, m)


class ACB:
    def __init__(self, classifiers: ClassifierBank, attention: AttentionUnit):
        if classifiers.n < 1:
            raise ConfigError("the block needs at least one classifier")
        if classifiers.n_classes < 2:
            raise ConfigError("the block needs at least two classes")
        if attention.dense1.in_dim != classifiers.feature_dim:
            raise ConfigError(
                f"attention feature_dim {attention.dense1.in_dim} != classifier feature_dim {classifiers.feature_dim}"
            )
        if attention.head.out_dim != classifiers.n:
            raise ConfigError(f"attention produces {attention.head.out_dim} weights for {classifiers.n} classifiers")
        self.classifiers = classifiers
        self.attention = attention

    @classmethod
    def create(cls, feature_dim: int, n: int, m: int, rng: np.random.Generator) -> ACB:
        if n < 1 or m < 2 or feature_dim < 1:
            raise ConfigError(f"invalid block sizes: feature_dim={feature_dim}, n={n}, m={m}")
        bank = ClassifierBank.create(n, feature_dim, m, rng)
        return cls(bank, AttentionUnit.create(feature_dim, n, rng))

    @property
    def n(self) -> int:
        return self.classifiers.n

    @property
    def m(self) -> int:
        return self.classifiers.n_classes

    @property
    def feature_dim(self) -> int:
        return self.classifiers.feature_dim

    def run(self, a: Tensor) -> ACBOutput:
        """Evaluate the block on rows ``a`` of shape (R, feature_dim)."""
        if a.ndim != 2 or a.shape[1] != self.feature_dim:
            raise ShapeError(f"block expects rows of dimension {self.feature_dim}, got {a.shape}")
        probs = self.classifiers(a)  # (n, R, m)
        alpha = self.attention(a)  # (R, n)
        weighted = transpose(probs, (1, 0, 2)) * alpha.reshape(*alpha.shape, 1)
        return ACBOutput(tsum(weighted, axis=1), alpha, probs)

    def __call__(self, a: Tensor) -> Tensor:
        return self.run(a).context

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"classifiers.{k}", t) for k, t in self.classifiers.parameters()] + [
            (f"attention.{k}", t) for k, t in self.attention.parameters()
        ]


def acb_forward(block: ACB, a_t: Tensor) -> Tensor:
    """Context vector for a single feature vector ``a_t``."""
    if a_t.ndim != 1:
        raise ShapeError(f"acb_forward expects a single feature vector, got {a_t.shape}")
    return block(a_t.reshape(1, a_t.shape[0])).reshape(block.m)


def temporal_average(contexts: Sequence[Tensor] | Tensor) -> Tensor:
    """Mean of the per-timestep context vectors.

    Accepts a list of (m,) tensors or a single (p, m) tensor.
    """
    if isinstance(contexts, Tensor):
        if contexts.ndim != 2 or contexts.shape[0] == 0:
            raise DegenerateError("temporal average needs at least one timestep")
        return mean(contexts, axis=0)
    if len(contexts) == 0:
        raise DegenerateError("temporal average needs at least one timestep")
    return mean(stack(list(contexts), axis=0), axis=0)
