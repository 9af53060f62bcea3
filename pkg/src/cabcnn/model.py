"""The full network: conv/pool feature distillation, batch norm, ACB, average.

Checkpoint container layout (all integers little-endian)::

    8 bytes   magic b"CABCNN\\x00\\x01"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header
    ...       float64 ('<f8') blocks, one per header["blocks"] entry, in order

The header carries ``config``, ``config_hash`` (sha256 of the canonical
config JSON), ``blocks`` (name + shape) and a free-form ``extra`` dict.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .acb import ACB, ACBOutput
from .errors import (
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    InputTooShortError,
    ShapeError,
)
from .layers import (
    INFER,
    TRAIN,
    BatchNormLayer,
    Conv1DLayer,
    MaxPool1DLayer,
    dropout_forward,
    pool_output_length,
)
from .tensor import Tensor, mean, relu, transpose

MAGIC = b"CABCNN\x00\x01"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvStage:
    filters: int
    kernel: int
    pool_size: int
    pool_stride: int
    dropout_rate: float | None = None


@dataclass(frozen=True)
class BatchNormConfig:
    momentum: float = 0.99
    epsilon: float = 1e-5


def _default_stages() -> tuple[ConvStage, ...]:
    return (
        ConvStage(16, 4, 4, 2, 0.15),
        ConvStage(32, 4, 4, 2, 0.15),
        ConvStage(32, 10, 10, 5, 0.10),
        ConvStage(128, 10, 10, 5, None),
    )


@dataclass(frozen=True)
class ModelConfig:
    conv_stages: tuple[ConvStage, ...] = field(default_factory=_default_stages)
    feature_dim: int = 128
    n_classifiers: int = 40
    n_classes: int = 3
    batchnorm: BatchNormConfig = field(default_factory=BatchNormConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_stages", tuple(self.conv_stages))
        self.validate()

    def validate(self) -> None:
        if not self.conv_stages:
            raise ConfigError("at least one conv stage is required")
        for i, s in enumerate(self.conv_stages):
            if min(s.filters, s.kernel, s.pool_size, s.pool_stride) < 1:
                raise ConfigError(f"conv stage {i} has a non-positive size: {s}")
            if s.dropout_rate is not None and not 0.0 <= s.dropout_rate < 1.0:
                raise ConfigError(f"conv stage {i} dropout rate {s.dropout_rate} outside [0, 1)")
        if self.feature_dim != self.conv_stages[-1].filters:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must equal the last stage's filter count "
                f"{self.conv_stages[-1].filters}"
            )
        if self.n_classifiers < 1:
            raise ConfigError("n_classifiers must be at least 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.batchnorm.epsilon <= 0 or not 0.0 <= self.batchnorm.momentum <= 1.0:
            raise ConfigError(f"invalid batchnorm settings {self.batchnorm}")

    @property
    def min_length(self) -> int:
        """Shortest input that the strides reduce by their full product."""
        return int(np.prod([s.pool_stride for s in self.conv_stages]))

    def timesteps(self, length: int) -> int:
        p = length
        for s in self.conv_stages:
            p = pool_output_length(p, s.pool_stride)
        return p

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        d = dict(d)
        stages = tuple(ConvStage(**s) for s in d.pop("conv_stages"))
        bn = BatchNormConfig(**d.pop("batchnorm"))
        return cls(conv_stages=stages, batchnorm=bn, **d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(config: dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class ModelOutput:
    probs: Tensor  # (B, m)
    features: Tensor  # (B, p, feature_dim), after batch norm
    block: ACBOutput  # rows are (B*p)


class Model:
    def __init__(self, config: ModelConfig, convs, pools, batchnorm: BatchNormLayer, acb: ACB):
        self.config = config
        self.convs: list[Conv1DLayer] = list(convs)
        self.pools: list[MaxPool1DLayer] = list(pools)
        self.batchnorm = batchnorm
        self.acb = acb

    @property
    def layers(self) -> list:
        out: list = []
        for conv, pool in zip(self.convs, self.pools):
            out += [conv, pool]
        return out + [self.batchnorm]

    def run(self, x, mode: str = INFER, rng: np.random.Generator | None = None) -> ModelOutput:
        """Forward a batch of equal-length waveforms ``x`` of shape (B, L)."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if data.ndim == 3 and data.shape[1] == 1:
            data = data[:, 0, :]
        if data.ndim != 2:
            raise ShapeError(f"model input must be (batch, length), got {data.shape}")
        length = data.shape[1]
        if length < self.config.min_length:
            raise InputTooShortError(
                f"input length {length} is shorter than the minimum length {self.config.min_length}"
            )
        if mode == TRAIN and rng is None:
            rng = np.random.default_rng(self.config.seed)
        h = x.reshape(data.shape[0], 1, length) if isinstance(x, Tensor) else Tensor(data[:, None, :])
        for stage, conv, pool in zip(self.config.conv_stages, self.convs, self.pools):
            h = pool(relu(conv(h)))
            if stage.dropout_rate:
                h = dropout_forward(h, stage.dropout_rate, mode, rng)
        h = self.batchnorm(h, mode)
        batch, dim, p = h.shape
        feats = transpose(h, (0, 2, 1))  # (B, p, D)
        block = self.acb.run(feats.reshape(batch * p, dim))
        probs = mean(block.context.reshape(batch, p, self.acb.m), axis=1)
        return ModelOutput(probs, feats, block)

    def __call__(self, x, mode: str = INFER, rng: np.random.Generator | None = None) -> Tensor:
        return self.run(x, mode, rng).probs

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, conv in enumerate(self.convs):
            out += [(f"conv{i}.{k}", t) for k, t in conv.parameters()]
        out += [(f"batchnorm.{k}", t) for k, t in self.batchnorm.parameters()]
        out += [(f"acb.{k}", t) for k, t in self.acb.parameters()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("batchnorm.running_mean", self.batchnorm.running_mean),
            ("batchnorm.running_var", self.batchnorm.running_var),
        ]

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: t.data.copy() for k, t in self.parameters()}
        out.update({k: v.copy() for k, v in self.buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters():
            if state[k].shape != t.shape:
                raise ShapeError(f"state entry {k} has shape {state[k].shape}, expected {t.shape}")
            t.data = state[k].copy()
        self.batchnorm.running_mean = state["batchnorm.running_mean"].copy()
        self.batchnorm.running_var = state["batchnorm.running_var"].copy()

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None


def build(config: ModelConfig | None = None) -> Model:
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    convs, pools = [], []
    in_ch = 1
    for stage in config.conv_stages:
        convs.append(Conv1DLayer.create(in_ch, stage.filters, stage.kernel, rng))
        pools.append(MaxPool1DLayer(stage.pool_size, stage.pool_stride))
        in_ch = stage.filters
    bn = BatchNormLayer.create(in_ch, config.batchnorm.momentum, config.batchnorm.epsilon)
    block = ACB.create(config.feature_dim, config.n_classifiers, config.n_classes, rng)
    return Model(config, convs, pools, bn, block)


def forward(model: Model, samples, mode: str = INFER, rng: np.random.Generator | None = None) -> Tensor:
    """Class probabilities for one waveform given as (L,) or (1, L)."""
    data = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[0] != 1:
        raise ShapeError(f"forward expects a single waveform (1, L), got {data.shape}")
    x = samples.reshape(1, data.shape[1]) if isinstance(samples, Tensor) else data
    return model(x, mode, rng).reshape(model.config.n_classes)


def count_parameters(model: Model) -> int:
    return sum(t.size for _, t in model.parameters())


def parameter_breakdown(model: Model) -> dict[str, int]:
    """Scalar parameter counts grouped by layer."""
    groups: dict[str, int] = {}
    for name, t in model.parameters():
        if name.startswith("acb.classifiers"):
            key = "acb.classifiers"
        elif name.startswith("acb.attention"):
            key = "acb.attention"
        else:
            key = name.rsplit(".", 1)[0]
        groups[key] = groups.get(key, 0) + t.size
    return groups


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_container(path: str | os.PathLike, header: dict[str, Any], blocks: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["blocks"] = [{"name": n, "shape": list(a.shape)} for n, a in blocks]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    prefix = len(MAGIC) + 12
    if len(raw) < prefix:
        raise CorruptCheckpointError(f"{path}: file too short for a container header ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version, header_len = struct.unpack("<IQ", raw[len(MAGIC):prefix])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: container version {version}, expected {FORMAT_VERSION}")
    if len(raw) < prefix + header_len:
        raise CorruptCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    offset = prefix + header_len
    expected = offset + 8 * sum(int(np.prod(b["shape"], dtype=np.int64)) for b in header["blocks"])
    if len(raw) != expected:
        raise CorruptCheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arrays = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        arrays[b["name"]] = arr.reshape(b["shape"])
        offset += 8 * count
    return header, arrays


def save(model: Model, path: str | os.PathLike, extra: dict[str, Any] | None = None) -> None:
    config = model.config.to_dict()
    header = {
        "kind": "cabcnn-model",
        "config": config,
        "config_hash": config_hash(config),
        "seed": model.config.seed,
        "extra": extra or {},
    }
    blocks = [(k, t.data) for k, t in model.parameters()] + model.buffers()
    write_container(path, header, blocks)


def load(path: str | os.PathLike) -> Model:
    return load_with_extra(path)[0]


def load_with_extra(path: str | os.PathLike) -> tuple[Model, dict[str, Any]]:
    header, arrays = read_container(path)
    if header.get("kind") != "cabcnn-model":
        raise CorruptCheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    if config_hash(header["config"]) != header.get("config_hash"):
        raise CheckpointVersionError(f"{path}: config hash mismatch; checkpoint written by an incompatible version")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, KeyError) as exc:
        raise CheckpointVersionError(f"{path}: unrecognised config layout ({exc})") from exc
    model = build(config)
    names = [k for k, _ in model.parameters()] + [k for k, _ in model.buffers()]
    if sorted(names) != sorted(arrays):
        raise CheckpointVersionError(f"{path}: parameter names do not match the configured architecture")
    model.load_state(arrays)
    return model, header.get("extra", {})
