"""CAB-CNN: a 1-D convolutional audio classifier with an attention-gated classifier bank."""

from .acb import ACB, ACBOutput, ClassifierBank
from .errors import (
    CabCnnError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DegenerateError,
    InputTooShortError,
    NumericError,
    ShapeError,
    WavParseError,
)
from .model import ConvStage, Model, ModelConfig, build, count_parameters, forward, load, save
from .tensor import Tensor
from .training import TrainConfig, train

__version__ = "0.1.0"
