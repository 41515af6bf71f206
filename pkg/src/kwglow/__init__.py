"""Flow-based neural vocoder toolkit: features, model, training, evaluation."""

__version__ = "0.1.0"

from .dsp import AudioClip, MelConfig, MelSpectrogram, StftConfig
from .flow import FlowConfig, FlowModel, LossBreakdown, negative_log_likelihood
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AudioClip", "MelConfig", "MelSpectrogram", "StftConfig",
    "FlowConfig", "FlowModel", "LossBreakdown", "negative_log_likelihood",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "__version__",
]
