"""Disentangled-VAE voice conversion on a numpy autodiff engine."""

from .dsp import MelSpectrogram, NormalizationStats, SpectrogramConfig, Waveform
from .errors import DisVAEError
from .model import DisentangledVAE, ModelConfig
from .trainer import TrainConfig

__all__ = ["DisVAEError", "DisentangledVAE", "MelSpectrogram", "ModelConfig", "NormalizationStats",
           "SpectrogramConfig", "TrainConfig", "Waveform"]
__version__ = "0.1.0"
