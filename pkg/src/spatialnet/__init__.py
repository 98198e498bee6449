"""Multichannel speech separation, dereverberation and denoising in the STFT domain."""
from .model import ModelConfig, SpatialNet, count_flops, count_params
from .stft import Spectrogram, Waveform, istft, stft

__version__ = "0.1.0"
__all__ = ["ModelConfig", "SpatialNet", "Spectrogram", "Waveform", "count_flops",
           "count_params", "istft", "stft"]
