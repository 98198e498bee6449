"""Waveform <-> network plumbing shared by training, enhancement and evaluation.

The mixture is divided by the standard deviation of its reference channel
before the STFT; network outputs are synthesized with a differentiable iSTFT
and multiplied back by that scale.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .stft import Waveform, default_window, istft_tensor, num_frames, stack_input, stft


def valid_length(n_samples: int, window_len: int) -> int:
    """Longest prefix of ``n_samples`` fully covered by STFT frames."""
    n_frames = num_frames(n_samples, window_len)
    return (n_frames + 1) * (window_len // 2) if n_frames else 0


def mixture_scale(mix: np.ndarray, ref_channel: int = 0) -> float:
    s = float(np.std(mix[ref_channel]))
    return s if s > 0 else 1.0


def features(mix: np.ndarray, sample_rate: int, ref_channel: int = 0,
             window_len: int | None = None) -> tuple[np.ndarray, float]:
    """``mix [M, N]`` -> (network input ``[F, T, 2M]`` float32, scale)."""
    window_len = window_len or default_window(sample_rate)
    scale = mixture_scale(mix, ref_channel)
    spec = stft(Waveform(mix / scale, sample_rate), window_len)
    return stack_input(spec).astype(np.float32), scale


def output_waveforms(y: T.Tensor, window_len: int, length: int) -> T.Tensor:
    """Network output ``[B, F, T, 2P]`` -> time signals ``[B, P, length]``."""
    b, f, t, ch = y.shape
    p = ch // 2
    y = T.transpose(T.reshape(y, (b, f, t, p, 2)), (0, 3, 1, 2, 4))
    return istft_tensor(y, window_len, length)


def batch_forward(model, mixes: np.ndarray, sample_rate: int, ref_channel: int = 0,
                  training: bool = False, rng=None) -> T.Tensor:
    """Run the model on ``mixes [B, M, N]``; returns rescaled estimates ``[B, P, N]``."""
    window_len = 2 * (model.config.num_freqs - 1)
    feats, scales = zip(*(features(m, sample_rate, ref_channel, window_len) for m in mixes))
    y = model.forward(np.stack(feats), training=training, rng=rng)
    waves = output_waveforms(y, window_len, mixes.shape[-1])
    scale = np.asarray(scales, dtype=waves.dtype).reshape(-1, 1, 1)
    return waves * scale


def separate(model, mixture: Waveform, ref_channel: int = 0) -> Waveform:
    """Inference on one utterance: ``[M, N]`` mixture -> ``[P, N]`` estimates."""
    if mixture.channels != model.config.num_mics:
        raise ValueError(f"mixture has {mixture.channels} channels, model expects {model.config.num_mics}")
    with T.no_grad():
        est = batch_forward(model, mixture.samples[None], mixture.sample_rate, ref_channel)
    return Waveform(est.data[0].astype(np.float64), mixture.sample_rate)
