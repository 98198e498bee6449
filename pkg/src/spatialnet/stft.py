"""STFT analysis/synthesis, network input stacking and WAV I/O.

Frames start at sample 0 with no centering or padding, so a signal of ``N``
samples gives ``T = 1 + (N - L) // hop`` frames. Only a periodic Hann window
with a hop of half the window length is supported; synthesis is weighted
overlap-add normalized by the summed squared window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from . import tensor as T

WINDOW_FOR_RATE = {16000: 512, 8000: 256}


@dataclass
class Waveform:
    """``samples`` is ``[M, N]`` (channels x time)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError(f"waveform samples must be [M, N], got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


@dataclass
class Spectrogram:
    """``bins`` is complex ``[F, T, M]``; ``length`` is the source signal length."""

    bins: np.ndarray
    window_len: int
    hop: int
    sample_rate: int
    length: int = field(default=-1)

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim == 2:
            b = b[:, :, None]
        if b.ndim != 3:
            raise ValueError(f"spectrogram bins must be [F, T, M], got {b.shape}")
        if b.shape[0] != self.window_len // 2 + 1:
            raise ValueError(f"{b.shape[0]} bins inconsistent with window {self.window_len}")
        if self.hop * 2 != self.window_len:
            raise ValueError("only 50% overlap (hop = window_len / 2) is supported")
        if self.length < 0:
            self.length = (b.shape[1] - 1) * self.hop + self.window_len
        self.bins = b

    @property
    def shape(self):
        return self.bins.shape


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def default_window(sample_rate: int) -> int:
    try:
        return WINDOW_FOR_RATE[sample_rate]
    except KeyError:
        raise ValueError(f"no default STFT window for {sample_rate} Hz (use 8000 or 16000)") from None


def num_frames(n_samples: int, window_len: int, hop: int | None = None) -> int:
    hop = hop or window_len // 2
    if n_samples < window_len:
        return 0
    return 1 + (n_samples - window_len) // hop


def _frames(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    # [..., N] -> [..., T, L]
    n_frames = num_frames(x.shape[-1], window_len, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, window_len, axis=-1)
    return view[..., ::hop, :][..., :n_frames, :]


def stft(wave: Waveform, window_len: int | None = None) -> Spectrogram:
    window_len = window_len or default_window(wave.sample_rate)
    hop = window_len // 2
    if wave.length < window_len:
        raise ValueError(f"signal of {wave.length} samples is shorter than one window ({window_len})")
    frames = _frames(wave.samples, window_len, hop) * hann(window_len)  # [M, T, L]
    spec = np.fft.rfft(frames, axis=-1)  # [M, T, F]
    return Spectrogram(spec.transpose(2, 1, 0), window_len, hop, wave.sample_rate, wave.length)


ENV_FLOOR = 0.1


def _envelope(n_frames: int, window_len: int, hop: int, length: int) -> np.ndarray:
    w2 = hann(window_len) ** 2
    env = np.zeros(max(length, (n_frames - 1) * hop + window_len))
    for t in range(n_frames):
        env[t * hop:t * hop + window_len] += w2
    return env[:length]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    # frames [..., T, 2*hop] -> [..., (T+1)*hop]; valid for 50% overlap only
    first, second = frames[..., :hop], frames[..., hop:]
    n_frames = frames.shape[-2]
    blocks = np.zeros(frames.shape[:-2] + (n_frames + 1, hop), dtype=frames.dtype)
    blocks[..., :n_frames, :] += first
    blocks[..., 1:, :] += second
    return blocks.reshape(*frames.shape[:-2], (n_frames + 1) * hop)


def _synthesis_gain(n_frames, window_len, hop, length) -> np.ndarray:
    env = _envelope(n_frames, window_len, hop, (n_frames + 1) * hop)
    # Near the signal edges only one window tapers in, so the envelope goes to 0.
    # Flooring it bounds the gain there; exact inversion holds wherever env >= floor.
    gain = 1.0 / np.maximum(env, ENV_FLOOR)
    out = np.zeros(length)
    n = min(length, gain.size)
    out[:n] = gain[:n]
    return out


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add synthesis; samples past the last frame are zero."""
    bins = spec.bins
    if bins.shape[0] != spec.window_len // 2 + 1:
        raise ValueError("spectrogram metadata inconsistent with bin count")
    frames = np.fft.irfft(bins.transpose(2, 1, 0), n=spec.window_len, axis=-1)  # [M, T, L]
    frames = frames * hann(spec.window_len)
    y = _overlap_add(frames, spec.hop)
    gain = _synthesis_gain(bins.shape[1], spec.window_len, spec.hop, spec.length)
    out = np.zeros((bins.shape[2], spec.length))
    n = min(spec.length, y.shape[-1])
    out[:, :n] = y[:, :n]
    return Waveform(out * gain, spec.sample_rate)


def istft_tensor(y, window_len: int, length: int) -> T.Tensor:
    """Differentiable iSTFT of real/imag pairs ``[..., F, T, 2]`` -> ``[..., length]``."""
    y = T.as_tensor(y)
    hop = window_len // 2
    n_frames = y.shape[-2]
    win = hann(window_len).astype(y.dtype)
    gain = _synthesis_gain(n_frames, window_len, hop, length).astype(y.dtype)
    n_valid = min(length, (n_frames + 1) * hop)
    # adjoint weights of irfft w.r.t. the one-sided spectrum
    ck = np.full(window_len // 2 + 1, 2.0 / window_len, dtype=y.dtype)
    ck[0] = ck[-1] = 1.0 / window_len

    def forward(a):
        bins = a[..., 0] + 1j * a[..., 1]  # [..., F, T]
        frames = np.fft.irfft(np.swapaxes(bins, -1, -2), n=window_len, axis=-1) * win
        full = _overlap_add(frames, hop)
        out = np.zeros(a.shape[:-3] + (length,), dtype=a.dtype)
        out[..., :n_valid] = full[..., :n_valid]
        return out * gain

    def adjoint(g):
        g = g * gain
        padded = np.zeros(g.shape[:-1] + ((n_frames + 1) * hop,), dtype=g.dtype)
        padded[..., :n_valid] = g[..., :n_valid]
        blocks = padded.reshape(*g.shape[:-1], n_frames + 1, hop)
        frames = np.concatenate([blocks[..., :n_frames, :], blocks[..., 1:, :]], axis=-1) * win
        spec = np.fft.rfft(frames, axis=-1) * ck  # [..., T, F]
        spec = np.swapaxes(spec, -1, -2)
        return np.stack([spec.real, spec.imag], axis=-1).astype(g.dtype)

    return T.linear_map(y, forward, adjoint, op="istft")


def stack_input(spec: Spectrogram) -> np.ndarray:
    """``[F, T, M]`` complex -> ``[F, T, 2M]`` real as (Re1, Im1, ..., ReM, ImM)."""
    b = spec.bins
    return np.stack([b.real, b.imag], axis=-1).reshape(b.shape[0], b.shape[1], 2 * b.shape[2])


def unstack(y: np.ndarray) -> np.ndarray:
    """``[..., 2P]`` real -> ``[..., P]`` complex; inverse of the stacking order."""
    y = np.asarray(y)
    if y.shape[-1] % 2:
        raise ValueError(f"last dimension must be even, got {y.shape[-1]}")
    pairs = y.reshape(*y.shape[:-1], y.shape[-1] // 2, 2)
    return pairs[..., 0] + 1j * pairs[..., 1]


def unstack_output(y: np.ndarray, window_len: int, sample_rate: int,
                   length: int = -1) -> list[Spectrogram]:
    """Split a ``[F, T, 2P]`` network output into P single-channel spectrograms."""
    c = unstack(y)
    return [Spectrogram(c[:, :, p:p + 1], window_len, window_len // 2, sample_rate, length)
            for p in range(c.shape[-1])]


def read_wav(path) -> Waveform:
    """Read PCM16/PCM32/float WAV into float64 ``[M, N]`` in [-1, 1]."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128) / 128.0
    data = data.astype(np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return Waveform(data.T, int(rate))


def write_wav(path, wave: Waveform, pcm16: bool = False) -> None:
    """Write as 32-bit float (default) or 16-bit PCM (clipped)."""
    x = wave.samples.T
    if pcm16:
        x = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        if np.abs(x).max(initial=0.0) > np.finfo(np.float32).max:
            raise ValueError(f"{path}: samples exceed the float32 range")
        x = x.astype(np.float32)
    if x.shape[1] == 1:
        x = x[:, 0]
    wavfile.write(path, wave.sample_rate, x)
