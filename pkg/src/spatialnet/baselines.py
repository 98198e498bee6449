"""Oracle MVDR beamforming and WPE dereverberation in the STFT domain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import DirectPathInfo
from .stft import Spectrogram


class BeamformerError(np.linalg.LinAlgError):
    pass


@dataclass
class SteeringVector:
    """Relative transfer functions ``[F, M]``; the reference entry is exactly 1."""

    vectors: np.ndarray
    ref_channel: int = 0

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.complex128)
        if v.ndim != 2:
            raise ValueError(f"steering vectors must be [F, M], got {v.shape}")
        if not np.allclose(v[:, self.ref_channel], 1.0, atol=1e-12):
            raise ValueError("reference entry of an RTF must be 1")
        self.vectors = v


@dataclass
class SpatialCovariance:
    """Per-frequency Hermitian ``[F, M, M]`` matrices."""

    matrices: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.matrices, dtype=np.complex128)
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise ValueError(f"covariance must be [F, M, M], got {c.shape}")
        if not np.allclose(c, np.conj(np.swapaxes(c, 1, 2)), atol=1e-10 * max(1.0, np.abs(c).max())):
            raise ValueError("covariance is not Hermitian")
        self.matrices = 0.5 * (c + np.conj(np.swapaxes(c, 1, 2)))


def _dtft(h: np.ndarray, window_len: int) -> np.ndarray:
    # h [..., L] -> [..., F] at the STFT bin frequencies k / window_len (any filter length)
    k = np.arange(window_len // 2 + 1)
    n = np.arange(h.shape[-1])
    return h @ np.exp(-2j * np.pi * np.outer(n, k) / window_len)


def rtf_from_filters(filters: np.ndarray, window_len: int, ref_channel: int = 0,
                     rel_loading: float = 1e-10) -> SteeringVector:
    """RTF of one source from its per-channel filters ``[M, L]``."""
    h = _dtft(np.atleast_2d(filters), window_len).T  # [F, M]
    ref = h[:, ref_channel:ref_channel + 1]
    power = np.abs(ref) ** 2
    # loading scales with the strongest channel so a silent reference stays finite
    peak = float(np.max(np.abs(h) ** 2))
    load = rel_loading * peak if peak > 0 else 1.0
    rtf = h * np.conj(ref) / (power + load)
    rtf[:, ref_channel] = 1.0
    return SteeringVector(rtf, ref_channel)


def oracle_rtf(direct: DirectPathInfo, window_len: int, ref_channel: int = 0) -> list[SteeringVector]:
    """Direct-path RTFs, one per source."""
    return [rtf_from_filters(f, window_len, ref_channel) for f in direct.filters]


def covariance(spec: Spectrogram) -> SpatialCovariance:
    """Sample covariance over frames: ``mean_t x_t x_t^H`` per frequency."""
    x = spec.bins  # [F, T, M]
    return SpatialCovariance(np.einsum("ftm,ftn->fmn", x, np.conj(x)) / max(x.shape[1], 1))


def undesired_covariance(mix: Spectrogram, target: Spectrogram, steering: SteeringVector) -> SpatialCovariance:
    """Covariance of everything except the target's direct path.

    ``target`` is the direct-path signal at the reference channel; its image at
    every mic is ``d(f) * target``. The target's own reverberation therefore
    counts as interference, which keeps the weights from amplifying it.
    """
    if target.bins.shape[:2] != mix.bins.shape[:2]:
        raise ValueError(f"target {target.bins.shape} and mixture {mix.bins.shape} disagree")
    u = mix.bins - target.bins[:, :, :1] * steering.vectors[:, None, :]
    return covariance(Spectrogram(u, mix.window_len, mix.hop, mix.sample_rate, mix.length))


def mvdr_weights(steering: SteeringVector, noise_cov: SpatialCovariance,
                 loading: float = 1e-6) -> np.ndarray:
    """``w = Phi^-1 d / (d^H Phi^-1 d)`` per frequency, Phi diagonally loaded by ``loading * tr/M``."""
    d = steering.vectors
    phi = noise_cov.matrices
    if phi.shape[0] != d.shape[0] or phi.shape[1] != d.shape[1]:
        raise ValueError(f"steering {d.shape} and covariance {phi.shape} disagree")
    m = d.shape[1]
    tr = np.real(np.trace(phi, axis1=1, axis2=2))
    if np.any(tr <= 0) or not np.all(np.isfinite(tr)):
        raise BeamformerError("noise covariance is singular (zero trace) at some frequency")
    loaded = phi + (loading * tr / m)[:, None, None] * np.eye(m)
    num = np.linalg.solve(loaded, d[..., None])[..., 0]  # [F, M]
    den = np.einsum("fm,fm->f", np.conj(d), num)
    if np.any(np.abs(den) < 1e-300):
        raise BeamformerError("steering vector lies in the null space of the loaded covariance")
    return num / den[:, None]


def mvdr(mix: Spectrogram, steering: SteeringVector, noise_cov: SpatialCovariance,
         loading: float = 1e-6) -> Spectrogram:
    """Single-channel MVDR output ``w^H x`` for every time-frequency bin."""
    w = mvdr_weights(steering, noise_cov, loading)
    out = np.einsum("fm,ftm->ft", np.conj(w), mix.bins)
    return Spectrogram(out[:, :, None], mix.window_len, mix.hop, mix.sample_rate, mix.length)


def wpe(mix: Spectrogram, taps: int = 5, delay: int = 3, iters: int = 3,
        power_floor: float = 1e-8, loading: float = 1e-6) -> Spectrogram:
    """Multichannel weighted prediction error dereverberation.

    For every frequency, the late reverberation of ``x_t`` is predicted from
    ``x_{t-delay-k}``, ``k < taps``, with per-frame weights given by the
    inverse power of the current estimate, floored at ``power_floor`` times
    the bin's mean power. Normal equations are diagonally loaded by
    ``loading * tr/dim``.
    """
    x = mix.bins  # [F, T, M]
    f, t, m = x.shape
    if t <= taps + delay:
        raise ValueError(f"WPE needs more than taps + delay = {taps + delay} frames, got {t}")
    # delayed stack y[f, t, k*M + m] = x[f, t - delay - k, m]
    y = np.zeros((f, t, taps * m), dtype=np.complex128)
    for k in range(taps):
        shift = delay + k
        y[:, shift:, k * m:(k + 1) * m] = x[:, :t - shift, :]
    d = x.astype(np.complex128)
    dim = taps * m
    for _ in range(iters):
        lam = np.mean(np.abs(d) ** 2, axis=-1)  # [F, T]
        # floor relative to each bin's mean power keeps wpe(a X) = a wpe(X) exact
        lam = np.maximum(lam, np.maximum(power_floor * lam.mean(axis=1, keepdims=True), 1e-300))
        yw = y / lam[..., None]
        r = np.einsum("ftk,ftl->fkl", yw, np.conj(y))
        p = np.einsum("ftk,ftm->fkm", yw, np.conj(x))
        tr = np.real(np.trace(r, axis1=1, axis2=2))
        eye = np.eye(dim)
        zero = tr <= 0
        r = r + (loading * tr / dim)[:, None, None] * eye
        r[zero] = eye
        g = np.linalg.solve(r, p)  # [F, K*M, M]
        d = x - np.einsum("fkm,ftk->ftm", np.conj(g), y)
    return Spectrogram(d, mix.window_len, mix.hop, mix.sample_rate, mix.length)


def ctf_fixture(source: Spectrogram, num_mics: int = 6, taps: int = 20, decay_frames: float = 4.0,
                early: int = 3, rng=None) -> tuple[Spectrogram, Spectrogram]:
    """Reverberate a single-channel STFT with random per-bin convolutive transfer functions.

    ``X_m(f, t) = sum_k A_m(f, k) S(f, t - k)`` with complex Gaussian taps whose
    variance decays as ``exp(-k / decay_frames)``. Returns the reverberant
    multichannel spectrogram and the early-part target at channel 0 (taps
    ``k < early``).
    """
    rng = np.random.default_rng(rng)
    s = source.bins[:, :, 0]
    f, t = s.shape
    env = np.exp(-np.arange(taps) / (2 * decay_frames))
    a = (rng.standard_normal((f, num_mics, taps)) + 1j * rng.standard_normal((f, num_mics, taps))) / np.sqrt(2)
    a *= env
    x = np.zeros((f, t, num_mics), dtype=np.complex128)
    target = np.zeros((f, t), dtype=np.complex128)
    for k in range(taps):
        shifted = np.zeros_like(s)
        shifted[:, k:] = s[:, :t - k]
        x += shifted[:, :, None] * a[:, None, :, k]
        if k < early:
            target += shifted * a[:, 0, k][:, None]
    mk = lambda b: Spectrogram(b, source.window_len, source.hop, source.sample_rate, source.length)  # noqa: E731
    return mk(x), mk(target[:, :, None])
