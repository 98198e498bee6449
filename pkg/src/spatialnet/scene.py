"""Synthetic multichannel scenes: image-method RIRs, direct-path targets,
spherically diffuse noise and SIR/SNR-controlled mixtures.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .stft import Waveform, read_wav, write_wav

SOUND_SPEED = 343.0
SINC_TAPS = 81


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    room: tuple[float, float, float]
    t60: float
    mics: np.ndarray  # [M, 3]
    sources: np.ndarray  # [P, 3]
    sir_db: float | list[float] = 0.0
    snr_db: float = math.inf
    noise_kind: str = "white"
    sample_rate: int = 8000
    seed: int = 0
    ref_channel: int = 0

    def __post_init__(self):
        self.mics = np.atleast_2d(np.asarray(self.mics, dtype=float))
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        room = np.asarray(self.room, dtype=float)
        if self.t60 <= 0:
            raise SceneError(f"T60 must be positive, got {self.t60}")
        if len(self.sources) < 1:
            raise SceneError("need at least one source")
        for name, pts in (("mic", self.mics), ("source", self.sources)):
            if np.any(pts <= 0) or np.any(pts >= room):
                raise SceneError(f"{name} positions must lie strictly inside the room")
        if self.noise_kind not in ("white", "speech"):
            raise SceneError(f"unknown noise kind {self.noise_kind!r}")

    @property
    def num_speakers(self) -> int:
        return len(self.sources)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mics"] = self.mics.tolist()
        d["sources"] = self.sources.tolist()
        d["room"] = list(self.room)
        d["snr_db"] = None if math.isinf(self.snr_db) else self.snr_db
        return d

    @classmethod
    def from_json(cls, d: dict) -> SceneSpec:
        known = set(cls.__dataclass_fields__)
        kw = {k: v for k, v in d.items() if k in known}
        kw["room"] = tuple(kw["room"])
        if kw.get("snr_db") is None:
            kw["snr_db"] = math.inf
        return cls(**kw)


@dataclass
class RoomImpulseResponse:
    filters: np.ndarray  # [P, M, L]
    sample_rate: int

    @property
    def peaks(self) -> np.ndarray:
        return np.argmax(np.abs(self.filters), axis=-1)


@dataclass
class DirectPathInfo:
    delays: np.ndarray  # [P, M] fractional samples
    levels: np.ndarray  # [P, M] linear amplitude
    filters: np.ndarray  # [P, M, L]
    sample_rate: int


def sabine_absorption(room: Sequence[float], t60: float) -> float:
    lx, ly, lz = room
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    return 0.161 * volume / (surface * t60)


def fractional_delay_taps(delay: np.ndarray, taps: int = SINC_TAPS):
    """Hann-windowed sinc interpolator centred on each (fractional) delay.

    Returns ``(index, weight)`` arrays of shape ``[..., taps]``.
    """
    delay = np.asarray(delay, dtype=float)
    half = taps // 2
    base = np.round(delay).astype(np.int64)
    idx = base[..., None] + np.arange(-half, half + 1)
    t = idx - delay[..., None]
    win = 0.5 * (1 + np.cos(np.pi * t / (half + 1)))
    return idx, np.sinc(t) * win


def _image_chunks(room, source, max_dist: float, chunk: int = 200_000):
    """Yield ``(positions [K, 3], reflection counts [K])`` for images within reach.

    Only images closer than ``max_dist`` plus the room diagonal to the source
    are kept, which bounds their distance to any point inside the room.
    """
    room = np.asarray(room, dtype=float)
    src = np.asarray(source, dtype=float)
    orders = [np.arange(-(int(max_dist // (2 * dim)) + 1), int(max_dist // (2 * dim)) + 2)
              for dim in room]
    reach = max_dist + np.linalg.norm(room)
    nx, ny = np.meshgrid(orders[0], orders[1], indexing="ij")
    nx, ny = nx.ravel(), ny.ravel()
    nz_all = orders[2]
    step = max(1, chunk // len(nz_all))
    for start in range(0, len(nx), step):
        n = np.stack([np.repeat(nx[start:start + step], len(nz_all)),
                      np.repeat(ny[start:start + step], len(nz_all)),
                      np.tile(nz_all, len(nx[start:start + step]))], axis=1)
        for q in np.ndindex(2, 2, 2):
            q = np.array(q)
            p = (1 - 2 * q) * src + 2 * n * room
            keep = np.einsum("ij,ij->i", p - src, p - src) < reach * reach
            if np.any(keep):
                yield p[keep], (np.abs(n[keep] - q) + np.abs(n[keep])).sum(axis=1)


def image_method(room, source, mics, beta: float, sample_rate: int, length: int,
                 c: float = SOUND_SPEED, early_ms: float = 20.0, late_taps: int = 11,
                 highpass_hz: float | None = 50.0) -> np.ndarray:
    """Shoebox RIRs ``[M, length]`` with uniform wall reflection coefficient ``beta``.

    Each image contributes ``beta**reflections / (4 pi d)`` at delay ``d / c``.
    Arrivals within ``early_ms`` of the direct path use the full 81-tap
    interpolator; later ones a ``late_taps`` one. Reverberant responses are
    high-passed at ``highpass_hz``.
    """
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    src = np.asarray(source, dtype=float)
    max_dist = length / sample_rate * c
    if not 0.0 <= beta < 1.0:
        raise SceneError(f"reflection coefficient must be in [0, 1), got {beta}")
    if beta == 0.0:
        chunks = [(src[None, :], np.zeros(1, dtype=np.int64))]
    else:
        chunks = _image_chunks(room, src, max_dist)
    out = np.zeros((len(mics), length))
    early_end = np.linalg.norm(mics - src, axis=1) / c * sample_rate + early_ms * 1e-3 * sample_rate
    for pos, refl in chunks:
        gain = beta ** refl if beta > 0 else np.ones(len(refl))
        for m, mic in enumerate(mics):
            d = np.sqrt(np.einsum("ij,ij->i", pos - mic, pos - mic))
            keep = d < max_dist
            if not np.any(keep):
                continue
            delay = d[keep] / c * sample_rate
            amp = gain[keep] / (4 * np.pi * d[keep])
            early = delay <= early_end[m]
            for sel, taps in ((early, SINC_TAPS), (~early, late_taps)):
                if not np.any(sel):
                    continue
                idx, w = fractional_delay_taps(delay[sel], taps)
                w = w * amp[sel, None]
                valid = (idx >= 0) & (idx < length)
                out[m] += np.bincount(idx[valid], weights=w[valid], minlength=length)[:length]
    if beta > 0.0 and highpass_hz:
        # dense all-positive arrivals build up a DC offset that inflates late energy
        b, a = signal.butter(2, highpass_hz / (sample_rate / 2), "high")
        out = signal.lfilter(b, a, out, axis=-1)
    return out


def decay_time(edc_db: np.ndarray, sample_rate: int, lo: float = -5.0, hi: float = -35.0) -> float:
    """T60 extrapolated from a linear fit of an energy decay curve between ``lo`` and ``hi`` dB."""
    idx = np.where((edc_db <= lo) & (edc_db >= hi))[0]
    if len(idx) < 2:
        return math.nan
    slope = np.polyfit(idx / sample_rate, edc_db[idx], 1)[0]
    return -60.0 / slope if slope < 0 else math.inf


def schroeder_edc(h: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, 0 dB at the start."""
    edc = np.cumsum(np.asarray(h)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(edc / edc[0])


def calibrate_beta(room, source, mic, t60: float, sample_rate: int,
                   c: float = SOUND_SPEED, horizon: float = 1.2) -> float:
    """Reflection coefficient whose image-source energy decay has the requested T60.

    Specular images in a shoebox decay slower than the diffuse-field
    prediction, so the Sabine coefficient is only the starting point: beta is
    refitted by bisection so that the Schroeder curve of the image set's
    (incoherent) energy histogram reaches -60 dB at ``t60``.
    """
    alpha = sabine_absorption(room, t60)
    beta0 = math.sqrt(max(0.0, 1.0 - alpha))
    n_bins = int(horizon * t60 * sample_rate)
    mic = np.asarray(mic, dtype=float)
    max_r = 0
    # energy per (reflection count, time bin); beta enters only as beta**(2r)
    parts = []
    for pos, refl in _image_chunks(room, source, horizon * t60 * c):
        d = np.sqrt(np.einsum("ij,ij->i", pos - mic, pos - mic))
        keep = d < n_bins / sample_rate * c
        parts.append((refl[keep], (d[keep] / c * sample_rate).astype(np.int64),
                      1.0 / (4 * np.pi * d[keep]) ** 2))
        if np.any(keep):
            max_r = max(max_r, int(refl[keep].max()) + 1)
    hist = np.zeros(max_r * n_bins)
    for r, tb, e in parts:
        hist += np.bincount(r * n_bins + tb, weights=e, minlength=max_r * n_bins)
    hist = hist.reshape(max_r, n_bins)

    def t60_of(beta):
        w = beta ** (2.0 * np.arange(max_r))
        edc = schroeder_edc(np.sqrt(w @ hist))
        below = np.nonzero(edc <= -60.0)[0]
        return below[0] / sample_rate if len(below) else math.inf

    lo, hi = 0.0, 0.9999
    if t60_of(hi) <= t60:
        return hi
    if t60_of(beta0) > t60:
        hi = beta0
    else:
        lo = beta0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if t60_of(mid) > t60:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def simulate_rir(spec: SceneSpec, length: int | None = None, calibrate: bool = True) -> RoomImpulseResponse:
    """Image-method RIRs for every (source, mic) pair.

    The T60 is rejected as infeasible when the Sabine absorption exceeds 1.
    With ``calibrate`` the reflection coefficient is refitted so the image
    decay actually matches T60; otherwise ``sqrt(1 - alpha_sabine)`` is used.
    """
    alpha = sabine_absorption(spec.room, spec.t60)
    if alpha > 1.0:
        raise SceneError(f"T60={spec.t60}s infeasible for room {tuple(spec.room)} "
                         f"(Sabine absorption {alpha:.2f} > 1)")
    if length is None:
        length = int(math.ceil(spec.t60 * spec.sample_rate))
    centre = spec.mics.mean(axis=0)
    filters = []
    for s in spec.sources:
        if calibrate:
            beta = calibrate_beta(spec.room, s, centre, spec.t60, spec.sample_rate)
        else:
            beta = math.sqrt(1.0 - alpha)
        filters.append(image_method(spec.room, s, spec.mics, beta, spec.sample_rate, length))
    return RoomImpulseResponse(np.stack(filters), spec.sample_rate)


def extract_direct_path(rir: RoomImpulseResponse, half_window_ms: float = 2.5) -> DirectPathInfo:
    """Keep only taps within +-``half_window_ms`` of each filter's absolute peak."""
    a = np.asarray(rir.filters)
    half = int(round(half_window_ms * 1e-3 * rir.sample_rate))
    peaks = np.argmax(np.abs(a), axis=-1)
    n = np.arange(a.shape[-1])
    mask = np.abs(n - peaks[..., None]) <= half
    direct = np.where(mask, a, 0.0)

    # parabolic interpolation of |a| around the peak for a sub-sample delay
    mag = np.abs(a)
    left = np.take_along_axis(mag, np.clip(peaks - 1, 0, a.shape[-1] - 1)[..., None], -1)[..., 0]
    mid = np.take_along_axis(mag, peaks[..., None], -1)[..., 0]
    right = np.take_along_axis(mag, np.clip(peaks + 1, 0, a.shape[-1] - 1)[..., None], -1)[..., 0]
    denom = left - 2 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / denom, 0.0)
    delays = peaks + np.clip(frac, -0.5, 0.5)
    levels = np.sqrt((direct ** 2).sum(axis=-1))
    return DirectPathInfo(delays, levels, direct, rir.sample_rate)


def speech_shaped_gain(freqs: np.ndarray) -> np.ndarray:
    """Rough long-term speech magnitude spectrum: flat-ish to 500 Hz, then ~-9 dB/oct."""
    f = np.maximum(freqs, 1.0)
    return (f / 100.0) ** 0.5 / (1 + (f / 500.0) ** 2) ** 0.75


def diffuse_coherence(freqs: np.ndarray, distance: float, c: float = SOUND_SPEED) -> np.ndarray:
    """Spherically diffuse spatial coherence ``sin(2 pi f d / c) / (2 pi f d / c)``."""
    return np.sinc(2 * np.asarray(freqs) * distance / c)


def gen_diffuse_noise(mics, kind: str, length: int, sample_rate: int, seed=None,
                      n_waves: int = 64, c: float = SOUND_SPEED) -> Waveform:
    """Diffuse noise as a superposition of far-field plane waves.

    Every FFT bin receives ``n_waves`` independent complex Gaussian waves with
    directions drawn uniformly on the sphere, so the expected inter-mic
    coherence at frequency f is the sinc law for the pair distance.
    """
    if kind not in ("white", "speech"):
        raise SceneError(f"unknown noise kind {kind!r}")
    if n_waves < 1:
        raise SceneError("n_waves must be positive")
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    rng = np.random.default_rng(seed)
    n_bins = length // 2 + 1
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spec = np.zeros((len(mics), n_bins), dtype=complex)
    rel = mics - mics.mean(axis=0)
    chunk = max(1, 2 ** 20 // (n_waves * max(1, len(mics))))
    for start in range(0, n_bins, chunk):
        stop = min(n_bins, start + chunk)
        k = stop - start
        u = rng.standard_normal((k, n_waves, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        amp = (rng.standard_normal((k, n_waves)) + 1j * rng.standard_normal((k, n_waves))) / math.sqrt(2 * n_waves)
        proj = u @ rel.T  # [k, W, M]
        phase = np.exp(-2j * np.pi * freqs[start:stop, None, None] * proj / c)
        spec[:, start:stop] = np.einsum("kw,kwm->mk", amp, phase)
    if kind == "speech":
        spec *= speech_shaped_gain(freqs)
    spec[:, 0] = spec[:, 0].real
    if length % 2 == 0:
        spec[:, -1] = spec[:, -1].real
    x = np.fft.irfft(spec, n=length, axis=-1)
    x /= np.sqrt(np.mean(x ** 2)) + 1e-12
    return Waveform(x, sample_rate)


def energy(x: np.ndarray) -> float:
    return float(np.sum(np.asarray(x, dtype=float) ** 2))


def _convolve(s: np.ndarray, filters: np.ndarray) -> np.ndarray:
    # s [N], filters [M, L] -> [M, N]
    n = s.shape[-1]
    return signal.fftconvolve(s[None, :], filters, axes=-1)[:, :n]


def mix_scene(sources: Sequence[np.ndarray], rir: RoomImpulseResponse,
              noise: np.ndarray | None, sir_db=0.0, snr_db: float = math.inf,
              ref_channel: int = 0, direct: DirectPathInfo | None = None) -> dict:
    """Mix P sources through their RIRs and add noise.

    Speaker p >= 2 is scaled so that, at ``ref_channel``, the energy ratio of
    speaker 1's reverberant image to speaker p's is ``sir_db``. Noise is scaled
    so that summed reverberant speech over noise is ``snr_db`` at the same
    channel. Targets are the equally scaled direct-path images at
    ``ref_channel``.
    """
    sources = [np.asarray(s, dtype=float).ravel() for s in sources]
    p_count = len(sources)
    if rir.filters.shape[0] != p_count:
        raise SceneError(f"{p_count} sources but RIRs for {rir.filters.shape[0]}")
    n = min(len(s) for s in sources)
    sources = [s[:n] for s in sources]
    for i, s in enumerate(sources):
        if energy(s) == 0.0:
            raise SceneError(f"source {i} is silent")
    if direct is None:
        direct = extract_direct_path(rir)
    images = np.stack([_convolve(s, rir.filters[p]) for p, s in enumerate(sources)])  # [P, M, N]
    sirs = np.broadcast_to(np.atleast_1d(np.asarray(sir_db, dtype=float)), (max(p_count - 1, 0),))
    gains = np.ones(p_count)
    e_ref = energy(images[0, ref_channel])
    if e_ref == 0.0:
        raise SceneError("speaker 1 has no energy at the reference channel")
    for p in range(1, p_count):
        e_p = energy(images[p, ref_channel])
        if e_p == 0.0:
            raise SceneError(f"source {p} has no energy at the reference channel")
        gains[p] = math.sqrt(e_ref / (e_p * 10 ** (sirs[p - 1] / 10)))
    images = images * gains[:, None, None]
    speech = images.sum(axis=0)
    m = speech.shape[0]
    scaled_noise = np.zeros_like(speech)
    noise_gain = 0.0
    if noise is not None and not math.isinf(snr_db):
        noise = np.atleast_2d(np.asarray(noise, dtype=float))[:, :n]
        if noise.shape != (m, n):
            raise SceneError(f"noise shape {noise.shape} != {(m, n)}")
        e_noise = energy(noise[ref_channel])
        if e_noise == 0.0:
            raise SceneError("noise is silent")
        noise_gain = math.sqrt(energy(speech[ref_channel]) / (e_noise * 10 ** (snr_db / 10)))
        scaled_noise = noise * noise_gain
    targets = np.stack([_convolve(s, direct.filters[p, ref_channel:ref_channel + 1])[0] * gains[p]
                        for p, s in enumerate(sources)])
    fs = rir.sample_rate
    return {
        "mixture": Waveform(speech + scaled_noise, fs),
        "targets": Waveform(targets, fs),
        "images": images,
        "noise": scaled_noise,
        "gains": gains,
        "noise_gain": noise_gain,
    }


def synth_speech(duration: float, sample_rate: int, rng=None) -> np.ndarray:
    """Speech-like test signal: voiced syllables with formants, separated by pauses.

    Not speech, but non-stationary and sparse in time-frequency, which is what
    the separation and dereverberation tests need from a source.
    """
    rng = np.random.default_rng(rng)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    t = 0
    while t < n:
        t += int(rng.uniform(0.03, 0.2) * sample_rate)  # pause
        seg = int(rng.uniform(0.1, 0.35) * sample_rate)
        if t >= n:
            break
        seg = min(seg, n - t)
        f0 = rng.uniform(90, 240)
        drift = rng.uniform(-0.3, 0.3)
        tt = np.arange(seg) / sample_rate
        phase = 2 * np.pi * np.cumsum(f0 * (1 + drift * tt / max(tt[-1], 1e-3))) / sample_rate
        voiced = sum(np.cos(k * phase + rng.uniform(0, 2 * np.pi)) / k
                     for k in range(1, int(sample_rate / 2 / f0)))
        excitation = voiced + 0.3 * rng.standard_normal(seg)
        y = excitation
        for _ in range(3):
            fc = rng.uniform(300, min(3400, 0.45 * sample_rate))
            bw = rng.uniform(60, 200)
            r = math.exp(-math.pi * bw / sample_rate)
            a = [1, -2 * r * math.cos(2 * math.pi * fc / sample_rate), r * r]
            y = y + 0.5 * signal.lfilter([1 - r], a, excitation)
        out[t:t + seg] += y * np.hanning(seg) * rng.uniform(0.5, 1.0)
        t += seg
    out /= np.sqrt(np.mean(out ** 2)) + 1e-12
    return out


@dataclass
class SceneDistribution:
    """Sampling ranges for corpus scenes (defaults follow an SMS-WSJ-Plus style recipe)."""

    sample_rate: int = 8000
    duration: float = 4.0
    num_speakers: int = 2
    num_mics: int = 6
    array_radius: float = 0.1
    room_x: tuple[float, float] = (6.0, 9.0)
    room_y: tuple[float, float] = (6.0, 9.0)
    room_z: tuple[float, float] = (2.6, 3.2)
    t60: tuple[float, float] = (0.2, 1.0)
    distance: tuple[float, float] = (1.0, 4.0)
    sir_db: tuple[float, float] = (-5.0, 5.0)
    snr_db: tuple[float, float] = (0.0, 20.0)
    noise_kinds: tuple[str, ...] = ("white", "speech")

    @classmethod
    def from_dict(cls, d: dict) -> SceneDistribution:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene distribution keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def circular_array(center, radius: float, count: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(count) / count
    c = np.asarray(center, dtype=float)
    return c + radius * np.stack([np.cos(ang), np.sin(ang), np.zeros(count)], axis=1)


def sample_scene(dist: SceneDistribution, rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    t60 = rng.uniform(*dist.t60)
    for _ in range(1000):
        room = (rng.uniform(*dist.room_x), rng.uniform(*dist.room_y), rng.uniform(*dist.room_z))
        if sabine_absorption(room, t60) > 1.0:
            continue
        centre = np.array([room[0] / 2 + rng.uniform(-0.5, 0.5),
                           room[1] / 2 + rng.uniform(-0.5, 0.5),
                           rng.uniform(1.2, min(1.8, room[2] - 0.3))])
        mics = circular_array(centre, dist.array_radius, dist.num_mics)
        sources = []
        for _ in range(dist.num_speakers):
            for _ in range(100):
                d = rng.uniform(*dist.distance)
                az = rng.uniform(0, 2 * np.pi)
                pos = centre + np.array([d * np.cos(az), d * np.sin(az), rng.uniform(-0.3, 0.3)])
                if np.all(pos > 0.3) and np.all(pos < np.asarray(room) - 0.3):
                    sources.append(pos)
                    break
        if len(sources) == dist.num_speakers:
            break
    else:
        raise SceneError("could not place sources for the configured distribution")
    sirs = [float(rng.uniform(*dist.sir_db)) for _ in range(dist.num_speakers - 1)]
    return SceneSpec(room=room, t60=float(t60), mics=mics, sources=np.array(sources),
                     sir_db=sirs, snr_db=float(rng.uniform(*dist.snr_db)),
                     noise_kind=str(rng.choice(dist.noise_kinds)),
                     sample_rate=dist.sample_rate, seed=seed)


def sample_scene_specs(dist: SceneDistribution, count: int, seed: int) -> list[SceneSpec]:
    children = np.random.SeedSequence(seed).spawn(count)
    specs = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        specs.append(sample_scene(dist, rng, seed=int(child.generate_state(1)[0])))
    return specs


def render_scene(spec: SceneSpec, sources: Sequence[np.ndarray]) -> dict:
    """Simulate RIRs and noise for ``spec`` and mix ``sources`` into it."""
    rir = simulate_rir(spec)
    n = min(len(s) for s in sources)
    noise = gen_diffuse_noise(spec.mics, spec.noise_kind, n, spec.sample_rate,
                              seed=spec.seed).samples
    return mix_scene(sources, rir, noise, spec.sir_db, spec.snr_db, spec.ref_channel)


def _load_pool(pool, sample_rate: int) -> list[np.ndarray]:
    out = []
    for item in pool:
        if isinstance(item, (str, Path)):
            w = read_wav(item)
            if w.sample_rate != sample_rate:
                raise SceneError(f"{item}: sample rate {w.sample_rate} != {sample_rate}")
            out.append(w.samples[0])
        else:
            out.append(np.asarray(item, dtype=float).ravel())
    return out


def make_corpus(out_dir, dist: SceneDistribution, count: int, seed: int,
                pool=None) -> list[dict]:
    """Render ``count`` scenes to WAV files and write ``manifest.jsonl``.

    ``pool`` is a list of clean WAV paths or arrays; ``None`` uses generated
    speech-like signals. Returns the manifest records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pool is not None:
        clean = _load_pool(pool, dist.sample_rate)
        if not clean:
            raise SceneError("clean-speech pool is empty")
    specs = sample_scene_specs(dist, count, seed)
    n = int(round(dist.duration * dist.sample_rate))
    records = []
    for i, spec in enumerate(specs):
        rng = np.random.default_rng(spec.seed)
        if pool is None:
            srcs = [synth_speech(dist.duration, dist.sample_rate, rng) for _ in range(spec.num_speakers)]
        else:
            picks = rng.choice(len(clean), size=spec.num_speakers, replace=len(clean) < spec.num_speakers)
            srcs = []
            for k in picks:
                s = clean[k]
                if len(s) >= n:
                    start = int(rng.integers(0, len(s) - n + 1))
                    s = s[start:start + n]
                else:
                    s = np.pad(s, (0, n - len(s)))
                srcs.append(s)
        scene = render_scene(spec, srcs)
        mix_path, tgt_path = out_dir / f"mix_{i:05d}.wav", out_dir / f"tgt_{i:05d}.wav"
        write_wav(mix_path, scene["mixture"])
        write_wav(tgt_path, scene["targets"])
        rec = {"id": i, "mixture": mix_path.name, "targets": tgt_path.name, "duration": dist.duration,
               "generated_sources": pool is None, **spec.to_json()}
        records.append(rec)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def rerender_record(rec: dict) -> dict:
    """Re-render a corpus scene built from generated sources (all components, not just the WAVs)."""
    if not rec.get("generated_sources"):
        raise SceneError("scene used a clean-speech pool; its sources cannot be regenerated")
    spec = SceneSpec.from_json(rec)
    rng = np.random.default_rng(spec.seed)
    srcs = [synth_speech(rec["duration"], spec.sample_rate, rng) for _ in range(spec.num_speakers)]
    return render_scene(spec, srcs)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    for rec in records:
        for key in ("mixture", "targets"):
            rec[key] = str(path.parent / rec[key])
    return records
