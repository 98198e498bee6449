import math

import numpy as np
import pytest
from scipy import signal, stats

from spatialnet.scene import (SOUND_SPEED, RoomImpulseResponse, SceneDistribution, SceneError, SceneSpec,
                              circular_array, diffuse_coherence, energy, extract_direct_path,
                              fractional_delay_taps, gen_diffuse_noise, image_method, make_corpus,
                              mix_scene, read_manifest, sample_scene_specs, schroeder_edc, simulate_rir,
                              synth_speech)
from spatialnet.stft import read_wav


def welch_coherence(x, y, fs, nperseg=512):
    """Complex coherence from Welch cross/auto spectra (independent of the generator)."""
    f, sxy = signal.csd(x, y, fs=fs, nperseg=nperseg)
    _, sxx = signal.welch(x, fs=fs, nperseg=nperseg)
    _, syy = signal.welch(y, fs=fs, nperseg=nperseg)
    return f, sxy / np.sqrt(sxx * syy)


# --- image method ---------------------------------------------------------------

def test_anechoic_single_fractional_impulse():
    fs = 16000
    src, mic = np.array([2.0, 2.0, 1.5]), np.array([[3.3, 2.4, 1.5]])
    h = image_method((5, 4, 3), src, mic, 0.0, fs, 2000)[0]
    d = np.linalg.norm(mic[0] - src)
    delay = d / SOUND_SPEED * fs
    idx, w = fractional_delay_taps(np.array([delay]))
    expected = np.zeros(2000)
    expected[idx[0]] = w[0] / (4 * np.pi * d)
    np.testing.assert_allclose(h, expected, atol=1e-15)
    assert abs(np.argmax(np.abs(h)) - delay) <= 0.5


def test_inverse_distance_law():
    fs = 16000
    src = np.array([1.0, 2.0, 1.5])
    mics = np.array([[2.0, 2.0, 1.5], [3.0, 2.0, 1.5]])
    h = image_method((6, 4, 3), src, mics, 0.0, fs, 1000)
    ratio = np.sqrt(energy(h[1]) / energy(h[0]))
    assert ratio == pytest.approx(0.5, rel=0.01)


@pytest.mark.parametrize("room,t60", [((5.0, 4.0, 3.0), 0.3), ((7.0, 6.0, 3.0), 0.6)])
def test_schroeder_decay_matches_t60(room, t60):
    spec = SceneSpec(room=room, t60=t60, mics=[[room[0] / 2, room[1] / 2, 1.4]],
                     sources=[[1.2, 1.3, 1.6]], sample_rate=8000)
    h = simulate_rir(spec, length=int(1.5 * t60 * 8000)).filters[0, 0]
    edc = schroeder_edc(h)
    crossing = np.nonzero(edc <= -60)[0][0] / 8000
    assert abs(crossing - t60) <= 0.2 * t60


def test_infeasible_t60_rejected():
    spec = SceneSpec(room=(9, 9, 3), t60=0.05, mics=[[4, 4, 1.5]], sources=[[2, 2, 1.5]])
    with pytest.raises(SceneError):
        simulate_rir(spec)


def test_rir_covers_t60_and_direct_arrival():
    spec = SceneSpec(room=(5, 4, 3), t60=0.25, mics=[[2.5, 2, 1.5], [2.6, 2, 1.5]],
                     sources=[[1, 1, 1.5]], sample_rate=8000)
    rir = simulate_rir(spec)
    assert rir.filters.shape[-1] >= 0.25 * 8000
    d = np.linalg.norm(spec.mics - spec.sources[0], axis=1)
    direct = extract_direct_path(rir)
    np.testing.assert_allclose(direct.delays[0], d / SOUND_SPEED * 8000, atol=1.0)


def test_scene_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec(room=(3, 3, 3), t60=0.3, mics=[[4, 1, 1]], sources=[[1, 1, 1]])
    with pytest.raises(SceneError):
        SceneSpec(room=(3, 3, 3), t60=0.0, mics=[[1, 1, 1]], sources=[[2, 2, 2]])


# --- direct path ----------------------------------------------------------------

def test_direct_path_examples():
    fs = 16000
    h = np.zeros((1, 1, 1000))
    h[0, 0, 100], h[0, 0, 400] = 1.0, 0.5
    d = extract_direct_path(RoomImpulseResponse(h, fs))
    expected = np.zeros(1000)
    expected[100] = 1.0
    np.testing.assert_array_equal(d.filters[0, 0], expected)
    assert d.delays[0, 0] == pytest.approx(100)

    free = image_method((5, 4, 3), [1, 1, 1.5], [[3, 2, 1.5]], 0.0, fs, 800)
    d2 = extract_direct_path(RoomImpulseResponse(free[None], fs))
    # the 81-tap interpolator spans +-2.5 ms at 16 kHz, so nothing is removed
    np.testing.assert_array_equal(d2.filters[0], free)

    rng = np.random.default_rng(0)
    rand = rng.standard_normal((2, 3, 500))
    d3 = extract_direct_path(RoomImpulseResponse(rand, 8000))
    assert np.all(np.sum(d3.filters ** 2, -1) <= np.sum(rand ** 2, -1))


def test_direct_path_tdoa_consistency():
    fs = 16000
    mics = circular_array([2.5, 2.0, 1.5], 0.1, 4)
    src = np.array([1.0, 3.0, 1.6])
    spec = SceneSpec(room=(5, 4, 3), t60=0.3, mics=mics, sources=[src], sample_rate=fs)
    rir = simulate_rir(spec)
    d = extract_direct_path(rir)
    s = np.random.default_rng(1).standard_normal(fs)
    y = np.stack([np.convolve(s, d.filters[0, m])[:fs] for m in range(4)])
    geo = np.linalg.norm(mics - src, axis=1) / SOUND_SPEED * fs
    for m in range(1, 4):
        xc = signal.correlate(y[m], y[0], mode="full")
        lag = np.argmax(xc) - (fs - 1)
        assert abs(lag - (geo[m] - geo[0])) <= 1.0


# --- diffuse noise ----------------------------------------------------------------

def test_coherence_law_for_pairs():
    fs = 16000
    mics = np.array([[0, 0, 0], [0.05, 0, 0], [0, 0.1, 0]], dtype=float) + 2
    x = gen_diffuse_noise(mics, "white", 30 * fs, fs, seed=0).samples
    for a, b in [(0, 1), (0, 2), (1, 2)]:
        dist = np.linalg.norm(mics[a] - mics[b])
        f, coh = welch_coherence(x[a], x[b], fs)
        target = diffuse_coherence(f, dist)
        assert np.mean(np.abs(np.abs(coh) ** 2 - target ** 2)) < 0.05
        assert np.mean(np.abs(coh.real - target)) < 0.05


def test_first_coherence_null():
    f = np.linspace(1, 8000, 80001)
    r = diffuse_coherence(f, 0.05)
    null = f[np.argmax(r < 0)]
    assert null == pytest.approx(SOUND_SPEED / (2 * 0.05), abs=1.0)


def test_single_mic_noise_and_determinism():
    a = gen_diffuse_noise([[1, 1, 1]], "speech", 4000, 8000, seed=5).samples
    b = gen_diffuse_noise([[1, 1, 1]], "speech", 4000, 8000, seed=5).samples
    assert a.shape == (1, 4000) and np.array_equal(a, b)
    assert np.sqrt(np.mean(a ** 2)) == pytest.approx(1.0, rel=1e-6)


# --- mixing -------------------------------------------------------------------------

def _free_rir(fs=8000, p=2):
    mics = circular_array([3, 3, 1.5], 0.1, 3)
    srcs = [[1.5, 2.0, 1.5], [4.2, 4.4, 1.5]][:p]
    return RoomImpulseResponse(np.stack([image_method((6, 6, 3), s, mics, 0.0, fs, 512) for s in srcs]), fs)


def test_mixture_snr_and_sir_definitions():
    rng = np.random.default_rng(2)
    rir = _free_rir()
    srcs = [rng.standard_normal(8000), rng.standard_normal(8000)]
    noise = rng.standard_normal((3, 8000))
    out = mix_scene(srcs, rir, noise, sir_db=-5.0, snr_db=0.0)
    speech = out["images"].sum(0)
    assert energy(out["noise"][0]) == pytest.approx(energy(speech[0]), rel=1e-6)
    e1, e2 = energy(out["images"][0, 0]), energy(out["images"][1, 0])
    assert 10 * math.log10(e1 / e2) == pytest.approx(-5.0, abs=1e-9)
    np.testing.assert_allclose(out["mixture"].samples, speech + out["noise"], atol=1e-12)


def test_equal_sources_get_plus_5db_interferer_gain():
    rng = np.random.default_rng(3)
    mics = [[3, 3, 1.5]]
    h1 = image_method((6, 6, 3), [2, 3, 1.5], mics, 0.0, 8000, 256)
    rir = RoomImpulseResponse(np.stack([h1, h1]), 8000)
    s = rng.standard_normal(4000)
    out = mix_scene([s, s.copy()], rir, None, sir_db=-5.0)
    assert 20 * math.log10(out["gains"][1]) == pytest.approx(5.0, abs=1e-9)


def test_single_anechoic_source_mixture_equals_target():
    # at 16 kHz the direct-path window covers the whole interpolation kernel
    rng = np.random.default_rng(4)
    out = mix_scene([rng.standard_normal(8000)], _free_rir(fs=16000, p=1), None)
    np.testing.assert_allclose(out["mixture"].samples[0], out["targets"].samples[0], atol=1e-12)


def test_silent_source_rejected():
    with pytest.raises(SceneError):
        mix_scene([np.ones(1000), np.zeros(1000)], _free_rir(), None)


def test_overlapped_scene_unprocessed_si_sdr_negative():
    from spatialnet.objective import si_sdr
    rng = np.random.default_rng(5)
    out = mix_scene([synth_speech(1.0, 8000, rng), synth_speech(1.0, 8000, rng)], _free_rir(), None, sir_db=0.0)
    assert np.all(si_sdr(out["mixture"].samples[0][None], out["targets"].samples) < 0.5)


# --- corpus -----------------------------------------------------------------------------

def test_corpus_count_zero_and_determinism(tmp_path):
    dist = SceneDistribution(duration=0.5, t60=(0.2, 0.3))
    assert make_corpus(tmp_path / "empty", dist, 0, seed=1) == []
    assert (tmp_path / "empty" / "manifest.jsonl").read_text() == ""
    a = make_corpus(tmp_path / "a", dist, 2, seed=9)
    b = make_corpus(tmp_path / "b", dist, 2, seed=9)
    assert [r["t60"] for r in a] == [r["t60"] for r in b]
    for ra, rb in zip(read_manifest(tmp_path / "a" / "manifest.jsonl"), read_manifest(tmp_path / "b" / "manifest.jsonl")):
        for key in ("mixture", "targets"):
            assert np.array_equal(read_wav(ra[key]).samples, read_wav(rb[key]).samples)


def test_corpus_empty_pool_rejected(tmp_path):
    with pytest.raises(SceneError):
        make_corpus(tmp_path, SceneDistribution(duration=0.5), 1, seed=0, pool=[])


def test_t60_draws_uniform():
    dist = SceneDistribution()
    specs = sample_scene_specs(dist, 1000, seed=4)
    t60s = np.array([s.t60 for s in specs])
    lo, hi = dist.t60
    assert stats.kstest(t60s, "uniform", args=(lo, hi - lo)).pvalue > 0.01
    assert all(s.noise_kind in dist.noise_kinds for s in specs)
    sirs = np.array([s.sir_db[0] for s in specs])
    assert sirs.min() >= -5 and sirs.max() <= 5
