# %% [markdown]
# # Synthetic scenes and classical baselines
# Render one reverberant two-speaker scene, check the diffuse-noise coherence,
# then run oracle MVDR and WPE on it.

# %%
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import signal

from spatialnet import baselines, scene
from spatialnet.objective import si_sdr
from spatialnet.stft import Waveform, istft, stft

fs = 8000
dist = scene.SceneDistribution(duration=3.0, t60=(0.4, 0.6))
spec = scene.sample_scene_specs(dist, 1, seed=7)[0]
rng = np.random.default_rng(spec.seed)
sources = [scene.synth_speech(3.0, fs, rng) for _ in range(2)]
out = scene.render_scene(spec, sources)
mix, targets = out["mixture"], out["targets"]
print(f"T60 {spec.t60:.2f} s, room {spec.room}, unprocessed SI-SDR:",
      np.round(si_sdr(mix.samples[0][None], targets.samples), 2))

# %% [markdown]
# ## Diffuse-noise coherence against the sinc law

# %%
mics = scene.circular_array([2, 2, 1.5], 0.05, 2)
noise = scene.gen_diffuse_noise(mics, "white", 20 * fs, fs, seed=0).samples
f, sxy = signal.csd(noise[0], noise[1], fs=fs, nperseg=512)
_, sxx = signal.welch(noise[0], fs=fs, nperseg=512)
_, syy = signal.welch(noise[1], fs=fs, nperseg=512)
d = np.linalg.norm(mics[0] - mics[1])
plt.plot(f, np.real(sxy / np.sqrt(sxx * syy)), label="measured")
plt.plot(f, scene.diffuse_coherence(f, d), "--", label="sinc law")
plt.xlabel("Hz"); plt.legend(); plt.savefig("coherence.png", dpi=80); plt.close()

# %% [markdown]
# ## Oracle MVDR toward speaker 1

# %%
rir = scene.simulate_rir(spec)
window = 256
steer = baselines.oracle_rtf(scene.extract_direct_path(rir), window)[0]
mix_spec = stft(mix, window)
# everything but speaker 1's direct path, its own reverberation included
cov = baselines.undesired_covariance(mix_spec, stft(Waveform(targets.samples[:1], fs), window), steer)
bf = istft(baselines.mvdr(mix_spec, steer, cov)).samples[0]
print("MVDR SI-SDR toward speaker 1:", round(float(si_sdr(bf, targets.samples[0])), 2), "dB")

# %% [markdown]
# ## WPE dereverberation

# %%
derev = istft(baselines.wpe(stft(mix, window))).samples[0]
print("WPE output vs mixture channel 0 SI-SDR toward speaker 1:",
      round(float(si_sdr(derev, targets.samples[0])), 2), "dB")
