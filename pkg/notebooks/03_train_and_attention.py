# %% [markdown]
# # Training a tiny model and looking at its attention
# A few hundred steps on a handful of 1 s scenes, then separation, a metric
# report and the narrow-band attention maps (averaged over frequencies and
# over queries).

# %%
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from spatialnet import evaluation, scene
from spatialnet.model import ModelConfig, SpatialNet
from spatialnet.objective import Example, TrainConfig, train
from spatialnet.pipeline import valid_length, separate
from spatialnet.stft import Waveform

fs = 8000
dist = scene.SceneDistribution(duration=1.0, t60=(0.2, 0.4), snr_db=(15, 25), distance=(1.0, 2.0))
examples = []
for i, spec in enumerate(scene.sample_scene_specs(dist, 4, seed=3)):
    rng = np.random.default_rng(spec.seed)
    out = scene.render_scene(spec, [scene.synth_speech(1.0, fs, rng) for _ in range(2)])
    n = valid_length(fs, 256)
    examples.append(Example(out["mixture"].samples[:, :n], out["targets"].samples[:, :n], fs, str(i)))

# %%
cfg = ModelConfig(num_blocks=2, hidden=24, ffn_hidden=48, squeeze=4, num_freqs=129)
model = SpatialNet(cfg, seed=0)
result = train(model, examples, TrainConfig(batch=2, duration=1.0, lr=4e-3, decay=1.0, epochs=100, max_steps=200))
loss = np.array([r["loss"] for r in result.curve])
plt.plot(np.convolve(loss, np.ones(20) / 20, mode="valid"))
plt.xlabel("step"); plt.ylabel("negative SI-SDR (20-step mean)")
plt.savefig("loss.png", dpi=80); plt.close()

# %%
ests = [separate(model, Waveform(e.mixture, fs)).samples for e in examples]
rows = evaluation.report(ests, [e.targets for e in examples], [e.mixture[0] for e in examples])
for r in rows:
    print(r["id"], round(r["si_sdr"], 2), round(r["si_sdr_imp"], 2), r["perm"])

# %%
maps = evaluation.attention_maps(model, Waveform(examples[0].mixture, fs), layer=1, head=0)
fig, ax = plt.subplots(1, 2, figsize=(8, 3))
ax[0].imshow(maps["QK"], origin="lower"); ax[0].set_title("query x key")
ax[1].imshow(maps["FK"], origin="lower", aspect="auto"); ax[1].set_title("frequency x key")
fig.savefig("attention.png", dpi=80)
print("row sums:", maps["QK"].sum(1).min(), maps["QK"].sum(1).max())
