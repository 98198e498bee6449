"""SpatialNet: interleaved cross-band and narrow-band blocks on STFT coefficients.

Hidden activations are ``[B, F, T, C]``. The narrow-band block folds frequency
into the batch axis and works along time; the cross-band block folds time
into the batch axis and works along frequency. All convolutions are
non-causal ('same' padding).
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterStore, config_hash
from .stft import num_frames


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_blocks: int = 8
    hidden: int = 96
    ffn_hidden: int = 192
    squeeze: int = 8
    heads: int = 4
    groups: int = 8
    input_kernel: int = 5
    tconv_kernel: int = 5
    fconv_kernel: int = 3
    tconv_layers: int = 2
    num_freqs: int = 129
    num_mics: int = 6
    num_speakers: int = 2
    dropout: float = 0.0
    eps: float = 1e-5
    # ablation switches (Table-I style variants)
    use_mhsa: bool = True
    ffn: str = "tconv"  # "tconv" | "plain"
    use_freq_conv: bool = True
    use_full_band: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self
        if c.hidden % c.heads:
            raise ConfigError(f"hidden={c.hidden} not divisible by heads={c.heads}")
        if c.hidden % c.groups:
            raise ConfigError(f"hidden={c.hidden} not divisible by groups={c.groups}")
        if c.ffn_hidden % c.groups:
            raise ConfigError(f"ffn_hidden={c.ffn_hidden} not divisible by groups={c.groups}")
        for name in ("input_kernel", "tconv_kernel", "fconv_kernel"):
            k = getattr(c, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        if c.tconv_layers < 2:
            raise ConfigError("tconv_layers must be >= 2 (GN follows the second conv)")
        if c.ffn not in ("tconv", "plain"):
            raise ConfigError(f"ffn must be 'tconv' or 'plain', got {c.ffn!r}")
        if not 0.0 <= c.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {c.dropout}")
        for name in ("num_blocks", "squeeze", "num_freqs", "num_mics", "num_speakers"):
            if getattr(c, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def small(cls, num_freqs: int = 129, num_mics: int = 6, num_speakers: int = 2, **kw) -> ModelConfig:
        base = dict(num_blocks=8, hidden=96, ffn_hidden=192, squeeze=8)
        return cls(**{**base, **kw}, num_freqs=num_freqs, num_mics=num_mics, num_speakers=num_speakers)

    @classmethod
    def large(cls, num_freqs: int = 129, num_mics: int = 6, num_speakers: int = 2, **kw) -> ModelConfig:
        base = dict(num_blocks=12, hidden=192, ffn_hidden=384, squeeze=16)
        return cls(**{**base, **kw}, num_freqs=num_freqs, num_mics=num_mics, num_speakers=num_speakers)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def variant(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SpatialNet:
    """Parameter store plus forward pass for one :class:`ModelConfig`.

    Parameters are created in a fixed order from ``seed``, so two builds with
    the same config and seed are identical. The full-band F-Linear bank
    (``full_band.weight``/``full_band.bias``) is one set of tensors used by
    every cross-band block.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        p = self.params

        def lin(name, din, dout):
            p.add(f"{name}.weight", _uniform(rng, (din, dout), din), dtype=dtype)
            p.add(f"{name}.bias", _uniform(rng, (dout,), din), dtype=dtype)

        def conv(name, cin, cout, k, groups):
            fan = cin // groups * k
            p.add(f"{name}.weight", _uniform(rng, (cout, cin // groups, k), fan), dtype=dtype)
            p.add(f"{name}.bias", _uniform(rng, (cout,), fan), dtype=dtype)

        def norm(name, ch):
            p.add(f"{name}.gain", np.ones(ch), dtype=dtype)
            p.add(f"{name}.bias", np.zeros(ch), dtype=dtype)

        conv("input", 2 * c.num_mics, c.hidden, c.input_kernel, 1)
        if c.use_full_band:
            p.add("full_band.weight", _uniform(rng, (c.squeeze, c.num_freqs, c.num_freqs), c.num_freqs),
                  dtype=dtype)
            p.add("full_band.bias", _uniform(rng, (c.squeeze, c.num_freqs), c.num_freqs), dtype=dtype)
        for i in range(c.num_blocks):
            cb = f"blocks.{i}.cross"
            for j in (1, 2):
                if c.use_freq_conv:
                    norm(f"{cb}.fconv{j}.norm", c.hidden)
                    conv(f"{cb}.fconv{j}.conv", c.hidden, c.hidden, c.fconv_kernel, c.groups)
                    p.add(f"{cb}.fconv{j}.prelu", np.full(c.hidden, 0.25), dtype=dtype)
                if j == 1 and c.use_full_band:
                    lin(f"{cb}.full.squeeze", c.hidden, c.squeeze)
                    lin(f"{cb}.full.unsqueeze", c.squeeze, c.hidden)
            nb = f"blocks.{i}.narrow"
            if c.use_mhsa:
                norm(f"{nb}.mhsa.norm", c.hidden)
                for proj in ("q", "k", "v", "o"):
                    lin(f"{nb}.mhsa.{proj}", c.hidden, c.hidden)
            norm(f"{nb}.ffn.norm", c.hidden)
            lin(f"{nb}.ffn.linear1", c.hidden, c.ffn_hidden)
            if c.ffn == "tconv":
                for j in range(1, c.tconv_layers + 1):
                    conv(f"{nb}.ffn.conv{j}", c.ffn_hidden, c.ffn_hidden, c.tconv_kernel, c.groups)
                    if j == 2:
                        norm(f"{nb}.ffn.gn", c.ffn_hidden)
            lin(f"{nb}.ffn.linear2", c.ffn_hidden, c.hidden)
        lin("output", c.hidden, 2 * c.num_speakers)

    # -- accounting -----------------------------------------------------------
    def num_params(self) -> int:
        return self.params.num_scalars()

    def describe(self) -> list[tuple[str, tuple[int, ...], int]]:
        """``(name, shape, count)`` for every parameter tensor, in build order."""
        return [(n, t.shape, t.size) for n, t in self.params.items()]

    def params_by_component(self) -> dict[str, int]:
        out: dict[str, int] = OrderedDict()
        for name, _, count in self.describe():
            comp = component_of(name)
            out[comp] = out.get(comp, 0) + count
        return out

    # -- forward --------------------------------------------------------------
    def _p(self, name: str) -> T.Tensor:
        return self.params[name]

    def input_layer(self, x: T.Tensor) -> T.Tensor:
        b, f, t, ch = x.shape
        h = T.conv1d(T.reshape(x, (b * f, t, ch)), self._p("input.weight"), self._p("input.bias"))
        return T.reshape(h, (b, f, t, self.config.hidden))

    def _freq_conv(self, h: T.Tensor, prefix: str) -> T.Tensor:
        c = self.config
        y = T.layer_norm(h, self._p(f"{prefix}.norm.gain"), self._p(f"{prefix}.norm.bias"), c.eps)
        y = T.conv1d(y, self._p(f"{prefix}.conv.weight"), self._p(f"{prefix}.conv.bias"), groups=c.groups)
        return h + T.prelu(y, self._p(f"{prefix}.prelu"))

    def _full_band(self, h: T.Tensor, prefix: str) -> T.Tensor:
        # h: [N, F, C]
        z = T.silu(T.linear(h, self._p(f"{prefix}.squeeze.weight"), self._p(f"{prefix}.squeeze.bias")))
        zt = T.transpose(z, (2, 0, 1))  # [C'', N, F]
        w = T.transpose(self._p("full_band.weight"), (0, 2, 1))  # per channel F_in x F_out
        bias = T.reshape(self._p("full_band.bias"), (self.config.squeeze, 1, self.config.num_freqs))
        zt = T.matmul(zt, w) + bias
        z = T.transpose(zt, (1, 2, 0))  # [N, F, C'']
        up = T.linear(z, self._p(f"{prefix}.unsqueeze.weight"), self._p(f"{prefix}.unsqueeze.bias"))
        return h + T.silu(up)

    def cross_band_block(self, h: T.Tensor, i: int) -> T.Tensor:
        c = self.config
        b, f, t, ch = h.shape
        x = T.reshape(T.transpose(h, (0, 2, 1, 3)), (b * t, f, ch))
        prefix = f"blocks.{i}.cross"
        if c.use_freq_conv:
            x = self._freq_conv(x, f"{prefix}.fconv1")
        if c.use_full_band:
            x = self._full_band(x, f"{prefix}.full")
        if c.use_freq_conv:
            x = self._freq_conv(x, f"{prefix}.fconv2")
        return T.transpose(T.reshape(x, (b, t, f, ch)), (0, 2, 1, 3))

    def narrow_band_block(self, h: T.Tensor, i: int, training: bool = False, rng=None,
                          record: list | None = None) -> T.Tensor:
        c = self.config
        b, f, t, ch = h.shape
        x = T.reshape(h, (b * f, t, ch))
        nb = f"blocks.{i}.narrow"
        if c.use_mhsa:
            y = T.layer_norm(x, self._p(f"{nb}.mhsa.norm.gain"), self._p(f"{nb}.mhsa.norm.bias"), c.eps)
            y = T.mhsa(y, c.heads,
                       *(self._p(f"{nb}.mhsa.{k}.weight") for k in "qkvo"),
                       *(self._p(f"{nb}.mhsa.{k}.bias") for k in "qkvo"),
                       record=record)
            x = x + T.dropout(y, c.dropout, training, rng)
        y = T.layer_norm(x, self._p(f"{nb}.ffn.norm.gain"), self._p(f"{nb}.ffn.norm.bias"), c.eps)
        y = T.silu(T.linear(y, self._p(f"{nb}.ffn.linear1.weight"), self._p(f"{nb}.ffn.linear1.bias")))
        if c.ffn == "tconv":
            for j in range(1, c.tconv_layers + 1):
                y = T.conv1d(y, self._p(f"{nb}.ffn.conv{j}.weight"), self._p(f"{nb}.ffn.conv{j}.bias"),
                             groups=c.groups)
                if j == 2:
                    y = T.group_norm(y, c.groups, self._p(f"{nb}.ffn.gn.gain"),
                                     self._p(f"{nb}.ffn.gn.bias"), c.eps)
                y = T.silu(y)
        y = T.linear(y, self._p(f"{nb}.ffn.linear2.weight"), self._p(f"{nb}.ffn.linear2.bias"))
        x = x + T.dropout(y, c.dropout, training, rng)
        return T.reshape(x, (b, f, t, ch))

    def forward(self, x, training: bool = False, rng=None,
                record_attention: dict | None = None) -> T.Tensor:
        """``x``: ``[F, T, 2M]`` or ``[B, F, T, 2M]`` -> ``[..., F, T, 2P]``.

        If ``record_attention`` is a dict, attention probabilities of block i
        are stored under key i as ``[B, F, H, T, T]``.
        """
        c = self.config
        x = T.as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        if x.ndim != 4:
            raise T.ShapeError(f"expected [B, F, T, 2M] input, got {x.shape}")
        if x.shape[1] != c.num_freqs:
            raise T.ShapeError(f"input has {x.shape[1]} frequencies, model expects {c.num_freqs}")
        if x.shape[3] != 2 * c.num_mics:
            raise T.ShapeError(f"input has {x.shape[3]} channels, model expects {2 * c.num_mics}")
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        if training and c.dropout > 0:
            rng = np.random.default_rng(rng)
        b, f, t, _ = x.shape
        h = self.input_layer(x)
        for i in range(c.num_blocks):
            h = self.cross_band_block(h, i)
            rec = [] if record_attention is not None else None
            h = self.narrow_band_block(h, i, training, rng, rec)
            if rec:
                record_attention[i] = rec[0].reshape(b, f, c.heads, t, t)
        y = T.linear(h, self._p("output.weight"), self._p("output.bias"))
        return T.reshape(y, y.shape[1:]) if squeeze else y

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state, strict: bool = True) -> None:
        self.params.load_state_dict(state, strict)


def component_of(name: str) -> str:
    if name.startswith("input"):
        return "input"
    if name.startswith("output"):
        return "output"
    if name.startswith("full_band") or ".full." in name:
        return "full_band"
    if ".fconv" in name:
        return "freq_conv"
    if ".mhsa." in name:
        return "mhsa"
    if ".ffn." in name:
        return "ffn"
    raise KeyError(name)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SpatialNet:
    return SpatialNet(config, seed, dtype)


def count_params(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter count per component (plus ``total``)."""
    c = config
    n = OrderedDict()
    n["input"] = 2 * c.num_mics * c.hidden * c.input_kernel + c.hidden
    per_fconv = 2 * c.hidden + c.hidden * (c.hidden // c.groups) * c.fconv_kernel + c.hidden + c.hidden
    n["freq_conv"] = c.num_blocks * 2 * per_fconv if c.use_freq_conv else 0
    if c.use_full_band:
        n["full_band"] = (c.squeeze * c.num_freqs * (c.num_freqs + 1)
                          + c.num_blocks * (c.hidden * c.squeeze + c.squeeze + c.squeeze * c.hidden + c.hidden))
    else:
        n["full_band"] = 0
    n["mhsa"] = c.num_blocks * (2 * c.hidden + 4 * (c.hidden * c.hidden + c.hidden)) if c.use_mhsa else 0
    ffn = 2 * c.hidden + (c.hidden * c.ffn_hidden + c.ffn_hidden) + (c.ffn_hidden * c.hidden + c.hidden)
    if c.ffn == "tconv":
        conv = c.ffn_hidden * (c.ffn_hidden // c.groups) * c.tconv_kernel + c.ffn_hidden
        ffn += c.tconv_layers * conv + 2 * c.ffn_hidden
    n["ffn"] = c.num_blocks * ffn
    n["output"] = c.hidden * 2 * c.num_speakers + 2 * c.num_speakers
    n["total"] = sum(n.values())
    return dict(n)


def sample_rate_for(num_freqs: int) -> int:
    """Sample rate whose 32 ms window yields ``num_freqs`` one-sided bins."""
    return int(round(2 * (num_freqs - 1) / 0.032))


def count_flops(config: ModelConfig, duration_s: float = 4.0, sample_rate: int | None = None) -> dict[str, float]:
    """Analytic multiply-accumulate count in G/s for one utterance of ``duration_s``.

    Counts matrix products and convolutions (including attention score and
    context products and the F-Linear bank); normalizations, activations and
    residual additions are not counted. The total over the utterance is
    divided by its duration.
    """
    c = config
    sample_rate = sample_rate or sample_rate_for(c.num_freqs)
    window = 2 * (c.num_freqs - 1)
    n_frames = num_frames(int(round(duration_s * sample_rate)), window)
    if n_frames == 0 or duration_s <= 0:
        return {k: 0.0 for k in ("input", "freq_conv", "full_band", "mhsa", "ffn", "output", "total")}
    per_bin = OrderedDict()
    per_bin["input"] = 2 * c.num_mics * c.hidden * c.input_kernel
    per_bin["freq_conv"] = c.num_blocks * 2 * c.hidden * (c.hidden // c.groups) * c.fconv_kernel if c.use_freq_conv else 0
    per_bin["full_band"] = (c.num_blocks * (2 * c.hidden * c.squeeze + c.squeeze * c.num_freqs)
                            if c.use_full_band else 0)
    per_bin["mhsa"] = c.num_blocks * (4 * c.hidden * c.hidden + 2 * n_frames * c.hidden) if c.use_mhsa else 0
    ffn = 2 * c.hidden * c.ffn_hidden
    if c.ffn == "tconv":
        ffn += c.tconv_layers * c.ffn_hidden * (c.ffn_hidden // c.groups) * c.tconv_kernel
    per_bin["ffn"] = c.num_blocks * ffn
    per_bin["output"] = c.hidden * 2 * c.num_speakers
    bins = c.num_freqs * n_frames
    out = {k: v * bins / duration_s / 1e9 for k, v in per_bin.items()}
    out["total"] = sum(out.values())
    return out
