"""SDR-family metrics and losses, permutation-invariant training, Adam and the training loop."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import batch_forward, valid_length
from .stft import read_wav

log = logging.getLogger(__name__)

CLAMP_DB = 60.0
MAX_PIT_SPEAKERS = 4


class NumericalError(FloatingPointError):
    pass


# --- metrics (numpy) ----------------------------------------------------------

def _check_pair(est, ref):
    est, ref = np.asarray(est, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if est.shape[-1] != ref.shape[-1]:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} differ in length")
    try:
        return np.broadcast_arrays(est, ref)
    except ValueError:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} do not broadcast") from None


def _ratio_db(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 10 * np.log10(num / den)
    val = np.where(den == 0, CLAMP_DB, val)
    return np.clip(val, -CLAMP_DB, CLAMP_DB)


def si_sdr(est, ref) -> np.ndarray:
    """Scale-invariant SDR in dB over the last axis, clamped to +-60 dB."""
    est, ref = _check_pair(est, ref)
    ref_e = np.sum(ref * ref, axis=-1)
    if np.any(ref_e == 0):
        raise ValueError("SI-SDR undefined for an all-zero reference")
    alpha = np.sum(est * ref, axis=-1) / ref_e
    target = alpha[..., None] * ref
    return _ratio_db(np.sum(target ** 2, axis=-1), np.sum((target - est) ** 2, axis=-1))


def sdr(est, ref) -> np.ndarray:
    """Plain energy-ratio SDR (no scaling or filtering), clamped to +-60 dB."""
    est, ref = _check_pair(est, ref)
    ref_e = np.sum(ref * ref, axis=-1)
    if np.any(ref_e == 0):
        raise ValueError("SDR undefined for an all-zero reference")
    return _ratio_db(ref_e, np.sum((ref - est) ** 2, axis=-1))


def sa_sdr(ests, refs) -> np.ndarray:
    """Source-aggregated SDR over ``[..., P, N]``; zero reference streams are allowed."""
    ests, refs = _check_pair(ests, refs)
    num = np.sum(refs * refs, axis=(-2, -1))
    if np.any(num == 0):
        raise ValueError("SA-SDR undefined when every reference stream is zero")
    return _ratio_db(num, np.sum((refs - ests) ** 2, axis=(-2, -1)))


# --- losses (Tensor) ----------------------------------------------------------

def _db(num: T.Tensor, den: T.Tensor, floor) -> T.Tensor:
    ratio = num / (den + floor)
    return T.clip(T.log(ratio + 1e-30) * (10.0 / np.log(10.0)), -CLAMP_DB, CLAMP_DB)


def si_sdr_tensor(est: T.Tensor, ref: np.ndarray) -> T.Tensor:
    """Differentiable SI-SDR of ``est [..., N]`` against constant ``ref``."""
    est = T.as_tensor(est)
    ref = np.asarray(ref, dtype=est.dtype)
    ref_e = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(ref_e == 0):
        raise ValueError("SI-SDR undefined for an all-zero reference")
    alpha = T.sum(est * ref, axis=-1, keepdims=True) / ref_e
    target = alpha * ref
    err = target - est
    floor = (1e-12 * ref_e[..., 0]).astype(est.dtype)
    return _db(T.sum(target * target, axis=-1), T.sum(err * err, axis=-1), floor)


def sa_sdr_tensor(est: T.Tensor, ref: np.ndarray) -> T.Tensor:
    """Differentiable SA-SDR of ``est [..., P, N]``."""
    est = T.as_tensor(est)
    ref = np.asarray(ref, dtype=est.dtype)
    num = np.sum(ref * ref, axis=(-2, -1))
    if np.any(num == 0):
        raise ValueError("SA-SDR undefined when every reference stream is zero")
    err = est - ref
    return _db(T.as_tensor(num), T.sum(T.sum(err * err, axis=-1), axis=-1), (1e-12 * num).astype(est.dtype))


# --- permutation invariant training ------------------------------------------

@dataclass
class PITResult:
    perm: tuple[int, ...]  # perm[p] = index of the estimate assigned to reference p
    loss: float
    score: float


def _permutations(p: int):
    if p > MAX_PIT_SPEAKERS:
        raise ValueError(f"PIT enumerates permutations exhaustively; P={p} > {MAX_PIT_SPEAKERS}")
    return list(itertools.permutations(range(p)))


def pit(ests, refs, metric: str = "si_sdr") -> PITResult:
    """Best assignment of estimates ``[P, N]`` to references ``[P, N]``.

    ``si_sdr`` and ``sdr`` average per-pair dB values; ``sa_sdr`` aggregates
    energies per permutation before taking the ratio.
    """
    ests, refs = np.asarray(ests, dtype=np.float64), np.asarray(refs, dtype=np.float64)
    if ests.shape != refs.shape or ests.ndim != 2:
        raise ValueError(f"expected matching [P, N] arrays, got {ests.shape} and {refs.shape}")
    perms = _permutations(refs.shape[0])
    if metric in ("si_sdr", "sdr"):
        fn = si_sdr if metric == "si_sdr" else sdr
        # pair[r, e] = metric(estimate e, reference r)
        pair = fn(ests[None, :, :], refs[:, None, :])
        scores = [float(np.mean(pair[np.arange(len(p)), p])) for p in perms]
    elif metric == "sa_sdr":
        scores = [float(sa_sdr(ests[list(p)], refs)) for p in perms]
    else:
        raise ValueError(f"unknown PIT metric {metric!r}")
    best = int(np.argmax(scores))
    return PITResult(tuple(perms[best]), -scores[best], scores[best])


def pit_loss(est: T.Tensor, refs: np.ndarray, metric: str = "si_sdr") -> tuple[T.Tensor, list[tuple]]:
    """Batch PIT loss for ``est [B, P, N]``; permutations are chosen on detached values.

    Returns the mean negative metric over the batch and the chosen permutations.
    """
    est = T.as_tensor(est)
    refs = np.asarray(refs)
    losses, perms = [], []
    for b in range(est.shape[0]):
        res = pit(est.data[b], refs[b], metric)
        perms.append(res.perm)
        chosen = est[b][list(res.perm)]
        if metric == "sa_sdr":
            val = sa_sdr_tensor(chosen, refs[b])
        else:
            val = T.mean(si_sdr_tensor(chosen, refs[b]))
        losses.append(-val)
    return T.mean(T.stack(losses)), perms


# --- optimization -------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update of ``param`` with moments ``m``/``v``; ``t`` counts from 1."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, p in self.params.trainable():
            adam_step(p.data, grads[name], self.m[name], self.v[name], self.t, lr,
                      self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{n}": a for n, a in self.m.items()}
        out.update({f"adam.v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n][...] = state[f"adam.m/{n}"]
            self.v[n][...] = state[f"adam.v/{n}"]
        self.t = t


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grad_norm(grads: dict[str, np.ndarray], threshold: float = 5.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``threshold``; returns (grads, norm before clipping)."""
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        grads = {n: g * scale for n, g in grads.items()}
    return grads, norm


def lr_at(epoch: int, lr0: float = 1e-3, decay: float = 0.99) -> float:
    return lr0 * decay ** epoch


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch: int = 2
    duration: float = 4.0
    lr: float = 1e-3
    decay: float = 0.99
    clip: float = 5.0
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    loss: str = "si_sdr"
    ref_channel: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1 or self.duration <= 0 or self.lr <= 0 or self.clip <= 0:
            raise ValueError("batch, epochs, duration, lr and clip must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.loss not in ("si_sdr", "sa_sdr"):
            raise ValueError(f"loss must be 'si_sdr' or 'sa_sdr', got {self.loss!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Example:
    mixture: np.ndarray  # [M, N]
    targets: np.ndarray  # [P, N]
    sample_rate: int
    name: str = ""


def load_examples(records: list[dict], duration: float | None = None, window_len: int | None = None) -> list[Example]:
    """Read manifest records; crop to ``duration`` then to the STFT-covered length."""
    out = []
    for rec in records:
        mix, tgt = read_wav(rec["mixture"]), read_wav(rec["targets"])
        if mix.sample_rate != tgt.sample_rate:
            raise ValueError(f"{rec['mixture']}: sample rate differs from its targets")
        n = min(mix.length, tgt.length)
        if duration is not None:
            n = min(n, int(round(duration * mix.sample_rate)))
        if window_len:
            n = valid_length(n, window_len)
        out.append(Example(mix.samples[:, :n], tgt.samples[:, :n], mix.sample_rate, str(rec.get("id", ""))))
    return out


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _stack(examples: list[Example], idx) -> tuple[np.ndarray, np.ndarray]:
    n = min(examples[i].mixture.shape[1] for i in idx)
    return (np.stack([examples[i].mixture[:, :n] for i in idx]),
            np.stack([examples[i].targets[:, :n] for i in idx]))


def train_step(model, opt: Adam, mixes, targets, cfg: TrainConfig, lr: float, step: int,
               sample_rate: int, dump_dir: Path | None = None) -> tuple[float, float]:
    """Forward, PIT loss, backward, clip and Adam update. Returns (loss, pre-clip grad norm)."""
    model.params.zero_grad()
    if np.all(np.isfinite(mixes)) and np.all(np.isfinite(targets)):
        est = batch_forward(model, mixes, sample_rate, cfg.ref_channel, training=True,
                            rng=np.random.default_rng([cfg.seed, step, 1]))
        loss, _ = pit_loss(est, targets, cfg.loss)
        value = float(loss.data)
    else:
        value = float("nan")
    if np.isfinite(value):
        loss.backward()
        grads, norm = clip_grad_norm(model.params.grads(), cfg.clip)
    else:
        norm = float("nan")
    if not (np.isfinite(value) and np.isfinite(norm)):
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / f"nan_batch_step{step}.npz"
            np.savez(dump, mixtures=mixes, targets=targets)
        raise NumericalError(f"non-finite loss/gradient at step {step} (loss={value}, norm={norm}); "
                             f"batch dumped to {dump}")
    opt.step(grads, lr)
    return value, norm


def _save(path, model, opt: Adam, meta: dict) -> None:
    tensors = dict(model.params.state_dict())
    tensors.update(opt.state_dict())
    save_checkpoint(path, tensors, meta)


def train(model, examples: list[Example], cfg: TrainConfig, out_dir=None, resume=None,
          eval_every: int | None = None, eval_fn=None) -> TrainResult:
    """Train ``model`` in place. Checkpoints ``epoch_XXXX.ckpt`` are written after every epoch.

    With ``resume`` (a checkpoint path), parameters, Adam moments and the
    position in the data order are restored, so the continued run matches an
    uninterrupted one step for step.
    """
    if not examples:
        raise ValueError("training corpus is empty")
    rates = {e.sample_rate for e in examples}
    if len(rates) != 1:
        raise ValueError(f"mixed sample rates in corpus: {sorted(rates)}")
    sample_rate = rates.pop()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.params)
    result = TrainResult()
    step, start_epoch, start_batch = 0, 0, 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta.get("config_hash") != model.config.hash:
            raise CheckpointError(f"{resume}: checkpoint was written for a different model config")
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        opt.load_state_dict(tensors, int(meta["adam_t"]))
        step, start_epoch, start_batch = int(meta["step"]), int(meta["next_epoch"]), int(meta["next_batch"])
    curve_fh = open(out_dir / "curve.jsonl", "a") if out_dir is not None else None
    meta_base = {"config_hash": model.config.hash, "seed": cfg.seed, "model_config": model.config.to_dict(),
                 "train_config": cfg.to_dict()}
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg.lr, cfg.decay)
            batches = _batches(len(examples), cfg.batch, cfg.seed, epoch)
            first = start_batch if epoch == start_epoch else 0
            for bi in range(first, len(batches)):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                mixes, targets = _stack(examples, batches[bi])
                loss, norm = train_step(model, opt, mixes, targets, cfg, lr, step, sample_rate, out_dir)
                step += 1
                rec = {"step": step, "epoch": epoch, "loss": loss, "lr": lr, "grad_norm": norm}
                if eval_fn is not None and eval_every and step % eval_every == 0:
                    rec.update(eval_fn(model))
                result.curve.append(rec)
                if curve_fh is not None:
                    curve_fh.write(json.dumps(rec) + "\n")
                    curve_fh.flush()
            else:
                if out_dir is not None:
                    path = out_dir / f"epoch_{epoch:04d}.ckpt"
                    _save(path, model, opt, {**meta_base, "epoch": epoch, "step": step, "adam_t": opt.t,
                                             "next_epoch": epoch + 1, "next_batch": 0})
                    result.checkpoints.append(str(path))
                continue
            # max_steps reached mid-epoch: persist the exact position for resumption
            if out_dir is not None:
                path = out_dir / f"step_{step:07d}.ckpt"
                _save(path, model, opt, {**meta_base, "epoch": epoch, "step": step, "adam_t": opt.t,
                                         "next_epoch": epoch, "next_batch": bi})
                result.checkpoints.append(str(path))
            break
    finally:
        if curve_fh is not None:
            curve_fh.close()
    return result


def average_checkpoints(paths, last_k: int = 10) -> tuple[dict[str, np.ndarray], dict]:
    """Elementwise mean of the model tensors of the last ``last_k`` checkpoints in ``paths``."""
    paths = list(paths)
    if len(paths) < last_k:
        raise ValueError(f"need at least {last_k} checkpoints, got {len(paths)}")
    chosen = paths[-last_k:]
    acc, meta0 = None, None
    for p in chosen:
        tensors, meta = load_checkpoint(p)
        tensors = {k: v.astype(np.float64) for k, v in tensors.items() if not k.startswith("adam.")}
        if acc is None:
            acc, meta0 = tensors, meta
            continue
        if set(tensors) != set(acc):
            raise CheckpointError(f"{p}: parameter names differ from {chosen[0]}")
        for k, v in tensors.items():
            if v.shape != acc[k].shape:
                raise CheckpointError(f"{p}: {k} has shape {v.shape}, expected {acc[k].shape}")
            acc[k] += v
    avg = {k: (v / len(chosen)).astype(np.float32) for k, v in acc.items()}
    meta = {**meta0, "averaged_from": [str(p) for p in chosen]}
    return avg, meta
