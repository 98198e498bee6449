"""Attention-map extraction, chunked long-utterance inference and metric reports."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .objective import pit, sdr, si_sdr
from .pipeline import features, separate
from .stft import Waveform

# --- attention ----------------------------------------------------------------


def attention_maps(model, mixture: Waveform, layer: int, head: int, ref_channel: int = 0) -> dict[str, np.ndarray]:
    """Self-attention of one head of narrow-band block ``layer`` for one utterance.

    ``QK[q, k]`` averages attention over frequencies and ``FK[f, k]`` over
    queries, so every QK row and every FK row sums to one.
    """
    c = model.config
    if not c.use_mhsa:
        raise ValueError("model was built without self-attention")
    if not 0 <= layer < c.num_blocks:
        raise IndexError(f"layer {layer} out of range [0, {c.num_blocks})")
    if not 0 <= head < c.heads:
        raise IndexError(f"head {head} out of range [0, {c.heads})")
    x, _ = features(mixture.samples, mixture.sample_rate, ref_channel, 2 * (c.num_freqs - 1))
    rec: dict[int, np.ndarray] = {}
    with T.no_grad():
        model.forward(x, record_attention=rec)
    att = rec[layer][0, :, head].astype(np.float64)  # [F, T_q, T_k]
    return {"QK": att.mean(axis=0), "FK": att.mean(axis=1), "raw": att}


def export_attention(maps: dict[str, np.ndarray], out_dir, prefix: str = "attn") -> list[Path]:
    """Write each map as ``.npy`` and as an 8-bit grayscale PNG (max-normalized, row 0 at top)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in ("QK", "FK"):
        grid = np.asarray(maps[key])
        npy = out_dir / f"{prefix}_{key}.npy"
        np.save(npy, grid)
        peak = grid.max() if grid.size and grid.max() > 0 else 1.0
        png = out_dir / f"{prefix}_{key}.png"
        Image.fromarray(np.round(255 * grid / peak).astype(np.uint8), mode="L").save(png)
        written += [npy, png]
    return written


# --- chunked inference --------------------------------------------------------


@dataclass
class StitchPlan:
    sample_rate: int
    chunk: int  # samples
    hop: int
    starts: list[int] = field(default_factory=list)
    # chunk_perms[i][p]: stream of chunk i's raw output that becomes global stream p
    chunk_perms: list[tuple[int, ...]] = field(default_factory=list)
    # boundary_perms[i-1][q]: stream of chunk i matched to raw stream q of chunk i-1
    boundary_perms: list[tuple[int, ...]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    @property
    def overlap(self) -> int:
        return self.chunk - self.hop


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def chunk_and_stitch(process: Callable[[np.ndarray], np.ndarray], mixture: Waveform,
                     chunk_s: float = 4.0, hop_s: float = 2.0) -> tuple[Waveform, StitchPlan]:
    """Process a long mixture in overlapping chunks and stitch the streams.

    ``process`` maps a ``[M, n]`` chunk to ``[P, n]`` estimates. Each chunk's
    stream order is chosen to maximize the summed zero-lag normalized
    cross-correlation with the already stitched previous chunk over their
    overlap; overlaps are blended with a linear crossfade.
    """
    fs = mixture.sample_rate
    chunk, hop = int(round(chunk_s * fs)), int(round(hop_s * fs))
    if not 0 < hop <= chunk:
        raise ValueError("need 0 < hop <= chunk")
    x = mixture.samples
    n = x.shape[1]
    plan = StitchPlan(fs, chunk, hop)
    if n <= chunk:
        out = np.asarray(process(x))
        plan.starts = [0]
        plan.chunk_perms = [tuple(range(out.shape[0]))]
        return Waveform(out, fs), plan
    n_chunks = int(np.ceil((n - chunk) / hop)) + 1
    total = (n_chunks - 1) * hop + chunk
    xp = np.pad(x, ((0, 0), (0, total - n)))
    overlap = chunk - hop
    ramp = (np.arange(overlap) + 0.5) / overlap  # weight of the incoming chunk
    out = None
    prev_perm = None
    for i in range(n_chunks):
        s = i * hop
        y = np.asarray(process(xp[:, s:s + chunk]))
        if out is None:
            out = np.zeros((y.shape[0], total))
            perm = tuple(range(y.shape[0]))
            out[:, :chunk] = y
        else:
            prev = out[:, s:s + overlap]
            cur = y[:, :overlap]
            best, score = None, -np.inf
            for cand in itertools.permutations(range(y.shape[0])):
                sc = sum(_ncc(prev[p], cur[cand[p]]) for p in range(y.shape[0]))
                if sc > score + 1e-12:
                    best, score = cand, sc
            perm = best
            y = y[list(perm)]
            out[:, s:s + overlap] = prev * (1 - ramp) + y[:, :overlap] * ramp
            out[:, s + overlap:s + chunk] = y[:, overlap:]
            inv = np.argsort(prev_perm)
            plan.boundary_perms.append(tuple(int(perm[inv[q]]) for q in range(len(perm))))
            plan.scores.append(float(score))
        plan.starts.append(s)
        plan.chunk_perms.append(tuple(int(p) for p in perm))
        prev_perm = perm
    return Waveform(out[:, :n], fs), plan


def model_processor(model, sample_rate: int, ref_channel: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    return lambda chunk: separate(model, Waveform(chunk, sample_rate), ref_channel).samples


def enhance(model, mixture: Waveform, stitch: bool = False, chunk_s: float = 4.0, hop_s: float = 2.0,
            ref_channel: int = 0) -> Waveform:
    """Separate a mixture in one pass, or chunk-wise with stitching when ``stitch``."""
    if mixture.channels != model.config.num_mics:
        raise ValueError(f"mixture has {mixture.channels} channels, model expects {model.config.num_mics}")
    if not stitch:
        return separate(model, mixture, ref_channel)
    out, _ = chunk_and_stitch(model_processor(model, mixture.sample_rate, ref_channel), mixture, chunk_s, hop_s)
    return out


# --- reports ------------------------------------------------------------------

REPORT_COLUMNS = ("id", "si_sdr", "sdr", "si_sdr_unproc", "sdr_unproc", "si_sdr_imp", "sdr_imp", "perm")


def evaluate_utterance(est: np.ndarray, ref: np.ndarray, unprocessed: np.ndarray) -> dict:
    """Metrics for one utterance: ``est``/``ref`` are ``[P, N]``, ``unprocessed`` is ``[N]``."""
    est, ref = np.atleast_2d(est), np.atleast_2d(ref)
    unprocessed = np.asarray(unprocessed).ravel()
    if est.shape != ref.shape or unprocessed.shape[0] != ref.shape[1]:
        raise ValueError(f"length mismatch: est {est.shape}, ref {ref.shape}, unprocessed {unprocessed.shape}")
    res = pit(est, ref, "si_sdr")
    paired = est[list(res.perm)]
    row = {
        "si_sdr": float(np.mean(si_sdr(paired, ref))),
        "sdr": float(np.mean(sdr(paired, ref))),
        "si_sdr_unproc": float(np.mean(si_sdr(unprocessed[None], ref))),
        "sdr_unproc": float(np.mean(sdr(unprocessed[None], ref))),
        "perm": ",".join(map(str, res.perm)),
    }
    row["si_sdr_imp"] = row["si_sdr"] - row["si_sdr_unproc"]
    row["sdr_imp"] = row["sdr"] - row["sdr_unproc"]
    return row


def report(ests: Sequence[np.ndarray], refs: Sequence[np.ndarray], unprocessed: Sequence[np.ndarray],
           ids: Sequence[str] | None = None) -> list[dict]:
    """Per-utterance rows followed by a ``mean`` row."""
    if not len(ests) == len(refs) == len(unprocessed):
        raise ValueError("est, ref and unprocessed sets differ in size")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(ests))]
    rows = []
    for uid, e, r, u in zip(ids, ests, refs, unprocessed):
        rows.append({"id": uid, **evaluate_utterance(e, r, u)})
    if rows:
        mean = {"id": "mean", "perm": ""}
        for k in REPORT_COLUMNS:
            if k not in ("id", "perm"):
                mean[k] = float(np.mean([r[k] for r in rows]))
        rows.append(mean)
    return rows


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, delimiter="\t")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
