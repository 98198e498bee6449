import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from spatialnet import tensor as T
from spatialnet.model import ModelConfig, SpatialNet
from spatialnet.objective import (Adam, Example, NumericalError, TrainConfig, adam_step, average_checkpoints,
                                  clip_grad_norm, global_norm, lr_at, pit, pit_loss, sa_sdr, sa_sdr_tensor, sdr,
                                  si_sdr, si_sdr_tensor, train)
from spatialnet.params import CheckpointError, ParameterStore, load_checkpoint, save_checkpoint

rng0 = np.random.default_rng(0)


# --- metrics ----------------------------------------------------------------------------

def test_si_sdr_examples():
    s = rng0.standard_normal(1000)
    assert si_sdr(s, s) == 60.0
    assert si_sdr(2 * s, s) == si_sdr(s, s)
    n = rng0.standard_normal(1000)
    n -= (n @ s) / (s @ s) * s
    n *= np.linalg.norm(s) / np.linalg.norm(n)
    assert si_sdr(s + n, s) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        si_sdr(s, np.zeros(1000))
    with pytest.raises(ValueError):
        si_sdr(s[:10], s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_si_sdr_scale_invariance(seed, alpha):
    assume(abs(alpha) > 1e-3)
    r = np.random.default_rng(seed)
    s, e = r.standard_normal(256), r.standard_normal(256)
    assert si_sdr(alpha * e, s) == pytest.approx(si_sdr(e, s), abs=1e-9)


def test_sa_sdr_examples():
    refs = rng0.standard_normal((2, 500))
    assert sa_sdr(refs, refs) == 60.0
    est = refs[:1] + 0.3 * rng0.standard_normal((1, 500))
    assert sa_sdr(est, refs[:1]) == pytest.approx(sdr(est[0], refs[0]))
    empty = np.stack([refs[0], np.zeros(500)])
    est2 = np.stack([est[0], np.zeros(500)])
    assert sa_sdr(est2, empty) == pytest.approx(sdr(est[0], refs[0]))
    with pytest.raises(ValueError):
        sa_sdr(refs, np.zeros_like(refs))


def test_tensor_losses_match_numpy_and_gradcheck():
    refs = rng0.standard_normal((2, 300))
    est = T.Tensor(refs + 0.5 * rng0.standard_normal((2, 300)), requires_grad=True)
    np.testing.assert_allclose(si_sdr_tensor(est, refs).data, si_sdr(est.data, refs), atol=1e-9)
    np.testing.assert_allclose(sa_sdr_tensor(est, refs).data, sa_sdr(est.data, refs), atol=1e-9)
    assert T.gradcheck(lambda: T.sum(si_sdr_tensor(est, refs)), [est], samples=40, rng=1) < 1e-5
    assert T.gradcheck(lambda: sa_sdr_tensor(est, refs), [est], samples=40, rng=2) < 1e-5


# --- PIT ------------------------------------------------------------------------------------

def test_pit_examples():
    refs = rng0.standard_normal((2, 400))
    res = pit(refs[::-1], refs)
    assert res.perm == (1, 0) and res.loss == -60.0
    one = pit(rng0.standard_normal((1, 400)), refs[:1])
    assert one.perm == (0,)
    with pytest.raises(ValueError):
        pit(rng0.standard_normal((5, 50)), rng0.standard_normal((5, 50)))


@pytest.mark.parametrize("seed", range(5))
def test_pit_matches_brute_force_and_hungarian(seed):
    r = np.random.default_rng(seed)
    refs = r.standard_normal((3, 200))
    ests = refs[r.permutation(3)] + 1.5 * r.standard_normal((3, 200))
    res = pit(ests, refs)
    # oracle 1: explicit loop over all 6 assignments
    best = max(itertools.permutations(range(3)),
               key=lambda p: np.mean([si_sdr(ests[p[i]], refs[i]) for i in range(3)]))
    assert res.perm == best
    # oracle 2: mean of per-pair scores is separable, so Hungarian assignment agrees
    cost = np.array([[-si_sdr(ests[e], refs[rr]) for e in range(3)] for rr in range(3)])
    rows, cols = linear_sum_assignment(cost)
    assert tuple(cols[np.argsort(rows)]) == res.perm
    assert res.loss == pytest.approx(cost[rows, cols].mean())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(3)))
def test_pit_symmetry(seed, order):
    r = np.random.default_rng(seed)
    refs = r.standard_normal((3, 128))
    ests = refs + r.standard_normal((3, 128))
    base = pit(ests, refs)
    shuffled = pit(ests[list(order)], refs)
    assert shuffled.loss == pytest.approx(base.loss)
    inv = np.argsort(order)
    assert tuple(int(inv[i]) for i in base.perm) == shuffled.perm


def test_pit_loss_batches_and_sa_sdr():
    refs = rng0.standard_normal((2, 2, 200))
    est = T.Tensor(np.stack([refs[0][::-1], refs[1]]) + 0.1 * rng0.standard_normal((2, 2, 200)),
                   requires_grad=True)
    loss, perms = pit_loss(est, refs)
    assert perms == [(1, 0), (0, 1)]
    loss.backward()
    assert est.grad.shape == est.shape
    loss_sa, perms_sa = pit_loss(T.Tensor(est.data), refs, "sa_sdr")
    assert perms_sa == perms and float(loss_sa.data) < 0


# --- optimizer ------------------------------------------------------------------------------

def test_adam_zero_grad_and_first_step():
    w = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_step(w, np.zeros(2), m, v, 1, 0.1)
    np.testing.assert_array_equal(w, [1.0, -2.0])
    w = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_step(w, np.array([0.3, -7.0]), m, v, 1, 0.1)
    np.testing.assert_allclose(w, [0.9, -1.9], atol=1e-6)


def test_adam_scalar_convergence():
    w, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 201):
        adam_step(w, 2 * (w - 3), m, v, t, 0.1)
    assert abs(w[0] - 3) < 0.05


def test_adam_class_state_roundtrip():
    store = ParameterStore()
    store.add("w", np.ones(3))
    opt = Adam(store)
    opt.step({"w": np.array([1.0, 2.0, 3.0])}, 0.01)
    state = opt.state_dict()
    assert set(state) == {"adam.m/w", "adam.v/w"}
    other = Adam(store)
    other.load_state_dict(state, opt.t)
    assert other.t == 1 and np.array_equal(other.m["w"], opt.m["w"])


def test_clip_examples():
    g = {"a": np.array([3.0, 0.0])}
    out, norm = clip_grad_norm(g, 5)
    assert norm == 3 and out["a"] is g["a"]
    g = {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}
    out, norm = clip_grad_norm(g, 5)
    assert norm == 10 and global_norm(out) == pytest.approx(5)
    np.testing.assert_allclose(out["b"], [0, 4])
    out, _ = clip_grad_norm({"a": np.zeros(4)}, 5)
    assert not np.any(out["a"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e4))
def test_clip_bound_and_direction(seed, scale):
    r = np.random.default_rng(seed)
    g = {"a": scale * r.standard_normal(5), "b": scale * r.standard_normal((2, 3))}
    out, _ = clip_grad_norm(g, 5.0)
    assert global_norm(out) <= 5 + 1e-6
    flat_in = np.concatenate([x.ravel() for x in g.values()])
    flat_out = np.concatenate([x.ravel() for x in out.values()])
    cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
    assert cos == pytest.approx(1.0)


def test_lr_schedule():
    assert lr_at(10) == pytest.approx(0.000904, abs=5e-7)
    assert lr_at(0) == 1e-3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batch": 2, "nope": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


# --- training loop -----------------------------------------------------------------------------

MICRO = ModelConfig(num_blocks=1, hidden=8, ffn_hidden=8, squeeze=2, heads=4, groups=8, num_freqs=129,
                    num_mics=2, num_speakers=2)


def micro_corpus(n=4, length=2048, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        tg = r.standard_normal((2, length))
        mix = np.stack([tg.sum(0), 0.8 * tg[0] + 1.1 * tg[1]]) + 0.01 * r.standard_normal((2, length))
        out.append(Example(mix, tg, 8000, str(i)))
    return out


def run(cfg, out_dir=None, resume=None):
    model = SpatialNet(MICRO, seed=0)
    res = train(model, micro_corpus(), cfg, out_dir=out_dir, resume=resume)
    return model, res


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, lr=1e-2)
    m1, r1 = run(cfg, tmp_path / "a")
    m2, r2 = run(cfg, tmp_path / "b")
    assert [c["loss"] for c in r1.curve] == [c["loss"] for c in r2.curve]
    for k, v in m1.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])
    assert [p.rsplit("/", 1)[-1] for p in r1.checkpoints] == ["epoch_0000.ckpt", "epoch_0001.ckpt"]
    lines = (tmp_path / "a" / "curve.jsonl").read_text().splitlines()
    assert len(lines) == 4 and set(json.loads(lines[0])) == {"step", "epoch", "loss", "lr", "grad_norm"}
    assert all(c["grad_norm"] >= 0 for c in r1.curve)


def test_resume_matches_uninterrupted_run(tmp_path):
    full_model, full = run(TrainConfig(epochs=3, lr=1e-2), tmp_path / "full")
    _, first = run(TrainConfig(epochs=3, lr=1e-2, max_steps=3), tmp_path / "part")
    assert first.checkpoints[-1].endswith("step_0000003.ckpt")
    resumed_model, rest = run(TrainConfig(epochs=3, lr=1e-2), tmp_path / "part", resume=first.checkpoints[-1])
    assert [c["loss"] for c in first.curve + rest.curve] == [c["loss"] for c in full.curve]
    for k, v in full_model.state_dict().items():
        assert np.array_equal(v, resumed_model.state_dict()[k])


def test_resume_rejects_other_config(tmp_path):
    _, res = run(TrainConfig(epochs=1), tmp_path)
    other = SpatialNet(MICRO.variant(hidden=16, ffn_hidden=16), seed=0)
    with pytest.raises(CheckpointError):
        train(other, micro_corpus(), TrainConfig(epochs=2), resume=res.checkpoints[0])


def test_nan_batch_is_dumped(tmp_path):
    corpus = micro_corpus(2)
    corpus[1].mixture[0, 10] = np.nan
    with pytest.raises(NumericalError):
        train(SpatialNet(MICRO), corpus, TrainConfig(batch=2, epochs=1), out_dir=tmp_path)
    dump = np.load(tmp_path / "nan_batch_step0.npz")
    assert np.isnan(dump["mixtures"]).any()


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train(SpatialNet(MICRO), [], TrainConfig())


# --- checkpoint averaging -------------------------------------------------------------------

META = {"config_hash": "x", "seed": 0, "epoch": 0}


def test_average_examples(tmp_path):
    paths = []
    for i, val in enumerate([0.0, 2.0]):
        p = tmp_path / f"{i}.ckpt"
        save_checkpoint(p, {"w": np.full((2, 2), val, np.float32), "adam.m/w": np.zeros((2, 2), np.float32)},
                        META)
        paths.append(p)
    avg, meta = average_checkpoints(paths, last_k=2)
    assert list(avg) == ["w"] and np.all(avg["w"] == 1.0)
    same, _ = average_checkpoints([paths[1]] * 3, last_k=3)
    assert np.array_equal(same["w"], load_checkpoint(paths[1])[0]["w"])
    with pytest.raises(ValueError):
        average_checkpoints(paths, last_k=3)


def test_average_rejects_mismatch(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"w": np.zeros(2, np.float32)}, META)
    save_checkpoint(tmp_path / "b.ckpt", {"w": np.zeros(3, np.float32)}, META)
    save_checkpoint(tmp_path / "c.ckpt", {"u": np.zeros(2, np.float32)}, META)
    with pytest.raises(CheckpointError):
        average_checkpoints([tmp_path / "a.ckpt", tmp_path / "b.ckpt"], last_k=2)
    with pytest.raises(CheckpointError):
        average_checkpoints([tmp_path / "a.ckpt", tmp_path / "c.ckpt"], last_k=2)


def test_average_of_training_run_keeps_names(tmp_path):
    model, res = run(TrainConfig(epochs=3, lr=1e-2), tmp_path)
    avg, _ = average_checkpoints(res.checkpoints, last_k=3)
    assert {k: v.shape for k, v in avg.items()} == {k: v.shape for k, v in model.state_dict().items()}
