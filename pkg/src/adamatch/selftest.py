"""Named invariant suite run by ``adamatch selftest``.

Each check raises ``AssertionError`` on failure and may return a short
detail string. Checks look functions up through their modules at call time,
so a patched implementation (the mutation harness) is what gets exercised.
"""

from __future__ import annotations

import json
import math
import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import algorithms as A
from . import augment as G
from . import data as D
from . import oracle
from . import train as TR
from .gradcheck import gradcheck
from .nn import layers as L
from .nn import optim as O
from .nn import tensor as T

CHECKS = []


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn
    return deco


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


# ------------------------------------------------------------------ helpers

def toy_dataset(n=60, side=28, k=3, seed=0, name="toy") -> D.Dataset:
    """Class-dependent blobs: class c lights up one horizontal band."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    x = 0.1 * rng.random((n, side, side, 1))
    band = side // k
    for i, c in enumerate(y):
        x[i, c * band:(c + 1) * band] += 0.8
    return D.Dataset(np.clip(x, 0, 1).astype(np.float32), y.astype(np.int64), name, k)


def toy_task(kind=D.UDA, n_labels=None, seed=0) -> D.TaskSpec:
    src = toy_dataset(60, seed=seed, name="src")
    tgt = D.shift_domain(toy_dataset(60, seed=seed + 1, name="tgt"), D.Invert())
    test = D.shift_domain(toy_dataset(30, seed=seed + 2, name="test"), D.Invert())
    return D.build_task(src, tgt, kind, n_labels, seed, target_test=test)


def toy_config(**kw) -> TR.TrainConfig:
    base = dict(total_images=8 * 24, n_sl=8, checkpoint_every=16, eval_last_k=4, width=4,
                input_side=28, dtype="float32")
    base.update(kw)
    return TR.TrainConfig(**base)


def _random_batch(rng, n, k, dtype):
    return rng.standard_normal((n, k)).astype(dtype) * rng.choice([0.1, 1.0, 5.0, 30.0])


# ------------------------------------------------------------------ nn_core

@check("nn.softmax_rows_sum_to_one")
def _softmax_sums():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(300):
        z = _random_batch(rng, int(rng.integers(1, 20)), int(rng.integers(2, 30)),
                          (np.float32, np.float64)[i % 2])
        z += rng.uniform(-1e3, 1e3)
        p = T.softmax(z)
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        worst = max(worst, float(np.abs(p.astype(np.float64).sum(axis=1) - 1).max()))
    assert worst <= 1e-6, f"row sum off by {worst}"
    assert np.allclose(T.softmax(np.zeros((1, 2))), 0.5)
    assert np.allclose(T.softmax(np.array([[math.log(3), 0.0]])), [[0.75, 0.25]])
    return f"max |row sum - 1| = {worst:.2e}"


@check("nn.cross_entropy_matches_scalar_loop")
def _ce_loop():
    rng = np.random.default_rng(1)
    for _ in range(50):
        z = rng.standard_normal((4, 5))
        p = rng.dirichlet(np.ones(5), size=4)
        ref = 0.0
        for i in range(4):
            lse = math.log(sum(math.exp(v) for v in z[i]))
            ref += -sum(p[i, j] * (z[i, j] - lse) for j in range(5)) / 4
        got = float(T.cross_entropy(p, T.Tensor(z)).data)
        assert abs(got - ref) <= 1e-6, (got, ref)
    got = float(T.cross_entropy(np.array([[1.0, 0.0]]), T.Tensor(np.zeros((1, 2)))).data)
    assert abs(got - math.log(2)) < 1e-12


@check("nn.gradcheck_f64")
def _grad64():
    errs = [gradcheck(s, np.float64, batch=4, coords=24).rel_error for s in range(100)]
    assert max(errs) < 1e-6, f"max rel error {max(errs):.2e}"
    return f"100 seeds, max rel error {max(errs):.2e}"


@check("nn.gradcheck_f32")
def _grad32():
    errs = [gradcheck(s, np.float32, batch=1, coords=24).rel_error for s in range(100)]
    assert max(errs) < 1e-3, f"max rel error {max(errs):.2e}"
    return f"100 seeds, max rel error {max(errs):.2e}"


@check("nn.stop_gradient_blocks")
def _stopgrad():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.Tensor(np.array([3.0, 4.0]), requires_grad=True)
    T.backward_tensor(T.sum_(T.mul(T.stop_gradient(x), y)))
    assert x.grad is None or not np.any(x.grad)
    assert np.array_equal(y.grad, [1.0, 2.0])


@check("nn.bn_frozen_and_eval_keep_running_stats")
def _bn_modes():
    m = L.build_desknet(28, 1, 3, 4, seed=0)
    x = np.random.default_rng(0).random((5, 28, 28, 1))
    L.model_apply(m, x, L.BnMode.TRAIN_UPDATE)
    before = {k: (a.tobytes(), b.tobytes()) for k, (a, b) in m.bn_stats.items()}
    for mode in (L.BnMode.TRAIN_FROZEN, L.BnMode.EVAL):
        z1 = L.model_apply(m, x, mode).data
        z2 = L.model_apply(m, x, mode).data
        assert np.array_equal(z1, z2), f"{mode} not pure"
        after = {k: (a.tobytes(), b.tobytes()) for k, (a, b) in m.bn_stats.items()}
        assert after == before, f"{mode} mutated running stats"
    rm, rv = m.bn_stats["bn1"]
    L.model_apply(m, x + 0.5, L.BnMode.TRAIN_UPDATE)
    assert not np.array_equal(m.bn_stats["bn1"][0], rm)


@check("nn.bn_running_update_formula")
def _bn_update():
    x = T.Tensor(np.full((4, 2, 2, 3), 2.0))
    g, b = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    running = (np.zeros(3), np.ones(3))
    _, new = L.batch_norm(x, g, b, running, L.BnMode.TRAIN_UPDATE)
    assert np.allclose(new[0], 0.01 * 2.0) and np.allclose(new[1], 0.99)


@check("nn.lr_schedule_monotone_with_exact_endpoints")
def _lr():
    opt = O.Optimizer()
    T_ = 1000
    lrs = [O.lr_at(opt, t, T_) for t in range(T_ + 1)]
    assert lrs[0] == 0.03 and lrs[-1] == 0.25 * 0.03
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert abs(O.lr_at(opt, 500, T_) - 0.01875) < 1e-15


@check("nn.sgd_matches_hand_unroll")
def _sgd():
    m = L.build_desknet(28, 1, 2, 4, seed=0, dtype=np.float64)
    opt = O.Optimizer(lr0=0.1, momentum=0.9, weight_decay=0.01)
    name = "conv1.w"
    p0 = m.params[name].data.copy()
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal(p0.shape), rng.standard_normal(p0.shape)
    zeros = {n: np.zeros_like(p.data) for n, p in m.trainable().items()}
    O.sgd_step(m, {**zeros, name: g1}, opt, 0.1)
    O.sgd_step(m, {**zeros, name: g2}, opt, 0.05)
    v1 = g1 + 0.01 * p0
    p1 = p0 - 0.1 * v1
    v2 = 0.9 * v1 + g2 + 0.01 * p1
    p2 = p1 - 0.05 * v2
    assert np.abs(m.params[name].data - p2).max() < 1e-7
    assert np.array_equal(m.params["bn1.gamma"].data, np.ones(4)), "BN scale was decayed"


@check("nn.desknet_param_count")
def _params():
    m = L.build_desknet(32, 3, 10, 16)
    assert m.n_params() == L.desknet_param_count(3, 10, 16)
    expected = 9 * 3 * 16 + 3 * 9 * 16 * 16 + 4 * 2 * 16 + 16 * 10 + 10
    assert m.n_params() == expected
    assert L.model_apply(m, np.zeros((3, 32, 32, 3)), L.BnMode.EVAL).shape == (3, 10)


@check("nn.nan_aborts_with_diagnostic")
def _nan():
    m = L.build_desknet(28, 1, 3, 4)
    m.params["fc.b"].data[0] = np.nan
    try:
        L.model_apply(m, np.zeros((1, 28, 28, 1)), L.BnMode.EVAL)
    except T.NumericalError as exc:
        assert "logits" in str(exc)
    else:
        raise AssertionError("NaN logits did not abort")


# --------------------------------------------------------------------- data

@check("data.idx_round_trip_and_errors")
def _idx():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (7, 5, 5), dtype=np.uint8)
    labels = rng.integers(0, 10, 7, dtype=np.uint8)
    with tempfile.TemporaryDirectory() as tmp:
        ip, lp = Path(tmp, "i.gz"), Path(tmp, "l")
        D.write_idx(ip, imgs)
        D.write_idx(lp, labels)
        ds = D.load_idx(ip, lp, k=10)
        assert np.array_equal(ds.images[..., 0], imgs / np.float32(255)) and len(ds) == 7
        for call, err in ((lambda: D.read_idx(lp, D.IMAGES_MAGIC), D.MagicMismatch),):
            try:
                call()
            except err:
                pass
            else:
                raise AssertionError(f"expected {err.__name__}")
        D.write_idx(lp, labels[:-1])
        try:
            D.load_idx(ip, lp, k=10)
        except D.CountMismatch:
            pass
        else:
            raise AssertionError("expected CountMismatch")


@check("data.labeled_disjoint_from_test_and_balanced")
def _task_split():
    for seed in range(5):
        for n in (1, 3, 5):
            task = toy_task(D.SSDA, n, seed)
            assert np.array_equal(task.target_labeled.class_counts(), np.full(3, n))
            lab = {x.tobytes() for x in task.target_labeled.images}
            assert not lab & {x.tobytes() for x in task.target_test.images}
            assert not lab & {x.tobytes() for x in task.target_unlabeled.images}


@check("data.stream_visits_every_labeled_example")
def _stream():
    task = toy_task()
    n, n_sl = len(task.source_labeled), 7
    stream = D.batch_stream(task, n_sl, 3, np.random.default_rng(0))
    keys = {x.tobytes(): i for i, x in enumerate(task.source_labeled.images)}
    seen = set()
    for _ in range(math.ceil(n / n_sl)):
        b = next(stream)
        assert b.n_tu == 3 * n_sl
        seen |= {keys[x.tobytes()] for x in b.x_sl}
    assert len(seen) == n


@check("data.construction_reproducible")
def _data_repro():
    a, b = toy_task(D.SSDA, 2, 4), toy_task(D.SSDA, 2, 4)
    assert np.array_equal(a.target_labeled_idx, b.target_labeled_idx)
    sa = D.batch_stream(a, 8, 3, np.random.default_rng(1))
    sb = D.batch_stream(b, 8, 3, np.random.default_rng(1))
    for _ in range(10):
        x, y = next(sa), next(sb)
        assert x.x_sl.tobytes() == y.x_sl.tobytes() and x.x_tu.tobytes() == y.x_tu.tobytes()


# ------------------------------------------------------------------ augment

@check("augment.preserves_shape_and_range")
def _aug_shape():
    rng = np.random.default_rng(0)
    x = rng.random((9, 32, 32, 3)).astype(np.float32)
    for pol in (G.DIGITS_POLICY, G.NATURAL_POLICY, G.AugmentPolicy(pad_fill=1.7)):
        pair = G.augment_pair(x, pol, rng)
        for v in (pair.weak, pair.strong):
            assert v.shape == x.shape and v.dtype == x.dtype
            assert v.min() >= 0 and v.max() <= 1


@check("augment.strong_equals_weak_outside_cutout")
def _aug_cutout():
    x = np.random.default_rng(1).random((16, 32, 32, 1))
    pol = G.NATURAL_POLICY
    for seed in range(20):
        weak = G.weak_augment(x, pol, np.random.default_rng(seed))
        boxes = []
        strong = G.strong_augment(x, pol, np.random.default_rng(seed), boxes_out=boxes)
        outside = np.ones(x.shape, dtype=bool)
        for i, (y0, y1, x0, x1) in enumerate(boxes[0]):
            outside[i, y0:y1, x0:x1] = False
        assert np.array_equal(strong[outside], weak[outside])
        assert np.all(strong[~outside] == pol.fill)


# ----------------------------------------------------------------- adamatch

@check("adamatch.interpolation_endpoints_and_bounds")
def _interp():
    rng = np.random.default_rng(0)
    a, b = T.Tensor(rng.standard_normal((6, 4))), T.Tensor(rng.standard_normal((6, 4)))
    assert np.array_equal(A.interpolate_logits(a, b, lam=np.ones((6, 4))).data, a.data)
    assert np.array_equal(A.interpolate_logits(a, b, lam=np.zeros((6, 4))).data, b.data)
    for _ in range(50):
        z = A.interpolate_logits(a, b, rng=rng).data
        lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
        assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)


@check("adamatch.distribution_alignment")
def _align():
    got = A.distribution_align(np.array([[0.6, 0.4]]), np.array([0.3, 0.7]), np.array([0.6, 0.4]))
    assert np.allclose(got, [[0.3, 0.7]], atol=1e-12), got
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 12))
        y = rng.dirichlet(np.ones(k), size=int(rng.integers(1, 30)))
        src = rng.dirichlet(np.ones(k))
        tgt = A.batch_mean(y)
        pre = y * (src / tgt)
        assert np.abs(pre.mean(axis=0) - src).max() < 1e-6
        post = A.distribution_align(y, src, tgt)
        assert np.abs(post.sum(axis=1) - 1).max() < 1e-6


@check("adamatch.relative_threshold_worked_values")
def _threshold():
    y = np.array([[0.7, 0.3], [0.8, 0.2], [0.6, 0.4]])
    assert abs(A.relative_threshold(y, 0.9) - 0.63) < 1e-12
    assert A.relative_threshold(np.eye(3), 0.9) == 0.9
    assert A.relative_threshold(np.full((5, 4), 0.25), 1.0) == 0.25


@check("adamatch.mask_monotone_in_threshold")
def _mask():
    rng = np.random.default_rng(0)
    y = rng.dirichlet(np.ones(5) * 0.3, size=200)
    prev = None
    for c in np.linspace(0, 1, 101):
        m = A.confidence_mask(y, c)
        if prev is not None:
            assert np.all(m <= prev)
        prev = m
    assert A.confidence_mask(np.array([[0.63, 0.37]]), 0.63)[0] == 1


@check("adamatch.stop_gradient_on_weak_branch")
def _weak_branch():
    rng = np.random.default_rng(0)
    n_sl, n_tu, k = 4, 12, 5
    z_sl = T.Tensor(rng.standard_normal((2 * n_sl, k)))
    z_tu_data = rng.standard_normal((2 * n_tu, k)) * 3
    y = np.eye(k)[rng.integers(0, k, n_sl)]
    cfg = A.AdaMatchConfig(tau=0.5, uratio=3)

    def target_loss(data):
        state = A.PseudoLabelState()
        z = T.Tensor(data, requires_grad=True)
        return A.step_losses(z_sl, z, y, state, cfg, 1.0).loss_target, z

    loss, z = target_loss(z_tu_data)
    T.backward_tensor(loss)
    assert not np.any(z.grad[:n_tu]), "gradient reached the weak target rows"
    # finite differences on the weak rows: pseudo-labels/mask are piecewise constant
    for i, j in [(0, 0), (3, 2), (n_tu - 1, k - 1)]:
        d = z_tu_data.copy()
        d[i, j] += 1e-6
        up = float(target_loss(d)[0].data)
        d[i, j] -= 2e-6
        down = float(target_loss(d)[0].data)
        assert up == down


@check("adamatch.warmup_schedule")
def _mu():
    T_ = 1000
    mus = [A.warmup_mu(t, T_) for t in range(T_ + 1)]
    assert mus[0] == 0 and abs(A.warmup_mu(250, T_) - 0.5) < 1e-12
    assert all(a <= b for a, b in zip(mus[:501], mus[1:501]))
    assert all(m == 1.0 for m in mus[500:])


@check("adamatch.loss_decomposition_and_oracle_equivalence")
def _oracle():
    n_bad = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        dtype = (np.float32, np.float64)[seed % 2]
        n_sl, u, k = int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(2, 11))
        zm, zs = _random_batch(rng, 2 * n_sl, k, dtype), _random_batch(rng, 2 * n_sl, k, dtype)
        zt = _random_batch(rng, 2 * n_sl * u, k, dtype)
        lam = rng.random(zm.shape).astype(dtype)
        labels = rng.integers(0, k, n_sl)
        cap = int(rng.integers(1, 6))
        state = A.PseudoLabelState(cap)
        for _ in range(int(rng.integers(0, 8))):
            a, b = rng.dirichlet(np.ones(k)).astype(dtype), rng.dirichlet(np.ones(k)).astype(dtype)
            state.push(a / T.seq_sum(a), b / T.seq_sum(b))
        before = state.copy()
        tau, t = float(rng.uniform(0.5, 1)), int(rng.integers(0, 101))
        mu = A.warmup_mu(t, 100)
        cfg = A.AdaMatchConfig(tau, u, None, cap)
        z = A.interpolate_logits(T.Tensor(zm, requires_grad=True), T.Tensor(zs), lam=lam)
        terms = A.step_losses(z, T.Tensor(zt, requires_grad=True), np.eye(k, dtype=dtype)[labels],
                              state, cfg, mu)
        ref = oracle.adamatch_losses(zm, zs, lam, zt, labels, list(before.src), list(before.tgt),
                                     tau, oracle.warmup_mu(t, 100), capacity=cap)
        total = float(terms.loss_source.data) + mu * float(terms.loss_target.data)
        assert abs(float(terms.total.data) - total) <= 1e-6 * max(1.0, abs(total))
        same = (np.array_equal(terms.pseudo_labels, np.array(ref.pseudo_labels))
                and np.array_equal(terms.mask, np.array(ref.mask)) and terms.c_tau == ref.c_tau
                and float(terms.loss_source.data) == ref.loss_source
                and float(terms.loss_target.data) == ref.loss_target
                and float(terms.total.data) == ref.total)
        n_bad += not same
    assert n_bad == 0, f"{n_bad}/1000 batches differ from the scalar oracle"
    return "1000/1000 batches bit-identical"


@check("adamatch.fixmatch_mask_subset_of_adamatch")
def _subset():
    # when the source is less confident than tau, the relative threshold is lower
    rng = np.random.default_rng(0)
    for _ in range(100):
        y_sl = rng.dirichlet(np.ones(6), size=8)
        y_tu = rng.dirichlet(np.ones(6) * 0.4, size=24)
        c = A.relative_threshold(y_sl, 0.9)
        assert np.all(A.confidence_mask(y_tu, 0.9) <= A.confidence_mask(y_tu, c))


@check("adamatch.baseline_bn_zero_target_loss_and_stat_probe")
def _baseline():
    task = toy_task()
    stream = D.batch_stream(task, 4, 3, np.random.default_rng(0))
    m = L.build_desknet(28, 1, 3, 4, seed=0)
    for t in range(3):
        r = A.baseline_bn_step(m, next(stream), t, 3, np.random.default_rng(t), G.DIGITS_POLICY,
                               O.Optimizer())
        assert r.loss_target == 0.0 and not np.any(r.mask)
    probe = task.target_test.images[:8]
    z0 = L.model_apply(m, probe, L.BnMode.EVAL).data
    shifted = np.clip(task.target_unlabeled.images[:32] * 0.3 + 0.6, 0, 1)
    for _ in range(20):
        L.model_apply(m, shifted, L.BnMode.TRAIN_UPDATE)
    assert not np.allclose(L.model_apply(m, probe, L.BnMode.EVAL).data, z0)


# --------------------------------------------------------------- train_eval

@check("train.evaluate_is_pure")
def _eval_pure():
    m = L.build_desknet(28, 1, 3, 4, seed=0)
    before = {k: v.tobytes() for k, v in m.state_arrays().items()}
    TR.evaluate(m, toy_dataset())
    assert {k: v.tobytes() for k, v in m.state_arrays().items()} == before


@check("train.median_ignores_old_checkpoints")
def _median():
    tail = [0.5, 0.7, 0.6, 0.9, 0.8, 0.1, 0.3, 0.2, 0.4, 1.0]
    assert TR.median_last_k(tail, 10) == 0.55
    assert TR.median_last_k([0.0, 0.99] + tail, 10) == 0.55
    assert TR.median_last_k([1, 2, 3], 3) == 2.0


@check("train.reproducible_and_resumable")
def _repro():
    cfg = toy_config()
    with tempfile.TemporaryDirectory() as tmp:
        a = TR.train(toy_task(), cfg, Path(tmp, "a"))
        b = TR.train(toy_task(), cfg, Path(tmp, "b"))
        assert a.checkpoints == b.checkpoints and a.final_accuracy == b.final_accuracy
        fa, fb = (Path(tmp, d, "final.admk").read_bytes() for d in "ab")
        assert fa == fb, "final checkpoints differ"
        c = _interrupted_run(cfg, Path(tmp, "c"))
        assert c.checkpoints == a.checkpoints
        assert Path(tmp, "c", "final.admk").read_bytes() == fa
    return f"final accuracy {a.final_accuracy:.3f}"


def _interrupted_run(cfg, out):
    """Stop a run after its fourth checkpoint, then resume it to completion."""
    class Stop(Exception):
        pass

    def stop(*args):
        if args[2] >= 4 * cfg.checkpoint_every:
            raise Stop

    try:
        TR.train(toy_task(), cfg, out, progress=stop)
    except Stop:
        pass
    return TR.train(toy_task(), cfg, out, resume=True)


@check("train.checkpoint_round_trip")
def _ckpt():
    m = L.build_desknet(28, 1, 3, 4, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp, "m.admk")
        TR.save_checkpoint(p, m.state_arrays())
        back = TR.load_checkpoint(p)
        assert p.read_bytes()[:4] == b"ADMK"
        for k, v in m.state_arrays().items():
            assert np.array_equal(back[k], v)


# ---------------------------------------------------------------------- cli

@check("cli.config_defaults_and_validation")
def _config():
    from . import config as C

    v = C.resolve("")
    assert v["adamatch.tau"] == 0.9 and v["adamatch.uratio"] == 3 and v["optim.lr"] == 0.03
    assert C.resolve("", ["adamatch.tau=0.95"])["adamatch.tau"] == 0.95
    for bad in (["adamatch.tau=1.5"], ["nope.key=1"], ["train.n_sl=abc"]):
        try:
            C.resolve("", bad)
        except C.ConfigError:
            pass
        else:
            raise AssertionError(f"{bad} accepted")
    assert C.resolve(C.dump(v)) == v


# ------------------------------------------------------------------- runner

def run(select=None, stream=None) -> list:
    """Run every check (or those whose name contains one of ``select``)."""
    results = []
    for name, fn in CHECKS:
        if select and not any(s in name for s in select):
            continue
        t0 = time.perf_counter()
        try:
            detail = fn() or ""
            ok = True
        except Exception as exc:  # a failing check must not stop the suite
            ok = False
            detail = f"{type(exc).__name__}: {exc}".strip()
            if not isinstance(exc, AssertionError):
                detail += " | " + traceback.format_exc(limit=-1).strip().splitlines()[-2].strip()
        res = CheckResult(name, ok, round(time.perf_counter() - t0, 3), detail)
        results.append(res)
        if stream is not None:
            stream.write(json.dumps(res.__dict__) + "\n")
            stream.flush()
    return results


# mutations used to prove the suite catches broken implementations
def _bad_softmax(logits):
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / (e.sum(axis=1, keepdims=True) + 0.01)


MUTATIONS = {"softmax": (T, "softmax", _bad_softmax)}
