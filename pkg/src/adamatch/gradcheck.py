"""Central finite-difference check of the autodiff core on a tiny DeskNet."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.layers import BnMode, build_desknet, model_apply
from .nn.optim import backward
from .nn.tensor import cross_entropy

# finite-difference step per precision
FD_STEP = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-3}
MINI = dict(input_side=28, channels=1, k=10, width=4)


@dataclass
class GradCheck:
    seed: int
    dtype: str
    rel_error: float
    checked: int
    skipped: int  # coordinates whose ReLU pattern flips inside [theta - h, theta + h]


def _loss_and_trace(model, x, y, mode):
    trace = []
    z = model_apply(model, x, mode, trace=trace)
    return cross_entropy(y, z), trace


def _same_pattern(a, b):
    return all(np.array_equal(p > 0, q > 0) for p, q in zip(a, b))


def gradcheck(seed: int, dtype=np.float64, batch: int = 4, coords: int | None = None,
              mode: BnMode = BnMode.TRAIN_FROZEN) -> GradCheck:
    """Compare backprop gradients with central differences for one random model and batch.

    The error is ``max|analytic - numeric|`` over the checked coordinates,
    divided by the larger of the full analytic gradient's max-norm and the
    numeric max-norm. ``coords`` limits the check to a random subset of
    parameter entries (all entries when ``None``). Entries whose
    perturbation moves a ReLU input across zero are skipped: the loss is not
    differentiable there and a difference quotient means nothing.
    """
    dtype = np.dtype(dtype)
    h = FD_STEP[dtype]
    rng = np.random.default_rng([seed, 7])
    model = build_desknet(**MINI, seed=seed, dtype=dtype)
    # perturb BN affine params away from (1, 0) so their gradients are exercised
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data = (1 + 0.2 * rng.standard_normal(p.shape)).astype(dtype)
        elif name.endswith(".beta"):
            p.data = (0.2 * rng.standard_normal(p.shape)).astype(dtype)
    x = rng.random((batch, MINI["input_side"], MINI["input_side"], MINI["channels"]))
    y = np.eye(MINI["k"], dtype=dtype)[rng.integers(0, MINI["k"], batch)]

    loss, _ = _loss_and_trace(model, x, y, mode)
    grads = backward(loss, model)
    entries = [(name, i) for name, p in model.trainable().items() for i in range(p.data.size)]
    if coords is not None and coords < len(entries):
        pick = rng.choice(len(entries), size=coords, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    analytic, numeric, skipped = [], [], 0
    for name, i in entries:
        p = model.params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + dtype.type(h)
        lp, tp = _loss_and_trace(model, x, y, mode)
        flat[i] = orig - dtype.type(h)
        lm, tm = _loss_and_trace(model, x, y, mode)
        flat[i] = orig
        if not _same_pattern(tp, tm):
            skipped += 1
            continue
        numeric.append((float(lp.data) - float(lm.data)) / (2 * h))
        analytic.append(float(grads[name].reshape(-1)[i]))
    a, n = np.asarray(analytic), np.asarray(numeric)
    if len(a) == 0:
        return GradCheck(seed, dtype.name, 0.0, 0, skipped)
    full = max(float(np.abs(g).max()) for g in grads.values())
    scale = max(full, np.abs(n).max(), np.finfo(np.float64).tiny)
    return GradCheck(seed, dtype.name, float(np.abs(a - n).max() / scale), len(a), skipped)
