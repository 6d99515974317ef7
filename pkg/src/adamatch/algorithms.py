"""AdaMatch training step, its ablations, FixMatch+ and BaselineBN.

One step of AdaMatch:

1. weak/strong views of the labeled (source) and unlabeled (target) batches;
2. a forward pass on the concatenated batch (batch-norm statistics updated)
   and a second pass on the source views alone (statistics frozen);
3. random per-logit interpolation between the two sets of source logits;
4. pseudo-labels from the weak target view, rescaled so their class
   distribution follows the source prediction distribution;
5. a confidence mask whose threshold is relative to the mean top-1
   confidence on weak source images;
6. loss = source cross-entropy + mu(t) * masked target cross-entropy.

The arithmetic after the forward passes lives in :func:`step_losses` so it
can be replayed on recorded logits. Reductions there run strictly left to
right (see :func:`adamatch.nn.tensor.seq_sum`).
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .augment import AugmentedPair, AugmentPolicy, augment_pair
from .data import BatchPair
from .nn.layers import BnMode, Model, ShapeError, model_apply
from .nn.optim import Optimizer, backward, lr_at, sgd_step
from .nn.tensor import (NumericalError, Tensor, add, cross_entropy, cross_entropy_rows, div, mul,
                        seq_sum, softmax, stop_gradient, sum_)

DIVISOR_FLOOR = 1e-6
DIST_TOL = 1e-6


@dataclass
class AdaMatchConfig:
    tau: float = 0.9
    uratio: int = 3
    target_prior: Optional[np.ndarray] = None
    dist_buffer_len: int = 128

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.uratio < 1:
            raise ValueError("uratio must be a positive integer")
        if self.dist_buffer_len < 1:
            raise ValueError("dist_buffer_len must be positive")
        if self.target_prior is not None:
            prior = np.asarray(self.target_prior, dtype=np.float64)
            if prior.ndim != 1 or np.any(prior < 0) or abs(prior.sum() - 1) > DIST_TOL:
                raise ValueError("target_prior must be a distribution summing to 1")
            self.target_prior = prior


class Variant(enum.Enum):
    FULL = "Full"
    NO_LOGIT_INTERP = "NoLogitInterp"
    NO_DIST_ALIGN = "NoDistAlign"
    NO_REL_THRESHOLD = "NoRelThreshold"


@dataclass
class DualLogits:
    z_sl_mixed: Tensor  # source rows of the combined pass, weak then strong
    z_tu: Tensor  # target rows of the combined pass, weak then strong
    z_sl_solo: Optional[Tensor]  # source-only pass; None when it was skipped


@dataclass
class StepReport:
    loss_source: float
    loss_target: float
    mu: float
    mask_rate: float
    c_tau: float
    pseudo_labels: np.ndarray
    mask: np.ndarray
    total: float = 0.0
    lr: float = 0.0


class PseudoLabelState:
    """Ring buffers of per-batch mean weak predictions for source and target."""

    def __init__(self, maxlen: int = 128):
        self.src = deque(maxlen=maxlen)
        self.tgt = deque(maxlen=maxlen)

    def push(self, src_mean: np.ndarray, tgt_mean: np.ndarray) -> None:
        for name, v in (("source", src_mean), ("target", tgt_mean)):
            if abs(float(seq_sum(v)) - 1.0) > DIST_TOL:
                raise ValueError(f"{name} entry does not sum to 1")
        self.src.append(np.array(src_mean, copy=True))
        self.tgt.append(np.array(tgt_mean, copy=True))

    def copy(self) -> "PseudoLabelState":
        out = PseudoLabelState(self.src.maxlen)
        out.src.extend(v.copy() for v in self.src)
        out.tgt.extend(v.copy() for v in self.tgt)
        return out

    def __len__(self):
        return len(self.src)


# ----------------------------------------------------------------- pieces

def batch_mean(rows: np.ndarray) -> np.ndarray:
    return seq_sum(rows, axis=0) / len(rows)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    return rows / seq_sum(rows, axis=1)[:, None]


def estimate_expectations(state: PseudoLabelState):
    """Means of the buffered source and target distributions (target floored)."""
    if not state.src or not state.tgt:
        raise ValueError("pseudo-label state is empty; push at least one batch first")
    src = batch_mean(np.stack([v / seq_sum(v) for v in state.src]))
    tgt = batch_mean(np.stack([v / seq_sum(v) for v in state.tgt]))
    return src, np.maximum(tgt, np.asarray(DIVISOR_FLOOR, dtype=tgt.dtype))


def distribution_align(y_hat_tu_w: np.ndarray, src_mean, tgt_mean, target_prior=None) -> np.ndarray:
    """Rescale rows by reference/target class ratios, then renormalize rows."""
    ref = np.asarray(target_prior if target_prior is not None else src_mean, dtype=y_hat_tu_w.dtype)
    tgt = np.asarray(tgt_mean, dtype=y_hat_tu_w.dtype)
    if np.any(tgt <= 0):
        raise ValueError("target expectation has a zero entry; cannot divide")
    return normalize_rows(y_hat_tu_w * (ref / tgt))


def relative_threshold(y_hat_sl_w: np.ndarray, tau: float) -> float:
    """tau times the mean top-1 probability of the weak source predictions."""
    if len(y_hat_sl_w) == 0:
        raise ValueError("empty source batch")
    top1 = y_hat_sl_w.max(axis=1)
    return y_hat_sl_w.dtype.type(tau) * (seq_sum(top1) / len(top1))


def confidence_mask(y_tilde_tu_w: np.ndarray, c_tau) -> np.ndarray:
    return (y_tilde_tu_w.max(axis=1) >= c_tau).astype(y_tilde_tu_w.dtype)


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """One-hot argmax rows; ties go to the lowest class index."""
    out = np.zeros_like(probs)
    out[np.arange(len(probs)), probs.argmax(axis=1)] = 1
    return out


def interpolate_logits(z_prime: Tensor, z_double: Tensor, rng=None, lam=None) -> Tensor:
    """lam * z' + (1 - lam) * z'' with an independent U(0,1) factor per logit."""
    if z_prime.shape != z_double.shape:
        raise ShapeError(f"logit shapes differ: {z_prime.shape} vs {z_double.shape}")
    if lam is None:
        lam = rng.random(z_prime.shape, dtype=np.float64).astype(z_prime.dtype)
    lam = np.asarray(lam, dtype=z_prime.dtype)
    return add(mul(lam, z_prime), mul(lam.dtype.type(1) - lam, z_double))


def warmup_mu(t: float, total: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 0.5 - math.cos(min(math.pi, 2.0 * math.pi * t / total)) / 2.0


# ------------------------------------------------------------ forward passes

def forward_dual(model: Model, pair_sl: AugmentedPair, pair_tu: AugmentedPair,
                 second_pass: bool = True) -> DualLogits:
    """Combined pass (BN stats updated) and, optionally, a source-only pass (frozen)."""
    n_sl, n_tu = len(pair_sl.weak), len(pair_tu.weak)
    if pair_sl.strong.shape != pair_sl.weak.shape or pair_tu.strong.shape != pair_tu.weak.shape:
        raise ShapeError("weak and strong views differ in shape")
    x = np.concatenate([pair_sl.weak, pair_sl.strong, pair_tu.weak, pair_tu.strong])
    z = model_apply(model, x, BnMode.TRAIN_UPDATE)
    z_sl_mixed, z_tu = z[: 2 * n_sl], z[2 * n_sl: 2 * n_sl + 2 * n_tu]
    z_sl_solo = None
    if second_pass:
        z_sl_solo = model_apply(model, np.concatenate([pair_sl.weak, pair_sl.strong]),
                                BnMode.TRAIN_FROZEN)
    return DualLogits(z_sl_mixed, z_tu, z_sl_solo)


# --------------------------------------------------------------- the losses

@dataclass
class LossTerms:
    total: Tensor
    loss_source: Tensor
    loss_target: Tensor
    pseudo_labels: np.ndarray
    mask: np.ndarray
    c_tau: float
    y_hat_sl_w: np.ndarray = field(repr=False, default=None)
    y_tilde_tu_w: np.ndarray = field(repr=False, default=None)


def source_loss(y_onehot: np.ndarray, z_sl: Tensor) -> Tensor:
    n = len(y_onehot)
    return add(cross_entropy(y_onehot, z_sl[:n]), cross_entropy(y_onehot, z_sl[n:]))


def step_losses(z_sl: Tensor, z_tu: Tensor, y_onehot: np.ndarray, state: PseudoLabelState,
                cfg: AdaMatchConfig, mu: float, align: bool = True,
                relative: bool = True) -> LossTerms:
    """Everything after the logits are known.

    ``z_sl`` are the (already interpolated) source logits, weak rows then
    strong rows; ``z_tu`` likewise for the target. ``state`` is updated with
    the current batch before alignment.
    """
    n_sl, n_tu = len(y_onehot), z_tu.shape[0] // 2
    if z_sl.shape[0] != 2 * n_sl:
        raise ShapeError("source logits must hold weak and strong rows for every label")
    loss_src = source_loss(y_onehot, z_sl)

    y_hat_sl_w = softmax(z_sl.data[:n_sl])
    y_hat_tu_w = softmax(z_tu.data[:n_tu])
    state.push(batch_mean(y_hat_sl_w), batch_mean(y_hat_tu_w))
    if align:
        src_mean, tgt_mean = estimate_expectations(state)
        y_tilde = distribution_align(y_hat_tu_w, src_mean, tgt_mean, cfg.target_prior)
    else:
        y_tilde = y_hat_tu_w
    pseudo = hard_labels(y_tilde)
    if relative:
        c_tau = relative_threshold(y_hat_sl_w, cfg.tau)
    else:
        c_tau = y_tilde.dtype.type(cfg.tau)
    mask = confidence_mask(y_tilde, c_tau)

    ce = cross_entropy_rows(stop_gradient(Tensor(pseudo)), z_tu[n_tu:])
    loss_tgt = div(sum_(mul(ce, mask)), n_tu)
    total = add(loss_src, mul(loss_tgt, z_tu.dtype.type(mu)))
    return LossTerms(total, loss_src, loss_tgt, pseudo, mask, float(c_tau), y_hat_sl_w, y_tilde)


# ------------------------------------------------------------------ steps

def _check_batch(batch: BatchPair, uratio: int):
    if batch.n_tu != uratio * batch.n_sl:
        raise ShapeError(f"unlabeled batch has {batch.n_tu} rows, expected {uratio} x {batch.n_sl}")


def _apply_update(model: Model, total: Tensor, opt: Optional[Optimizer], t, T) -> float:
    if opt is None:
        return 0.0
    lr = lr_at(opt, t, T)
    sgd_step(model, backward(total, model), opt, lr)
    return lr


def _report(terms: LossTerms, mu: float, lr: float) -> StepReport:
    mask = terms.mask
    return StepReport(
        loss_source=float(terms.loss_source.data),
        loss_target=float(terms.loss_target.data),
        mu=mu,
        mask_rate=float(mask.mean()) if len(mask) else 0.0,
        c_tau=terms.c_tau,
        pseudo_labels=terms.pseudo_labels,
        mask=mask,
        total=float(terms.total.data),
        lr=lr,
    )


def ssl_step(model: Model, batch: BatchPair, cfg: AdaMatchConfig, state: PseudoLabelState,
             t, T, rng: np.random.Generator, policy: AugmentPolicy, opt: Optional[Optimizer] = None,
             interp: bool = True, align: bool = True, relative: bool = True,
             record: Optional[dict] = None) -> StepReport:
    """Shared AdaMatch / ablation / FixMatch+ step; flags switch components off.

    Without ``opt`` the step computes the report but leaves parameters alone
    (batch-norm running statistics still advance).
    """
    _check_batch(batch, cfg.uratio)
    pair_sl = augment_pair(batch.x_sl, policy, rng)
    pair_tu = augment_pair(batch.x_tu, policy, rng)
    dual = forward_dual(model, pair_sl, pair_tu, second_pass=interp)
    if interp:
        lam = rng.random(dual.z_sl_mixed.shape, dtype=np.float64).astype(dual.z_sl_mixed.dtype)
        z_sl = interpolate_logits(dual.z_sl_mixed, dual.z_sl_solo, lam=lam)
    else:
        lam = None
        z_sl = dual.z_sl_mixed
    mu = warmup_mu(t, T)
    if record is not None:
        record.update(dual=dual, lam=lam, mu=mu, state_before=state.copy())
    terms = step_losses(z_sl, dual.z_tu, batch.y_onehot.astype(z_sl.dtype), state, cfg, mu,
                        align=align, relative=relative)
    if record is not None:
        record["terms"] = terms
    lr = _apply_update(model, terms.total, opt, t, T)
    return _report(terms, mu, lr)


def adamatch_step(model, batch, cfg, state, t, T, rng, policy, opt=None, record=None) -> StepReport:
    return ssl_step(model, batch, cfg, state, t, T, rng, policy, opt, record=record)


def fixmatch_plus_step(model, batch, cfg, state, t, T, rng, policy, opt=None, record=None) -> StepReport:
    """FixMatch with distribution alignment: one forward pass, absolute threshold."""
    return ssl_step(model, batch, cfg, state, t, T, rng, policy, opt,
                    interp=False, relative=False, record=record)


def ablate(variant):
    """Step function for one exclude-one-component variant."""
    try:
        variant = Variant(variant) if not isinstance(variant, Variant) else variant
    except ValueError:
        raise ValueError(f"unknown ablation variant {variant!r}") from None
    flags = {
        Variant.FULL: {},
        Variant.NO_LOGIT_INTERP: {"interp": False},
        Variant.NO_DIST_ALIGN: {"align": False},
        Variant.NO_REL_THRESHOLD: {"relative": False},
    }[variant]

    def step(model, batch, cfg, state, t, T, rng, policy, opt=None, record=None):
        return ssl_step(model, batch, cfg, state, t, T, rng, policy, opt, record=record, **flags)

    step.variant = variant
    return step


def baseline_bn_step(model, batch, t, T, rng, policy, opt=None, uratio=None, record=None) -> StepReport:
    """Source-only loss, but target images share the batch so BN statistics see them."""
    if uratio is not None:
        _check_batch(batch, uratio)
    pair_sl = augment_pair(batch.x_sl, policy, rng)
    pair_tu = augment_pair(batch.x_tu, policy, rng)
    dual = forward_dual(model, pair_sl, pair_tu, second_pass=False)
    y = batch.y_onehot.astype(dual.z_sl_mixed.dtype)
    loss = source_loss(y, dual.z_sl_mixed)
    if record is not None:
        record.update(dual=dual)
    lr = _apply_update(model, loss, opt, t, T)
    n_tu = batch.n_tu
    return StepReport(float(loss.data), 0.0, 0.0, 0.0, 0.0,
                      np.zeros((n_tu, batch.k), dtype=y.dtype), np.zeros(n_tu, dtype=y.dtype),
                      total=float(loss.data), lr=lr)


def supervised_step(model, batch, t, T, rng, policy, opt=None, record=None) -> StepReport:
    """Plain supervised training on the labeled batch; unlabeled rows are ignored."""
    pair_sl = augment_pair(batch.x_sl, policy, rng)
    z = model_apply(model, np.concatenate([pair_sl.weak, pair_sl.strong]), BnMode.TRAIN_UPDATE)
    y = batch.y_onehot.astype(z.dtype)
    loss = source_loss(y, z)
    if record is not None:
        record.update(z=z)
    lr = _apply_update(model, loss, opt, t, T)
    n_tu = batch.n_tu
    return StepReport(float(loss.data), 0.0, 0.0, 0.0, 0.0,
                      np.zeros((n_tu, batch.k), dtype=y.dtype), np.zeros(n_tu, dtype=y.dtype),
                      total=float(loss.data), lr=lr)


__all__ = [
    "AdaMatchConfig", "DualLogits", "LossTerms", "NumericalError", "PseudoLabelState",
    "StepReport", "Variant", "ablate", "adamatch_step", "baseline_bn_step", "batch_mean",
    "confidence_mask", "distribution_align", "estimate_expectations", "fixmatch_plus_step",
    "forward_dual", "hard_labels", "interpolate_logits", "relative_threshold", "source_loss",
    "ssl_step", "step_losses", "supervised_step", "warmup_mu",
]
