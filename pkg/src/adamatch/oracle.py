"""Straight-line scalar reimplementation of the AdaMatch loss pipeline.

Everything here is plain Python loops over numpy scalars, summing left to
right, with no array reductions. It shares no code with
:mod:`adamatch.algorithms` and serves as the reference the vectorized step
must match bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleResult:
    pseudo_labels: list  # one-hot rows
    mask: list
    c_tau: float
    loss_source: float
    loss_target: float
    total: float


def _row_log_softmax(row, f):
    m = row[0]
    for v in row[1:]:
        if v > m:
            m = v
    shifted = [f(v - m) for v in row]
    s = None
    for v in shifted:
        e = np.exp(v)
        s = e if s is None else f(s + e)
    lse = np.log(s)
    return [f(v - lse) for v in shifted]


def _row_softmax(row, f):
    m = row[0]
    for v in row[1:]:
        if v > m:
            m = v
    e = [np.exp(f(v - m)) for v in row]
    s = e[0]
    for v in e[1:]:
        s = f(s + v)
    return [f(v / s) for v in e]


def _ce_row(p, z, f):
    ls = _row_log_softmax(z, f)
    acc = None
    for pj, lj in zip(p, ls):
        term = f(pj * lj)
        acc = term if acc is None else f(acc + term)
    return f(-acc)


def _mean_rows(rows, f):
    s = rows[0]
    for v in rows[1:]:
        s = f(s + v)
    return f(s / len(rows))


def _column_mean(rows, f):
    k = len(rows[0])
    out = []
    for j in range(k):
        s = rows[0][j]
        for r in rows[1:]:
            s = f(s + r[j])
        out.append(f(s / len(rows)))
    return out


def _renorm(v, f):
    s = v[0]
    for x in v[1:]:
        s = f(s + x)
    return [f(x / s) for x in v]


def adamatch_losses(z_mixed, z_solo, lam, z_tu, labels, src_buffer, tgt_buffer, tau, mu,
                    capacity=128, target_prior=None, floor=1e-6, interp=True, align=True,
                    relative=True) -> OracleResult:
    """Recompute pseudo-labels, mask, threshold and losses from recorded logits.

    ``z_mixed``/``z_solo``/``lam`` hold 2*n_sl source rows (weak then strong),
    ``z_tu`` holds 2*n_tu target rows, ``labels`` are integer classes.
    ``src_buffer``/``tgt_buffer`` are the buffered batch-mean distributions
    from earlier steps, oldest first; together with the current batch only the
    newest ``capacity`` entries are used.
    """
    z_mixed = np.asarray(z_mixed)
    dtype = z_mixed.dtype
    f = dtype.type
    n_sl, k = len(labels), z_mixed.shape[1]
    n_tu = len(z_tu) // 2

    # random per-logit interpolation between combined-batch and source-only logits
    z_sl = []
    for i in range(2 * n_sl):
        row = []
        for j in range(k):
            if interp:
                a = f(lam[i][j] * z_mixed[i][j])
                b = f(f(f(1) - lam[i][j]) * z_solo[i][j])
                row.append(f(a + b))
            else:
                row.append(z_mixed[i][j])
        z_sl.append(row)
    z_tu = [[f(v) for v in r] for r in np.asarray(z_tu)]

    # supervised term on both source views
    onehot = [[f(1) if j == labels[i] else f(0) for j in range(k)] for i in range(n_sl)]
    ce_w = _mean_rows([_ce_row(onehot[i], z_sl[i], f) for i in range(n_sl)], f)
    ce_s = _mean_rows([_ce_row(onehot[i], z_sl[n_sl + i], f) for i in range(n_sl)], f)
    loss_source = f(ce_w + ce_s)

    y_sl = [_row_softmax(z_sl[i], f) for i in range(n_sl)]
    y_tu = [_row_softmax(z_tu[i], f) for i in range(n_tu)]

    if align:
        srcs = ([[f(v) for v in e] for e in src_buffer] + [_column_mean(y_sl, f)])[-capacity:]
        tgts = ([[f(v) for v in e] for e in tgt_buffer] + [_column_mean(y_tu, f)])[-capacity:]
        e_src = _column_mean([_renorm(e, f) for e in srcs], f)
        e_tgt = _column_mean([_renorm(e, f) for e in tgts], f)
        e_tgt = [max(v, f(floor)) for v in e_tgt]
        ref = [f(v) for v in target_prior] if target_prior is not None else e_src
        ratio = [f(ref[j] / e_tgt[j]) for j in range(k)]
        y_tilde = [_renorm([f(r[j] * ratio[j]) for j in range(k)], f) for r in y_tu]
    else:
        y_tilde = y_tu

    pseudo, rowmax = [], []
    for r in y_tilde:
        best = 0
        for j in range(1, k):
            if r[j] > r[best]:
                best = j
        pseudo.append([f(1) if j == best else f(0) for j in range(k)])
        rowmax.append(r[best])

    if relative:
        s = None
        for r in y_sl:
            top = r[0]
            for v in r[1:]:
                if v > top:
                    top = v
            s = top if s is None else f(s + top)
        c_tau = f(f(tau) * f(s / n_sl))
    else:
        c_tau = f(tau)
    mask = [f(1) if m >= c_tau else f(0) for m in rowmax]

    acc = None
    for i in range(n_tu):
        term = f(_ce_row(pseudo[i], z_tu[n_tu + i], f) * mask[i])
        acc = term if acc is None else f(acc + term)
    loss_target = f(acc / n_tu)
    total = f(loss_source + f(loss_target * f(mu)))
    return OracleResult(pseudo, mask, float(c_tau), float(loss_source), float(loss_target),
                        float(total))


def warmup_mu(t, total):
    return 0.5 - math.cos(min(math.pi, 2.0 * math.pi * t / total)) / 2.0
