"""Layers, the DeskNet classifier and batch-norm statistics modes.

Images are channels-last ``(n, h, w, c)``. A :class:`Model` is an ordered
list of layer records plus a flat ``name -> Tensor`` parameter table and a
``name -> (mean, var)`` table of batch-norm running statistics.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _accum, _node, check_finite, matmul, mean, relu

INPUT_MEAN = 0.5
INPUT_STD = 0.25
BN_MOMENTUM = 0.99
BN_EPS = 1e-5
STRIDES = (2, 1, 2, 1)


class BnMode(enum.Enum):
    TRAIN_UPDATE = "train_update"  # batch stats, running stats advanced
    TRAIN_FROZEN = "train_frozen"  # batch stats, running stats untouched
    EVAL = "eval"  # running stats, running stats untouched


class ShapeError(ValueError):
    pass


# ----------------------------------------------------------------- fused ops

def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 'same'-padded convolution, NHWC input, HWIO weights."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"conv expects {cin} input channels, got {c}")
    ph, pw = kh // 2, kw // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in taps], axis=-1
    ).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            dxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, t, :]
            _accum(x, dxp[:, ph:ph + h, pw:pw + wd, :])

    return _node(out, (x, w), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running, mode: BnMode,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalize over every axis but the last.

    ``running`` is a ``(mean, var)`` pair of arrays. Returns the output and the
    new running pair (the same objects unless ``mode`` is TRAIN_UPDATE).
    """
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    if mode is BnMode.EVAL:
        mu, var = running
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = gamma.data * xhat + beta.data

        def bw(g):
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            _accum(x, g * (gamma.data * inv))

        return _node(out.astype(x.dtype), (x, gamma, beta), bw), running

    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = np.square(xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        _accum(gamma, dgamma)
        _accum(beta, dbeta)
        if x.requires_grad:
            dxhat_sum = dbeta * gamma.data
            dxhat_dot = dgamma * gamma.data
            _accum(x, (gamma.data * inv) * g - (inv / m) * (dxhat_sum + xhat * dxhat_dot))

    if mode is BnMode.TRAIN_UPDATE:
        rm, rv = running
        running = (
            (momentum * rm + (1 - momentum) * mu).astype(rm.dtype),
            (momentum * rv + (1 - momentum) * var).astype(rv.dtype),
        )
    return _node(out.astype(x.dtype), (x, gamma, beta), bw), running


# ------------------------------------------------------------------- model

@dataclass
class Layer:
    kind: str  # conv2d | batchnorm | relu | gap | dense
    name: str = ""
    stride: int = 1


@dataclass
class Model:
    layers: list
    params: dict
    bn_stats: dict = field(default_factory=dict)
    input_side: int = 32
    channels: int = 3
    k: int = 10

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def trainable(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def has_bn(self) -> bool:
        return any(layer.kind == "batchnorm" for layer in self.layers)

    def decay_exempt(self, name: str) -> bool:
        """True for parameters excluded from weight decay (BN scale and offset)."""
        return name.endswith((".gamma", ".beta"))

    def copy(self) -> "Model":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                  for n, p in self.params.items()}
        stats = {n: (m.copy(), v.copy()) for n, (m, v) in self.bn_stats.items()}
        return Model(list(self.layers), params, stats, self.input_side, self.channels, self.k)

    def state_arrays(self) -> dict:
        """Flat name -> array view of everything a checkpoint must hold."""
        out = {n: p.data for n, p in self.params.items()}
        for n, (m, v) in self.bn_stats.items():
            out[f"{n}.running_mean"] = m
            out[f"{n}.running_var"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for n, p in self.params.items():
            p.data = np.asarray(arrays[n], dtype=p.dtype).reshape(p.shape).copy()
        for n, (m, v) in self.bn_stats.items():
            self.bn_stats[n] = (
                np.asarray(arrays[f"{n}.running_mean"], dtype=m.dtype).reshape(m.shape).copy(),
                np.asarray(arrays[f"{n}.running_var"], dtype=v.dtype).reshape(v.shape).copy(),
            )

    def __call__(self, images, bn_mode: BnMode = BnMode.EVAL) -> Tensor:
        return model_apply(self, images, bn_mode)


def model_apply(model: Model, images, bn_mode: BnMode, trace=None) -> Tensor:
    """Run the network and return (n, k) logits.

    ``trace``, when a list, receives the pre-activation array of every ReLU
    (used by gradient checks to spot kinks).
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c) images, got shape {x.shape}")
    n, h, w, c = x.shape
    if n < 1:
        raise ShapeError("empty batch")
    if c != model.channels:
        raise ShapeError(f"model expects {model.channels} channels, got {c}")
    if (h, w) != (model.input_side, model.input_side):
        raise ShapeError(f"model expects {model.input_side}x{model.input_side} images, got {h}x{w}")
    dtype = model.dtype
    out = Tensor(((x - INPUT_MEAN) / INPUT_STD).astype(dtype, copy=False))
    p = model.params
    for layer in model.layers:
        if layer.kind == "conv2d":
            out = conv2d(out, p[f"{layer.name}.w"], layer.stride)
        elif layer.kind == "batchnorm":
            out, new = batch_norm(out, p[f"{layer.name}.gamma"], p[f"{layer.name}.beta"],
                                  model.bn_stats[layer.name], bn_mode)
            if bn_mode is BnMode.TRAIN_UPDATE:
                model.bn_stats[layer.name] = new
        elif layer.kind == "relu":
            if trace is not None:
                trace.append(out.data.copy())
            out = relu(out)
        elif layer.kind == "gap":
            out = mean(out, axis=(1, 2))
        elif layer.kind == "dense":
            out = matmul(out, p[f"{layer.name}.w"]) + p[f"{layer.name}.b"]
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    check_finite(out.data, "logits")
    return out


def desknet_param_count(channels: int, k: int, width: int, batchnorm: bool = True) -> int:
    """Closed-form parameter count of :func:`build_desknet`."""
    convs = 9 * channels * width + 3 * 9 * width * width
    bn = 4 * 2 * width if batchnorm else 0
    return convs + bn + width * k + k


def build_desknet(input_side: int = 32, channels: int = 3, k: int = 10, width: int = 16,
                  seed: int = 0, dtype=np.float32, batchnorm: bool = True) -> Model:
    """Small all-convolutional classifier.

    Two stages of ``[conv3x3 - BN - ReLU] x 2``; the first conv of each stage
    has stride 2, so a 32x32 input ends at 8x8 before global average pooling
    and a dense layer to ``k`` logits. Conv weights carry no bias (BN follows).
    """
    if input_side not in (28, 32):
        raise ValueError(f"input_side must be 28 or 32, got {input_side}")
    if width < 4:
        raise ValueError(f"width must be >= 4, got {width}")
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    rng = np.random.default_rng(seed)
    layers, params, stats = [], {}, {}

    def add_param(name, arr, trainable=True):
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=trainable, name=name)

    cin = channels
    for i, stride in enumerate(STRIDES, start=1):
        name = f"conv{i}"
        fan_in = 9 * cin
        add_param(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, cin, width)))
        layers.append(Layer("conv2d", name, stride))
        if batchnorm:
            bn = f"bn{i}"
            add_param(f"{bn}.gamma", np.ones(width))
            add_param(f"{bn}.beta", np.zeros(width))
            stats[bn] = (np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype))
            layers.append(Layer("batchnorm", bn))
        layers.append(Layer("relu"))
        cin = width
    layers.append(Layer("gap"))
    add_param("fc.w", rng.normal(0.0, np.sqrt(2.0 / width), size=(width, k)))
    add_param("fc.b", np.zeros(k))
    layers.append(Layer("dense", "fc"))
    return Model(layers, params, stats, input_side, channels, k)
