"""Layer primitives: convolution, batch normalization, activations, head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, add_channel_bias, einsum, make_op, mean, tile0

PADDING_MODES = ("zero-dirichlet", "neumann-reflect")
ACTIVATIONS = ("relu", "hardtanh", "hardball", "softball", "identity")


# -- convolution ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    groups: int = 1
    padding_mode: str = "zero-dirichlet"
    weight_shared: bool = False

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.stride <= 0 or self.groups <= 0:
            raise ValueError("stride and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )
        if self.weight_shared and self.groups != self.in_channels:
            raise ValueError("weight sharing requires depthwise convolution (groups == in_channels)")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def multiplier(self) -> int:
        return self.out_channels // self.in_channels

    def weight_shape(self) -> tuple[int, ...]:
        kh, kw = self.kernel
        if self.weight_shared:
            return (self.multiplier, 1, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def param_count(self) -> int:
        return int(np.prod(self.weight_shape()))


def _np_mode(padding_mode: str) -> str:
    # neumann: ghost cell mirrors the adjacent interior cell
    return "constant" if padding_mode == "zero-dirichlet" else "symmetric"


def pad2d(x: np.ndarray, ph: int, pw: int, padding_mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, width, mode=_np_mode(padding_mode))


def unpad2d_grad(gp: np.ndarray, ph: int, pw: int, padding_mode: str) -> np.ndarray:
    """Adjoint of :func:`pad2d`."""
    H = gp.shape[-2] - 2 * ph
    W = gp.shape[-1] - 2 * pw
    if padding_mode == "zero-dirichlet":
        return gp[..., ph : ph + H, pw : pw + W].copy()
    rows = gp[..., ph : ph + H, :].copy()
    for i in range(ph):
        rows[..., i, :] += gp[..., ph - 1 - i, :]
        rows[..., H - 1 - i, :] += gp[..., ph + H + i, :]
    out = rows[..., pw : pw + W].copy()
    for j in range(pw):
        out[..., j] += rows[..., pw - 1 - j]
        out[..., W - 1 - j] += rows[..., pw + W + j]
    return out


def _out_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def _window(xp: np.ndarray, a: int, b: int, Ho: int, Wo: int, s: int) -> np.ndarray:
    return xp[:, :, a : a + s * (Ho - 1) + 1 : s, b : b + s * (Wo - 1) + 1 : s]


def _depthwise(x: Tensor, w: Tensor, stride: int, padding_mode: str) -> Tensor:
    xd, wd = x.data, w.data
    N, C, H, W = xd.shape
    M = wd.shape[0] // C
    kh, kw = wd.shape[2:]
    ph, pw = kh // 2, kw // 2
    Ho, Wo = _out_size(H, kh, stride), _out_size(W, kw, stride)
    xp = pad2d(xd, ph, pw, padding_mode)
    xr = np.repeat(xp, M, axis=1) if M > 1 else xp
    out = np.zeros((N, C * M, Ho, Wo), dtype=xd.dtype)
    # fixed row-major accumulation over kernel taps
    for a in range(kh):
        for b in range(kw):
            out += wd[:, 0, a, b][None, :, None, None] * _window(xr, a, b, Ho, Wo, stride)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxr = np.zeros_like(xr)
            for a in range(kh):
                for b in range(kw):
                    _window(gxr, a, b, Ho, Wo, stride)[...] += g * wd[:, 0, a, b][None, :, None, None]
            gxp = gxr.reshape(N, C, M, *xp.shape[2:]).sum(axis=2) if M > 1 else gxr
            gx = unpad2d_grad(gxp, ph, pw, padding_mode)
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for a in range(kh):
                for b in range(kw):
                    gw[:, 0, a, b] = np.einsum("nchw,nchw->c", g, _window(xr, a, b, Ho, Wo, stride))
        return gx, gw

    return make_op(out, (x, w), bw, "depthwise_conv")


def _grouped(x: Tensor, w: Tensor, stride: int, groups: int, padding_mode: str) -> Tensor:
    xd, wd = x.data, w.data
    N, C, H, W = xd.shape
    O, Cg, kh, kw = wd.shape
    G = groups
    ph, pw = kh // 2, kw // 2
    Ho, Wo = _out_size(H, kh, stride), _out_size(W, kw, stride)
    xp = pad2d(xd, ph, pw, padding_mode).reshape(N, G, Cg, H + 2 * ph, W + 2 * pw)
    wg = wd.reshape(G, O // G, Cg, kh, kw)
    out = np.zeros((N, G, O // G, Ho, Wo), dtype=xd.dtype)

    def win(arr, a, b):
        return arr[..., a : a + stride * (Ho - 1) + 1 : stride, b : b + stride * (Wo - 1) + 1 : stride]

    for a in range(kh):
        for b in range(kw):
            out += np.einsum("goc,ngchw->ngohw", wg[..., a, b], win(xp, a, b))

    def bw(g):
        g5 = g.reshape(N, G, O // G, Ho, Wo)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    win(gxp, a, b)[...] += np.einsum("goc,ngohw->ngchw", wg[..., a, b], g5)
            gx = unpad2d_grad(gxp.reshape(N, C, *xp.shape[3:]), ph, pw, padding_mode)
        if w.requires_grad:
            gwg = np.zeros_like(wg)
            for a in range(kh):
                for b in range(kw):
                    gwg[..., a, b] = np.einsum("ngohw,ngchw->goc", g5, win(xp, a, b))
            gw = gwg.reshape(wd.shape)
        return gx, gw

    return make_op(out.reshape(N, O, Ho, Wo), (x, w), bw, "conv2d")


def conv2d(x: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation with "same" padding of the chosen boundary type.

    With ``spec.weight_shared`` the weights are a single ``[m, 1, kh, kw]``
    bank that is repeated across all input channels before use.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [N, C, H, W], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape():
        raise ValueError(f"conv2d: weights {weights.shape} do not match {spec.weight_shape()}")
    kh, kw = spec.kernel
    if spec.padding_mode == "neumann-reflect" and (x.shape[2] < kh // 2 or x.shape[3] < kw // 2):
        raise ValueError("input too small for reflective padding of this kernel")
    if spec.groups == spec.in_channels:
        w = tile0(weights, spec.in_channels) if spec.weight_shared else weights
        return _depthwise(x, w, spec.stride, spec.padding_mode)
    return _grouped(x, weights, spec.stride, spec.groups, spec.padding_mode)


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Channel mixing ``w @ x`` at every pixel; ``w`` is ``[out, in]``."""
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1x1: weights {w.shape} do not fit input {x.shape}")
    return einsum("oc,nchw->nohw", w, x)


# -- activations -------------------------------------------------------------------


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    min_val: float = -1.0
    max_val: float = 1.0
    radius: Optional[float] = None  # None: square root of the channel count

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "hardtanh" and not self.min_val < self.max_val:
            raise ValueError("hardtanh needs min_val < max_val")
        if self.radius is not None and self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def is_radial(self) -> bool:
        return self.kind in ("hardball", "softball")

    def radius_for(self, channels: int) -> float:
        return self.radius if self.radius is not None else math.sqrt(channels)


def apply_activation(x: Tensor, act: Activation) -> Tensor:
    """Apply ``act``; hardball/softball take the norm over axis 1 (channels)."""
    xd = x.data
    kind = act.kind
    if kind == "identity":
        return x
    if kind == "relu":
        mask = xd > 0
        return make_op(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,), "relu")
    if kind == "hardtanh":
        lo, hi = act.min_val, act.max_val
        inside = (xd >= lo) & (xd <= hi)
        return make_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "hardtanh")
    R = act.radius_for(xd.shape[1])
    norm = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True))
    if kind == "hardball":
        outside = norm >= R
        safe = np.where(outside, norm, 1.0)
        factor = np.where(outside, R / safe, 1.0)
        out = xd * factor

        def bw(g):
            unit = xd / safe
            radial = np.sum(unit * g, axis=1, keepdims=True)
            return (np.where(outside, factor * (g - unit * radial), g),)

        return make_op(out, (x,), bw, "hardball")
    s = np.sqrt(1.0 + (norm / R) ** 2)
    out = xd / s

    def bw_soft(g):
        dot = np.sum(xd * g, axis=1, keepdims=True)
        return (g / s - xd * dot / (R * R * s**3),)

    return make_op(out, (x,), bw_soft, "softball")


# -- batch normalization ------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, **kw) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization over every axis except 1.

    Training mode normalizes with batch statistics and updates the running
    estimates in place (unbiased variance, exponential averaging).
    """
    if x.shape[1] != state.channels:
        raise ValueError(f"batchnorm: {x.shape[1]} channels, state has {state.channels}")
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    gamma, beta = state.gamma, state.beta
    gd = gamma.data.reshape(bshape)
    if state.training:
        count = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        count = None
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if count is None:
            gx = gxhat * inv.reshape(bshape)
        else:
            s1 = gxhat.sum(axis=axes).reshape(bshape)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) / count * (count * gxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), bw, "batchnorm")


# -- head -------------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not fit weights {w.shape}")
    out = einsum("ni,oi->no", x, w)
    return out if b is None else add_channel_bias(out, b)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with max-subtraction stabilization."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be [N, K], got {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {z.shape[0]}")
    idx = labels.astype(np.int64)
    if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= z.shape[1]):
        raise ValueError(f"labels must be integers in [0, {z.shape[1]})")
    N = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(logsum - shifted[np.arange(N), idx])

    def bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(N), idx] -= 1.0
        return (p * (g / N),)

    return make_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
