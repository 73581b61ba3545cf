"""Quasi-linear hyperbolic residual blocks.

Each block is one forward-Euler step of a first-order system in which the
coefficient of the spatial derivatives depends linearly on the state.  The
derivative operators are 3x3 depthwise kernels (optionally one bank shared
by all channels), the coefficient matrices are 1x1 convolutions, and the
nonlinearity is the element-wise product of the two branches.

Expanded channels are laid out as ``j * m + r``: input channel ``j``,
kernel ``r``.  Kernels ``r < m/2`` play the role of d/dx, the rest d/dy.

Variants (input width ``n``, output width ``n_out``, expansion ``m``):

``eq3``  ``P[(K * u) . (M u)]`` with per-kernel mixing ``M`` and projection ``P``.
``eq4``  ``(C u) . P(K * u)``; one mixing matrix multiplies both directions.
``eq5``  ``sum_r (K_r * u) . (M_r u)``; each channel sees only its own derivatives.
``eq6``  ``P[K * (u . C u)]``; derivative of the product, one shared ``C``.
``eq7``  ``P[K_r * (u . M_r u)]``; derivative of the product, per-kernel mixing.
``tensor``  ``sum_jk A_ijk u_k Dx u_j + B_ijk u_k Dy u_j`` with full 3-tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from .nn import Activation, BatchNormState, ConvSpec, apply_activation, batchnorm, conv1x1, conv2d
from .tensor import Tensor, einsum, group_sum, repeat_channels, reshape, subsample, take, tile0

MAX_TENSOR_CHANNELS = 16
ACTIVATION_POSITIONS = ("after_residual", "before_residual")


class BlockVariant(str, Enum):
    EQ3 = "eq3"
    EQ4 = "eq4"
    EQ5 = "eq5"
    EQ6 = "eq6"
    EQ7 = "eq7"
    TENSOR = "tensor"

    @property
    def has_projection(self) -> bool:
        return self not in (BlockVariant.EQ5, BlockVariant.TENSOR)

    @property
    def conservation_form(self) -> bool:
        return self in (BlockVariant.EQ6, BlockVariant.EQ7)


@dataclass(frozen=True)
class BlockConfig:
    variant: BlockVariant
    channels: int
    in_channels: Optional[int] = None
    expansion: int = 4
    weight_shared: bool = True
    stride: int = 1
    activation: Optional[Activation] = None
    batchnorm: bool = True
    padding_mode: str = "zero-dirichlet"
    activation_position: str = "after_residual"

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant(self.variant))
        if self.activation_position not in ACTIVATION_POSITIONS:
            raise ValueError(f"activation_position must be one of {ACTIVATION_POSITIONS}")
        if self.in_channels is None:
            object.__setattr__(self, "in_channels", self.channels)
        if self.channels <= 0 or self.in_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.variant is BlockVariant.TENSOR:
            if self.in_channels > MAX_TENSOR_CHANNELS:
                raise ValueError(
                    f"tensor-form blocks are limited to {MAX_TENSOR_CHANNELS} channels "
                    f"(got {self.in_channels})"
                )
        elif self.expansion < 2 or self.expansion % 2:
            raise ValueError(f"expansion must be an even number >= 2, got {self.expansion}")

    @property
    def n_in(self) -> int:
        return self.in_channels

    @property
    def m(self) -> int:
        return 2 if self.variant is BlockVariant.TENSOR else self.expansion

    @property
    def needs_skip(self) -> bool:
        return self.stride != 1 or self.in_channels != self.channels


def _bn_names(prefix: str) -> tuple[list[str], list[str]]:
    return [f"{prefix}.gamma", f"{prefix}.beta"], [f"{prefix}.running_mean", f"{prefix}.running_var"]


def block_shapes(cfg: BlockConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Shapes of the trainable weights and of the running-statistics buffers."""
    v, n, no, m = cfg.variant, cfg.n_in, cfg.channels, cfg.m
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}

    def bn(prefix, channels):
        if cfg.batchnorm:
            p, b = _bn_names(prefix)
            params.update({k: (channels,) for k in p})
            buffers.update({k: (channels,) for k in b})

    params["dw"] = (m, 1, 3, 3) if cfg.weight_shared else (m * n, 1, 3, 3)
    bn("bn1", m * n)
    if v in (BlockVariant.EQ3, BlockVariant.EQ5, BlockVariant.EQ7):
        params["mix"] = (m * n, n)
    elif v is BlockVariant.EQ4:
        params["mix"] = (no, n)
    elif v is BlockVariant.EQ6:
        params["mix"] = (n, n)
    else:
        params["A3"] = (n, n, n)
        params["B3"] = (n, n, n)
    if v.has_projection:
        params["proj"] = (no, m * n)
        bn("bn2", no)
        if cfg.needs_skip:
            params["skip"] = (no, n)
            bn("skip_bn", no)
    else:
        bn("bn2", n)
        if cfg.needs_skip:
            params["transition"] = (no, n)
            bn("transition_bn", no)
    return params, buffers


def init_block(cfg: BlockConfig, rng: np.random.Generator, depth: int = 1) -> tuple[dict, dict]:
    """Random weights: 3x3 ~ N(0, 1/9), 1x1 ~ N(0, 1/fan_in), tensors ~ N(0, 1/n^2).

    The residual branch carries an extra ``1/depth`` factor standing in for
    the time step.
    """
    shapes, bshapes = block_shapes(cfg)
    tau = 1.0 / depth
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name == "dw":
            w = rng.normal(0.0, 1.0 / 3.0, shape)
        elif name in ("A3", "B3"):
            w = rng.normal(0.0, 1.0 / shape[0], shape) * tau
        elif name.endswith(".gamma"):
            w = np.full(shape, tau if name.startswith("bn2") else 1.0)
        elif name.endswith(".beta"):
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
            if name == "proj":
                w *= tau
        params[name] = w
    buffers = {
        name: (np.zeros(s) if name.endswith("running_mean") else np.ones(s)) for name, s in bshapes.items()
    }
    return params, buffers


def central_difference_bank(h: float = 1.0) -> np.ndarray:
    """``[2, 1, 3, 3]`` cross-correlation kernels for d/dx (columns) and d/dy (rows)."""
    bank = np.zeros((2, 1, 3, 3))
    bank[0, 0, 1, 0], bank[0, 0, 1, 2] = -0.5 / h, 0.5 / h
    bank[1, 0, 0, 1], bank[1, 0, 2, 1] = -0.5 / h, 0.5 / h
    return bank


def _bn(x: Tensor, weights, buffers, prefix: str, training: bool) -> Tensor:
    key = f"{prefix}.gamma"
    if key not in weights:
        return x
    state = BatchNormState(
        gamma=weights[key],
        beta=weights[f"{prefix}.beta"],
        running_mean=buffers[f"{prefix}.running_mean"],
        running_var=buffers[f"{prefix}.running_var"],
        training=training,
    )
    return batchnorm(x, state)


def _as_tensors(weights: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}


def block_forward(
    u: Tensor,
    cfg: BlockConfig,
    weights: Mapping,
    buffers: Optional[Mapping[str, np.ndarray]] = None,
    training: bool = False,
) -> Tensor:
    """One residual block; returns ``[N, cfg.channels, H', W']``."""
    if u.ndim != 4 or u.shape[1] != cfg.n_in:
        raise ValueError(f"block expects [N, {cfg.n_in}, H, W] input, got {u.shape}")
    w = _as_tensors(weights)
    expected, _ = block_shapes(cfg)
    for name, shape in expected.items():
        if name not in w:
            raise ValueError(f"missing block weight {name!r}")
        if tuple(w[name].shape) != shape:
            raise ValueError(f"weight {name!r} has shape {w[name].shape}, expected {shape}")
    buffers = buffers if buffers is not None else {}
    v, n, m, s = cfg.variant, cfg.n_in, cfg.m, cfg.stride
    pad = cfg.padding_mode

    def dw_spec(stride):
        return ConvSpec(n, m * n, (3, 3), stride, n, pad, cfg.weight_shared)

    def bn(x, prefix):
        return _bn(x, w, buffers, prefix, training)

    if v is BlockVariant.EQ3:
        d = bn(conv2d(u, w["dw"], dw_spec(s)), "bn1")
        c = conv1x1(subsample(u, s), w["mix"])
        r = bn(conv1x1(d * c, w["proj"]), "bn2")
    elif v is BlockVariant.EQ4:
        d = bn(conv2d(u, w["dw"], dw_spec(s)), "bn1")
        c = conv1x1(subsample(u, s), w["mix"])
        r = bn(c * conv1x1(d, w["proj"]), "bn2")
    elif v is BlockVariant.EQ5:
        d = bn(conv2d(u, w["dw"], dw_spec(1)), "bn1")
        r = bn(group_sum(d * conv1x1(u, w["mix"]), m), "bn2")
    elif v is BlockVariant.EQ6:
        q = u * conv1x1(u, w["mix"])
        d = bn(conv2d(q, w["dw"], dw_spec(s)), "bn1")
        r = bn(conv1x1(d, w["proj"]), "bn2")
    elif v is BlockVariant.EQ7:
        q = repeat_channels(u, m) * conv1x1(u, w["mix"])
        bank = tile0(w["dw"], n) if cfg.weight_shared else w["dw"]
        spec = ConvSpec(m * n, m * n, (3, 3), s, m * n, pad, False)
        d = bn(conv2d(q, bank, spec), "bn1")
        r = bn(conv1x1(d, w["proj"]), "bn2")
    else:
        d = bn(conv2d(u, w["dw"], dw_spec(1)), "bn1")
        r = bn(_tensor_rhs(u, d, w["A3"], w["B3"]), "bn2")

    pre = cfg.activation is not None and cfg.activation_position == "before_residual"
    if pre:
        r = apply_activation(r, cfg.activation)
    if v.has_projection:
        skip = u
        if cfg.needs_skip:
            skip = bn(conv1x1(subsample(u, s), w["skip"]), "skip_bn")
        out = skip + r
    else:
        out = u + r
        if cfg.needs_skip:
            out = bn(conv1x1(subsample(out, s), w["transition"]), "transition_bn")
    if cfg.activation is not None and not pre:
        out = apply_activation(out, cfg.activation)
    return out


def _tensor_rhs(u: Tensor, d: Tensor, A3: Tensor, B3: Tensor) -> Tensor:
    N, n, H, W = u.shape
    d5 = reshape(d, (N, n, 2, H, W))
    dx, dy = take(d5, 0, axis=2), take(d5, 1, axis=2)
    return einsum("ijk,nkhw,njhw->nihw", A3, u, dx) + einsum("ijk,nkhw,njhw->nihw", B3, u, dy)


def tensorform_forward(
    u: Tensor,
    A3,
    B3,
    tau: float = 1.0,
    h: float = 1.0,
    padding_mode: str = "zero-dirichlet",
) -> Tensor:
    """``u + tau * sum_jk (A_ijk u_k Dx u_j + B_ijk u_k Dy u_j)`` with central differences."""
    if not isinstance(u, Tensor):
        u = Tensor(u)
    n = u.shape[1]
    if n > MAX_TENSOR_CHANNELS:
        raise ValueError(f"tensor form limited to {MAX_TENSOR_CHANNELS} channels, got {n}")
    A3 = A3 if isinstance(A3, Tensor) else Tensor(A3)
    B3 = B3 if isinstance(B3, Tensor) else Tensor(B3)
    if A3.shape != (n, n, n) or B3.shape != (n, n, n):
        raise ValueError(f"coefficient tensors must be {(n, n, n)}, got {A3.shape} and {B3.shape}")
    spec = ConvSpec(n, 2 * n, (3, 3), 1, n, padding_mode, True)
    d = conv2d(u, Tensor(central_difference_bank(h)), spec)
    return u + _tensor_rhs(u, d, A3, B3) * tau


def split_mixing(cfg: BlockConfig, weights: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-kernel views of the stacked 1x1 weights: ``mix[r]`` and ``proj[r]``."""
    m, n = cfg.m, cfg.n_in
    out = {}
    if "mix" in weights and weights["mix"].shape[0] == m * n:
        out["mix"] = np.asarray(weights["mix"]).reshape(n, m, n).transpose(1, 0, 2)
    if "proj" in weights:
        out["proj"] = np.asarray(weights["proj"]).reshape(-1, n, m).transpose(2, 0, 1)
    return out


def stack_mixing(per_kernel: np.ndarray) -> np.ndarray:
    """Inverse of ``split_mixing`` for mixing matrices: ``[m, n, n] -> [m*n, n]``."""
    m, n, k = per_kernel.shape
    return per_kernel.transpose(1, 0, 2).reshape(n * m, k)


def stack_projection(per_kernel: np.ndarray) -> np.ndarray:
    """Inverse of ``split_mixing`` for projections: ``[m, n_out, n] -> [n_out, n*m]``."""
    m, no, n = per_kernel.shape
    return per_kernel.transpose(1, 2, 0).reshape(no, n * m)
