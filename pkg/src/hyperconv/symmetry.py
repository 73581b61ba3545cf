"""Channel-mixing symmetries of hyperbolic networks.

A change of channel coordinates ``u -> T u`` on every stream of a network,
with each weight co-transformed, leaves the prediction function unchanged
whenever the block nonlinearities commute with ``T``.  For the full
coefficient tensors that is every invertible ``T`` (up to the activation);
for the factored blocks only permutations and diagonal scalings are exact.

Every weight has a *role* saying which stream transform acts on its output
side and which inverse acts on its input side.  Transforming a model and the
sparsification objective both read the same role table.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .blocks import BlockConfig, BlockVariant
from .network import Model
from .nn import BatchNormState
from .tensor import Tensor, abs_, einsum, exp, reshape, scale, square, sum_, transpose

KINDS = ("permutation", "diagonal", "orthogonal", "general")
EXACT_FACTORED_KINDS = ("permutation", "diagonal")
BN_EPS = BatchNormState.eps
SPARSITY_THRESHOLD = 1e-6


# -- transforms ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChannelTransform:
    kind: str
    T: np.ndarray
    T_inv: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        T = np.asarray(self.T, dtype=np.float64)
        Ti = np.asarray(self.T_inv, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1] or Ti.shape != T.shape:
            raise ValueError(f"transform must be square, got {T.shape}")
        n = T.shape[0]
        if np.max(np.abs(T @ Ti - np.eye(n))) > 1e-12:
            raise ValueError("T_inv is not the inverse of T")
        off = T - np.diag(np.diag(T))
        if self.kind == "permutation":
            if not (np.all((T == 0) | (T == 1)) and np.all(T.sum(0) == 1) and np.all(T.sum(1) == 1)):
                raise ValueError("permutation transform must have one 1 per row and column")
        elif self.kind == "diagonal":
            if np.any(off != 0) or np.any(np.diag(T) == 0):
                raise ValueError("diagonal transform needs zero off-diagonal and nonzero diagonal")
        elif self.kind == "orthogonal":
            if np.max(np.abs(T @ T.T - np.eye(n))) > 1e-12:
                raise ValueError("orthogonal transform must satisfy T T^T = I")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "T_inv", Ti)

    @property
    def n(self) -> int:
        return self.T.shape[0]

    # constructors
    @classmethod
    def identity(cls, n: int, kind: str = "permutation") -> "ChannelTransform":
        return cls(kind, np.eye(n), np.eye(n))

    @classmethod
    def from_permutation(cls, perm: Sequence[int]) -> "ChannelTransform":
        """``(T u)_i = u_{perm[i]}``."""
        perm = np.asarray(perm)
        n = len(perm)
        if sorted(perm.tolist()) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
        T = np.zeros((n, n))
        T[np.arange(n), perm] = 1.0
        return cls("permutation", T, T.T.copy())

    @classmethod
    def from_diagonal(cls, d: Sequence[float]) -> "ChannelTransform":
        d = np.asarray(d, dtype=np.float64)
        if np.any(d == 0):
            raise ValueError("diagonal transform needs nonzero entries")
        return cls("diagonal", np.diag(d), np.diag(1.0 / d))

    @classmethod
    def from_orthogonal(cls, Q: np.ndarray) -> "ChannelTransform":
        Q = np.asarray(Q, dtype=np.float64)
        return cls("orthogonal", Q, Q.T.copy())

    @classmethod
    def from_matrix(cls, T: np.ndarray, max_condition: float = 1e10) -> "ChannelTransform":
        T = np.asarray(T, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError(f"transform must be square, got {T.shape}")
        if not np.isfinite(np.linalg.cond(T)) or np.linalg.cond(T) > max_condition:
            raise ValueError("transform matrix is singular or too ill-conditioned")
        return cls("general", T, np.linalg.inv(T))

    @classmethod
    def random(cls, kind: str, n: int, rng: np.random.Generator) -> "ChannelTransform":
        if kind == "permutation":
            return cls.from_permutation(rng.permutation(n))
        if kind == "diagonal":
            return cls.from_diagonal(np.exp(rng.uniform(-1.0, 1.0, n)))
        if kind == "orthogonal":
            return cls.from_orthogonal(random_orthogonal(n, rng))
        if kind == "general":
            while True:
                T = np.eye(n) + rng.normal(0.0, 1.0 / np.sqrt(n), (n, n))
                if np.linalg.cond(T) < 50:
                    return cls.from_matrix(T)
        raise ValueError(f"unknown transform kind {kind!r}")

    def compose(self, other: "ChannelTransform") -> "ChannelTransform":
        """``self after other``: matrix ``self.T @ other.T``."""
        kind = self.kind if self.kind == other.kind else "general"
        if kind == "general" and {self.kind, other.kind} <= {"permutation", "orthogonal"}:
            kind = "orthogonal"
        return ChannelTransform(kind, self.T @ other.T, other.T_inv @ self.T_inv)

    def __matmul__(self, other: "ChannelTransform") -> "ChannelTransform":
        return self.compose(other)

    def inverse(self) -> "ChannelTransform":
        return ChannelTransform(self.kind, self.T_inv, self.T)

    def is_identity(self) -> bool:
        return np.array_equal(self.T, np.eye(self.n))

    def expanded(self, m: int) -> np.ndarray:
        """Action on expanded channels laid out as ``j * m + r``."""
        return np.kron(self.T, np.eye(m))

    def expanded_inv(self, m: int) -> np.ndarray:
        return np.kron(self.T_inv, np.eye(m))

    def diagonal(self) -> np.ndarray:
        return np.diag(self.T).copy()

    def permutation(self) -> np.ndarray:
        return np.argmax(self.T, axis=1)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(n, n)))
    return Q * np.sign(np.diag(R))


# -- tensor form -------------------------------------------------------------------------


def transform_tensor_form(A: np.ndarray, t: ChannelTransform) -> np.ndarray:
    """Coefficient tensor in the new coordinates.

    With ``A[i, j, k]`` multiplying ``u_k d u_j``, the transformed tensor is
    ``sum_{jkl} T_ij A_jkl Tinv_lm Tinv_kr`` stored at ``[i, r, m]``.
    """
    A = np.asarray(A, dtype=np.float64)
    n = t.n
    if A.shape != (n, n, n):
        raise ValueError(f"coefficient tensor must be {(n, n, n)}, got {A.shape}")
    if t.is_identity():
        return A.copy()
    return np.einsum("ij,jkl,lm,kr->irm", t.T, A, t.T_inv, t.T_inv, optimize=True)


def symmetrize_jk(A: np.ndarray) -> np.ndarray:
    """``(A_ijk + A_ikj) / 2``: the part seen by the conservation form."""
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + A.transpose(0, 2, 1))


def antisymmetric_jk(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A - A.transpose(0, 2, 1))


# -- roles ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class Role:
    """How a stream transform acts on one weight.

    ``matrix``: ``W' = L W R^-1`` where ``L`` is the expanded transform of
    stream ``left`` (skipped for diagonal kinds when ``left_scaled`` is False)
    and ``R`` the expanded transform of stream ``right``.
    ``rows``: per-channel kernels of an expanded stream, permuted.
    ``bn``: normalization statistics of an expanded stream.
    ``tensor``: full coefficient tensor of stream ``left``.
    ``conv_out``: output channels of a dense convolution.
    """

    kind: str
    left: Optional[object] = None
    left_m: int = 1
    right: Optional[object] = None
    right_m: int = 1
    left_scaled: bool = True


def block_roles(cfg: BlockConfig, s_in="in", s_out="out") -> dict[str, Role]:
    v, m = cfg.variant, cfg.m
    roles: dict[str, Role] = {}
    if not cfg.weight_shared:
        roles["dw"] = Role("rows", s_in, m)
    if cfg.batchnorm:
        roles["bn1"] = Role("bn", s_in, m)
    if v in (BlockVariant.EQ3, BlockVariant.EQ5, BlockVariant.EQ7):
        roles["mix"] = Role("matrix", s_in, m, s_in, 1, left_scaled=False)
    elif v is BlockVariant.EQ4:
        roles["mix"] = Role("matrix", s_out, 1, s_in, 1, left_scaled=False)
    elif v is BlockVariant.EQ6:
        roles["mix"] = Role("matrix", s_in, 1, s_in, 1, left_scaled=False)
    else:
        roles["A3"] = Role("tensor", s_in)
        roles["B3"] = Role("tensor", s_in)
    if v.has_projection:
        roles["proj"] = Role("matrix", s_out, 1, s_in, m)
        if cfg.batchnorm:
            roles["bn2"] = Role("bn", s_out)
        if cfg.needs_skip:
            roles["skip"] = Role("matrix", s_out, 1, s_in, 1)
            if cfg.batchnorm:
                roles["skip_bn"] = Role("bn", s_out)
    else:
        if cfg.batchnorm:
            roles["bn2"] = Role("bn", s_in)
        if cfg.needs_skip:
            roles["transition"] = Role("matrix", s_out, 1, s_in, 1)
            if cfg.batchnorm:
                roles["transition_bn"] = Role("bn", s_out)
    return roles


@dataclass(frozen=True)
class StreamLayout:
    """Stream ids of a network: 0 is the stem output, stages may share."""

    stage_stream: tuple[int, ...]
    widths: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.widths)


def stream_layout(model: Model) -> StreamLayout:
    cfg = model.config
    entry = {s: bcfg for prefix, s, bcfg in model.blocks if prefix.endswith(".0")}
    widths = [cfg.stem_channels]
    stage_stream = []
    current = 0
    for s, channels in enumerate(cfg.stage_channels):
        if entry[s].needs_skip:
            widths.append(channels)
            current = len(widths) - 1
        stage_stream.append(current)
    return StreamLayout(tuple(stage_stream), tuple(widths))


def network_roles(model: Model) -> dict[str, Role]:
    layout = stream_layout(model)
    cfg = model.config
    roles: dict[str, Role] = {"stem.conv2": Role("conv_out", 0)}
    if cfg.batchnorm:
        roles["stem.bn2"] = Role("bn", 0)
    for prefix, s, bcfg in model.blocks:
        first = prefix.endswith(".0")
        s_out = layout.stage_stream[s]
        s_in = (0 if s == 0 else layout.stage_stream[s - 1]) if first else s_out
        for name, role in block_roles(bcfg, s_in, s_out).items():
            roles[f"{prefix}.{name}"] = role
    roles["head.weight"] = Role("matrix", None, 1, layout.stage_stream[-1], 1)
    return roles


# -- applying roles ----------------------------------------------------------------------------


def _bn_cotransform(params, buffers, prefix, expanded: np.ndarray, kind: str) -> None:
    """Permute or rescale eval-mode batchnorm so its output moves with its input."""
    g, b = params[f"{prefix}.gamma"], params[f"{prefix}.beta"]
    mu, var = buffers[f"{prefix}.running_mean"], buffers[f"{prefix}.running_var"]
    if kind == "permutation":
        idx = np.argmax(expanded, axis=1)
        params[f"{prefix}.gamma"], params[f"{prefix}.beta"] = g[idx], b[idx]
        buffers[f"{prefix}.running_mean"], buffers[f"{prefix}.running_var"] = mu[idx], var[idx]
        return
    d = np.diag(expanded)
    new_var = d * d * (var + BN_EPS) - BN_EPS
    if np.any(new_var < 0):
        raise ValueError(
            f"cannot rescale batchnorm {prefix!r}: scaling factor too small for the stored variance"
        )
    params[f"{prefix}.gamma"] = np.abs(d) * g
    params[f"{prefix}.beta"] = d * b
    buffers[f"{prefix}.running_mean"] = d * mu
    buffers[f"{prefix}.running_var"] = new_var


def _apply_roles(
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    roles: Mapping[str, Role],
    transforms: Mapping[object, ChannelTransform],
    kind: str,
) -> None:
    scaling = kind == "diagonal"
    for name, role in roles.items():
        def t(stream):
            return transforms.get(stream) if stream is not None else None

        if role.kind == "matrix":
            W = params[name]
            L, R = t(role.left), t(role.right)
            if L is not None and not L.is_identity() and (role.left_scaled or not scaling):
                W = L.expanded(role.left_m) @ W
            if R is not None and not R.is_identity():
                W = W @ R.expanded_inv(role.right_m)
            params[name] = W
        elif role.kind == "tensor":
            L = t(role.left)
            if L is not None:
                params[name] = transform_tensor_form(params[name], L)
        elif role.kind == "conv_out":
            L = t(role.left)
            if L is not None and not L.is_identity():
                params[name] = np.einsum("oa,aihw->oihw", L.T, params[name])
        elif role.kind == "rows":
            L = t(role.left)
            if L is not None and not L.is_identity() and kind != "diagonal":
                W = params[name]
                params[name] = (L.expanded(role.left_m) @ W.reshape(W.shape[0], -1)).reshape(W.shape)
        elif role.kind == "bn":
            L = t(role.left)
            if L is not None and not L.is_identity() and kind in EXACT_FACTORED_KINDS:
                _bn_cotransform(params, buffers, name, L.expanded(role.left_m), kind)


def _common_kind(transforms: Sequence[ChannelTransform]) -> str:
    kinds = {t.kind for t in transforms if not t.is_identity()}
    if not kinds:
        return "permutation"
    if len(kinds) == 1:
        return kinds.pop()
    if kinds <= {"permutation", "orthogonal"}:
        return "orthogonal"
    return "general"


def _check_exactness(blocks: Sequence[BlockConfig], kind: str, transforms: Sequence[ChannelTransform], batchnorm: bool):
    """Raise unless the transform is an exact symmetry of these blocks."""
    for cfg in blocks:
        act = cfg.activation.kind if cfg.activation is not None else "identity"
        factored = cfg.variant is not BlockVariant.TENSOR
        if kind in ("orthogonal", "general"):
            if factored:
                raise ValueError(
                    f"{kind} transforms are not symmetries of factored {cfg.variant.value} blocks; "
                    "only permutations and diagonal scalings are exact (strict=False forces it)"
                )
            if batchnorm:
                raise ValueError(f"{kind} transforms need a network without batchnorm")
            if not cfg.weight_shared:
                raise ValueError(f"{kind} transforms need a weight-shared derivative bank")
        if kind == "orthogonal" and act not in ("identity", "hardball", "softball"):
            raise ValueError(f"orthogonal transforms need a radial or identity activation, got {act}")
        if kind == "general" and act != "identity":
            raise ValueError(f"general transforms need the identity activation, got {act}")
        if kind == "diagonal" and act != "identity":
            positive = all(np.all(t.diagonal() > 0) for t in transforms)
            if not (act == "relu" and positive):
                raise ValueError(f"diagonal scalings commute with {act} only as positive scalings of relu")


def transform_block(
    cfg: BlockConfig,
    weights: Mapping[str, np.ndarray],
    buffers: Optional[Mapping[str, np.ndarray]] = None,
    t_in: Optional[ChannelTransform] = None,
    t_out: Optional[ChannelTransform] = None,
    strict: bool = True,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Co-transform one block so that ``block'(T_in u) = T_out block(u)``.

    ``t_out`` defaults to ``t_in``; they must coincide for blocks without a
    width change.  Buffers hold eval-mode batchnorm statistics.
    """
    if t_in is None:
        raise ValueError("t_in is required")
    t_out = t_in if t_out is None else t_out
    if t_in.n != cfg.n_in or t_out.n != cfg.channels:
        raise ValueError(
            f"transform widths ({t_in.n}, {t_out.n}) do not match block widths ({cfg.n_in}, {cfg.channels})"
        )
    if not cfg.needs_skip and not np.array_equal(t_in.T, t_out.T):
        raise ValueError("a block without width change must use the same input and output transform")
    kind = _common_kind([t_in, t_out])
    if strict:
        _check_exactness([cfg], kind, [t_in, t_out], cfg.batchnorm)
    params = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in weights.items()}
    bufs = {k: np.array(v, dtype=np.float64) for k, v in (buffers or {}).items()}
    _apply_roles(params, bufs, block_roles(cfg), {"in": t_in, "out": t_out}, kind)
    return params, bufs


def transform_factored_block(cfg: BlockConfig, weights, buffers=None, t: Optional[ChannelTransform] = None, t_out=None, strict=True):
    """``transform_block`` restricted to factored variants (permutation or diagonal)."""
    if cfg.variant is BlockVariant.TENSOR:
        raise ValueError("use transform_block or transform_tensor_form for tensor-form blocks")
    return transform_block(cfg, weights, buffers, t, t_out, strict)


def _stream_transforms(
    model: Model,
    transforms: Sequence[Optional[ChannelTransform]],
    stem_transform: Optional[ChannelTransform],
) -> dict[int, ChannelTransform]:
    cfg = model.config
    layout = stream_layout(model)
    if len(transforms) != len(cfg.stage_channels):
        raise ValueError(f"need one transform per stage ({len(cfg.stage_channels)}), got {len(transforms)}")
    out: dict[int, ChannelTransform] = {}
    for s, t in enumerate(transforms):
        sid = layout.stage_stream[s]
        if t is None:
            t = ChannelTransform.identity(layout.widths[sid])
        if t.n != cfg.stage_channels[s]:
            raise ValueError(f"stage {s} has width {cfg.stage_channels[s]}, transform has {t.n}")
        if sid in out and not np.array_equal(out[sid].T, t.T):
            raise ValueError(
                f"stage {s} keeps the width of the stream before it, so its transform must match that stream's"
            )
        out[sid] = t
    if stem_transform is not None:
        if stem_transform.n != cfg.stem_channels:
            raise ValueError(f"stem has width {cfg.stem_channels}, transform has {stem_transform.n}")
        if 0 in out and not np.array_equal(out[0].T, stem_transform.T):
            raise ValueError("stage 0 shares the stem stream; stem_transform must equal the stage-0 transform")
        out[0] = stem_transform
    out.setdefault(0, ChannelTransform.identity(cfg.stem_channels))
    return out


def transform_network(
    model: Model,
    transforms: Sequence[Optional[ChannelTransform]],
    stem_transform: Optional[ChannelTransform] = None,
    strict: bool = True,
) -> Model:
    """New model whose predictions equal ``model``'s on every input.

    ``transforms[s]`` acts on the channels of stage ``s`` (``None`` is the
    identity).  A stage whose entry block keeps the width shares the stream of
    the stage before it, and the stem output shares stage 0's stream in that
    case.  The head weight is right-multiplied by the last inverse.
    """
    streams = _stream_transforms(model, transforms, stem_transform)
    kind = _common_kind(list(streams.values()))
    if strict:
        _check_exactness(
            [b for _, _, b in model.blocks], kind, list(streams.values()), model.config.batchnorm
        )
    params = {k: v.data.copy() for k, v in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    _apply_roles(params, buffers, network_roles(model), streams, kind)
    new = Model(model.config, {k: Tensor(v, requires_grad=True) for k, v in params.items()}, buffers)
    new.training = model.training
    return new


# -- verification --------------------------------------------------------------------------------


def sparsity(W: np.ndarray, threshold: float = SPARSITY_THRESHOLD) -> tuple[int, int]:
    """``(near-zero count, total)`` with the cutoff relative to max |W|."""
    W = np.asarray(W)
    peak = np.max(np.abs(W)) if W.size else 0.0
    return int(np.sum(np.abs(W) <= threshold * peak)), int(W.size)


def coefficient_weight_names(model: Model) -> list[str]:
    """Block mixing weights a channel transform can sparsify (not stem, head or kernels)."""
    return [k for k, r in network_roles(model).items() if r.kind in ("matrix", "tensor") and not k.startswith("head")]


@dataclass
class SymmetryReport:
    deviations: np.ndarray
    argmax_agreement: float
    weight_norms: dict[str, float] = field(default_factory=dict)
    sparsity: dict[str, tuple[int, int]] = field(default_factory=dict)
    threshold: float = SPARSITY_THRESHOLD

    def __post_init__(self):
        if len(self.deviations) == 0:
            raise ValueError("probe set is empty")

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.deviations))

    @property
    def near_zero(self) -> int:
        return sum(c for c, _ in self.sparsity.values())

    @property
    def total_entries(self) -> int:
        return sum(t for _, t in self.sparsity.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["probe", "deviation"])
        for i, d in enumerate(self.deviations):
            w.writerow([i, repr(float(d))])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"probes: {len(self.deviations)}",
            f"max deviation: {self.max_deviation:.3e}",
            f"argmax agreement: {100 * self.argmax_agreement:.2f}%",
            f"near-zero coefficient entries (<= {self.threshold:g} x max): {self.near_zero} / {self.total_entries}",
        ]
        return "\n".join(lines)


def verify_invariance(model_a: Model, model_b: Model, probes: np.ndarray, batch_size: int = 64) -> SymmetryReport:
    """Compare eval-mode logits of two models with the same configuration."""
    if model_a.config != model_b.config:
        raise ValueError("models have different configurations")
    probes = np.asarray(probes, dtype=np.float64)
    if len(probes) == 0:
        raise ValueError("probe set is empty")
    la = model_a.predict_logits(probes, batch_size)
    lb = model_b.predict_logits(probes, batch_size)
    dev = np.max(np.abs(la - lb), axis=1)
    agree = float(np.mean(np.argmax(la, axis=1) == np.argmax(lb, axis=1)))
    names = coefficient_weight_names(model_b)
    norms = {k: float(np.linalg.norm(v.data)) for k, v in model_b.params.items()}
    sp = {k: sparsity(model_b.params[k].data) for k in names}
    return SymmetryReport(dev, agree, norms, sp)


def find_degenerate_pairs(A: np.ndarray, C: np.ndarray, tol: float = 1e-12) -> list[tuple[int, int]]:
    """Pairs ``j < j'`` with ``A_ij C_jk == A_ij' C_j'k`` for every ``i, k``.

    Such a pair lets a rotation in the ``(j, j')`` plane keep the factored
    product intact; for generic weights there are none.
    """
    A, C = np.asarray(A, dtype=np.float64), np.asarray(C, dtype=np.float64)
    if A.shape[1] != C.shape[0]:
        raise ValueError(f"A {A.shape} and C {C.shape} do not share the middle index")
    outer = np.einsum("ij,jk->jik", A, C)
    scale_ = max(np.max(np.abs(outer)), 1.0)
    pairs = []
    for j, jp in itertools.combinations(range(A.shape[1]), 2):
        if np.max(np.abs(outer[j] - outer[jp])) <= tol * scale_:
            pairs.append((j, jp))
    return pairs


def block_degenerate_pairs(cfg: BlockConfig, weights: Mapping[str, np.ndarray], tol: float = 1e-12) -> dict[int, list]:
    """Degenerate pairs per derivative kernel of an ``eq3`` block (projection times mixing)."""
    if cfg.variant is not BlockVariant.EQ3:
        raise ValueError("degenerate-pair detection is defined for eq3 blocks")
    from .blocks import split_mixing

    w = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in weights.items()}
    parts = split_mixing(cfg, w)
    return {r: find_degenerate_pairs(parts["proj"][r], parts["mix"][r], tol) for r in range(cfg.m)}


# -- sparsification search ---------------------------------------------------------------------


@dataclass
class SparsifyResult:
    transforms: list[ChannelTransform]
    stem_transform: ChannelTransform
    model: Model
    objective_before: float
    objective_after: float
    sparsity_before: tuple[int, int]
    sparsity_after: tuple[int, int]
    report: Optional[SymmetryReport] = None


def _stream_terms(model: Model, roles: Mapping[str, Role], stream: int):
    terms = []
    for name in coefficient_weight_names(model):
        role = roles[name]
        if role.left == stream or role.right == stream:
            terms.append((name, role, model.params[name].data))
    return terms


def _kron_eye(S: Tensor, m: int) -> Tensor:
    if m == 1:
        return S
    n = S.shape[0]
    K = einsum("ab,rs->arbs", S, Tensor(np.eye(m)))
    return reshape(K, (n * m, n * m))


def _term_tensor(role: Role, W: np.ndarray, stream: int, S: Tensor, S_inv: Tensor, kind: str) -> Tensor:
    X = Tensor(W)
    if role.kind == "tensor":
        return einsum("ij,jkl,lm,kr->irm", S, X, S_inv, S_inv)
    if role.left == stream and (role.left_scaled or kind != "diagonal"):
        X = einsum("ab,bc->ac", _kron_eye(S, role.left_m), X)
    if role.right == stream:
        X = einsum("ab,bc->ac", X, _kron_eye(S_inv, role.right_m))
    return X


def _terms_l1(terms, stream: int, S: Tensor, S_inv: Tensor, kind: str, banded: bool = False) -> Tensor:
    total = None
    for _, role, W in terms:
        X = _term_tensor(role, W, stream, S, S_inv, kind)
        A = abs_(X)
        if banded:
            A = A * Tensor(_band_weights(X.shape, role))
        term = sum_(A)
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


def _band_weights(shape, role: Role) -> np.ndarray:
    """Penalty growing with distance from the diagonal, in channel-group units."""
    if len(shape) == 3:
        n = shape[0]
        i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
        return (np.abs(i - j) + np.abs(i - k)) / max(n - 1, 1)
    rows, cols = shape
    lm = role.left_m if role.left is not None else 1
    gi = np.arange(rows) // lm
    gj = np.arange(cols) // role.right_m
    ni, nj = max(gi.max(), 1), max(gj.max(), 1)
    return np.abs(gi[:, None] / ni - gj[None, :] / nj)


def _objective_value(terms, stream, T: np.ndarray, T_inv: np.ndarray, kind, banded=False) -> float:
    return float(_terms_l1(terms, stream, Tensor(T), Tensor(T_inv), kind, banded).data)


def _search_permutation(terms, stream, n, steps, lam):
    P = np.eye(n)
    best = lam * _objective_value(terms, stream, P, P.T, "permutation", banded=True)
    for _ in range(steps):
        improved = False
        for a, b in itertools.combinations(range(n), 2):
            Q = P.copy()
            Q[[a, b]] = Q[[b, a]]
            val = lam * _objective_value(terms, stream, Q, Q.T, "permutation", banded=True)
            if val < best - 1e-12 * max(abs(best), 1.0):
                P, best, improved = Q, val, True
        if not improved:
            break
    return ChannelTransform("permutation", P, P.T.copy())


def _search_diagonal(terms, stream, n, steps, lam):
    s = np.zeros(n)

    def f_and_grad(s_val, need_grad=True):
        st = Tensor(s_val, requires_grad=need_grad)
        d = exp(st)
        dinv = exp(scale(st, -1.0))
        eye = Tensor(np.eye(n))
        S = einsum("a,ab->ab", d, eye)
        S_inv = einsum("a,ab->ab", dinv, eye)
        obj = scale(_terms_l1(terms, stream, S, S_inv, "diagonal"), lam) + scale(sum_(square(st)), 0.5)
        if need_grad:
            obj.backward()
            return float(obj.data), st.grad.copy()
        return float(obj.data), None

    fval, g = f_and_grad(s)
    eta = 0.1
    for _ in range(steps):
        if np.max(np.abs(g)) < 1e-12:
            break
        while eta > 1e-12:
            cand = s - eta * g
            fc, _ = f_and_grad(cand, need_grad=False)
            if fc < fval:
                break
            eta *= 0.5
        else:
            break
        s = cand
        fval, g = f_and_grad(s)
        eta *= 1.5
    return ChannelTransform.from_diagonal(np.exp(s))


def _orthogonal_objective(terms, stream, Q: np.ndarray, need_grad: bool):
    Qt = Tensor(Q, requires_grad=need_grad)
    obj = _terms_l1(terms, stream, Qt, transpose(Qt), "orthogonal")
    if need_grad:
        obj.backward()
        return float(obj.data), Qt.grad.copy()
    return float(obj.data), None


def _descend_orthogonal(terms, stream, Q, steps, lam):
    f, G = _orthogonal_objective(terms, stream, Q, True)
    f, G = lam * f, lam * G
    eta = 0.1
    for _ in range(steps):
        X = Q.T @ G
        Omega = 0.5 * (X - X.T)
        if np.max(np.abs(Omega)) < 1e-14:
            break
        while eta > 1e-14:
            cand = Q @ expm(-eta * Omega)
            fc = lam * _orthogonal_objective(terms, stream, cand, False)[0]
            if fc < f:
                break
            eta *= 0.5
        else:
            break
        Q = cand
        f, G = _orthogonal_objective(terms, stream, Q, True)
        f, G = lam * f, lam * G
        eta *= 1.5
    return Q, f


def _polish_orthogonal(terms, stream, Q, cutoff=1e-3, iters=30):
    """Drive the nearly-zero entries to zero exactly by Gauss-Newton on the group."""
    n = Q.shape[0]

    def transformed(Qc):
        St, Si = Tensor(Qc), Tensor(Qc.T)
        return [_term_tensor(role, W, stream, St, Si, "orthogonal").data for _, role, W in terms]

    base = transformed(Q)
    masks = [np.abs(X) <= cutoff * np.max(np.abs(X)) for X in base]
    if not any(m.any() for m in masks):
        return Q

    def residual(Qc):
        return np.concatenate([X[m] for X, m in zip(transformed(Qc), masks)])

    gens = []
    for a, b in itertools.combinations(range(n), 2):
        E = np.zeros((n, n))
        E[a, b], E[b, a] = 1.0, -1.0
        gens.append(E)
    r = residual(Q)
    for _ in range(iters):
        if np.max(np.abs(r)) < 1e-15:
            break
        h = 1e-7
        J = np.stack([(residual(Q @ expm(h * E)) - residual(Q @ expm(-h * E))) / (2 * h) for E in gens], axis=1)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        cand = Q @ expm(sum(c * E for c, E in zip(step, gens)))
        rc = residual(cand)
        if np.linalg.norm(rc) >= np.linalg.norm(r):
            break
        Q, r = cand, rc
    # re-orthonormalize against drift
    U, _, Vt = np.linalg.svd(Q)
    return U @ Vt


def _search_orthogonal(terms, stream, n, steps, lam, rng, restarts):
    if lam == 0:
        return ChannelTransform.identity(n, "orthogonal")
    bestQ, best = _descend_orthogonal(terms, stream, np.eye(n), steps, lam)
    for _ in range(restarts):
        Q, f = _descend_orthogonal(terms, stream, random_orthogonal(n, rng), steps, lam)
        if f < best:
            bestQ, best = Q, f
    Q = _polish_orthogonal(terms, stream, bestQ)
    return ChannelTransform.from_orthogonal(Q)


def _total_sparsity(model: Model) -> tuple[int, int]:
    counts = [sparsity(model.params[k].data) for k in coefficient_weight_names(model)]
    return sum(c for c, _ in counts), sum(t for _, t in counts)


def _total_l1(model: Model) -> float:
    return float(sum(np.abs(model.params[k].data).sum() for k in coefficient_weight_names(model)))


def sparsify_search(
    model: Model,
    kind: str = "permutation",
    steps: int = 200,
    lam: float = 1.0,
    seed: int = 0,
    restarts: int = 4,
    rounds: int = 2,
    probes: Optional[np.ndarray] = None,
) -> SparsifyResult:
    """Search the exact symmetry group of ``kind`` for sparser coefficient weights.

    Permutations: greedy pairwise swaps on an L1 objective weighted by the
    distance from the diagonal (plain L1 is permutation invariant).
    Diagonal: gradient descent on log-scales of ``lam * L1 + |log d|^2 / 2``.
    Orthogonal: Riemannian descent ``Q <- Q expm(-eta skew(Q^T grad))`` on
    ``lam * L1`` with random restarts, then a Gauss-Newton polish that zeroes
    entries that are already nearly zero.  Streams are optimized one at a
    time and the passes repeated ``rounds`` times.
    """
    if kind not in KINDS[:3]:
        raise ValueError("sparsify_search supports permutation, diagonal and orthogonal transforms")
    rng = np.random.default_rng(seed)
    layout = stream_layout(model)
    totals = [ChannelTransform.identity(w, kind) for w in layout.widths]
    # diagonal scalings found by the search are positive
    _check_exactness([b for _, _, b in model.blocks], kind, totals, model.config.batchnorm)
    current = model
    for _ in range(rounds):
        changed = False
        for sid, width in enumerate(layout.widths):
            roles = network_roles(current)
            terms = _stream_terms(current, roles, sid)
            if not terms:
                continue
            if kind == "permutation":
                S = _search_permutation(terms, sid, width, steps, lam)
            elif kind == "diagonal":
                S = _search_diagonal(terms, sid, width, steps, lam)
            else:
                S = _search_orthogonal(terms, sid, width, steps, lam, rng, restarts)
            if S.is_identity():
                continue
            changed = True
            totals[sid] = S @ totals[sid]
            step_t = [S if layout.stage_stream[s] == sid else None for s in range(len(layout.stage_stream))]
            stem = S if sid == 0 else None
            current = transform_network(current, step_t, stem_transform=stem)
        if not changed:
            break
    stage_t = [totals[sid] for sid in layout.stage_stream]
    final = transform_network(model, stage_t, stem_transform=totals[0])
    report = verify_invariance(model, final, probes) if probes is not None else None
    return SparsifyResult(
        transforms=stage_t,
        stem_transform=totals[0],
        model=final,
        objective_before=_total_l1(model),
        objective_after=_total_l1(final),
        sparsity_before=_total_sparsity(model),
        sparsity_after=_total_sparsity(final),
        report=report,
    )
