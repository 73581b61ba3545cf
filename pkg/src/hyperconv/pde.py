"""Explicit finite-difference solvers used as independent references.

Everything here works on plain numpy arrays of shape ``[n, H, W]``.  The
column axis is x and the row axis is y; first derivatives are central
differences and the Laplacian is the 5-point stencil.  Ghost cells are zero
for ``dirichlet-zero`` and copies of the adjacent interior cell for
``neumann-reflect``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np

BOUNDARY_CONDITIONS = ("dirichlet-zero", "neumann-reflect")
QUASILINEAR_VARIANTS = ("eq3", "eq4", "eq5", "eq6", "eq7")

LAPLACE_STENCIL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# first-order wave system w = (u_x, u_y, u_t)
WAVE_MATRIX_X = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
WAVE_MATRIX_Y = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


class StabilityError(ValueError):
    """Time step violates the explicit scheme's stability bound."""


@dataclass(frozen=True)
class PdeGrid:
    u: np.ndarray
    h: float
    tau: float
    bc: str = "dirichlet-zero"
    step: int = 0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim == 2:
            u = u[None]
        if u.ndim != 3:
            raise ValueError(f"grid field must be [n, H, W], got shape {u.shape}")
        object.__setattr__(self, "u", u)
        if not (self.h > 0 and self.tau > 0):
            raise ValueError("h and tau must be positive")
        if self.bc not in BOUNDARY_CONDITIONS:
            raise ValueError(f"unknown boundary condition {self.bc!r}")

    @property
    def time(self) -> float:
        return self.step * self.tau

    def evolve(self, u: np.ndarray) -> "PdeGrid":
        return replace(self, u=u, step=self.step + 1)


def pad(u: np.ndarray, bc: str, width: int = 1) -> np.ndarray:
    mode = "constant" if bc == "dirichlet-zero" else "symmetric"
    return np.pad(u, [(0, 0)] * (u.ndim - 2) + [(width, width)] * 2, mode=mode)


def apply_stencil(u: np.ndarray, kernel: np.ndarray, bc: str) -> np.ndarray:
    """3x3 cross-correlation, taps accumulated in row-major order."""
    H, W = u.shape[-2:]
    up = pad(u, bc)
    acc = np.zeros_like(u)
    for a in range(3):
        for b in range(3):
            acc += kernel[a, b] * up[..., a : a + H, b : b + W]
    return acc


def ddx(u: np.ndarray, h: float, bc: str) -> np.ndarray:
    up = pad(u, bc)
    return (up[..., 1:-1, 2:] - up[..., 1:-1, :-2]) / (2 * h)


def ddy(u: np.ndarray, h: float, bc: str) -> np.ndarray:
    up = pad(u, bc)
    return (up[..., 2:, 1:-1] - up[..., :-2, 1:-1]) / (2 * h)


def laplacian(u: np.ndarray, h: float, bc: str) -> np.ndarray:
    up = pad(u, bc)
    c = up[..., 1:-1, 1:-1]
    return (up[..., 1:-1, 2:] + up[..., 1:-1, :-2] + up[..., 2:, 1:-1] + up[..., :-2, 1:-1] - 4 * c) / (h * h)


def centered_coordinates(shape: tuple[int, int], h: float) -> tuple[np.ndarray, np.ndarray]:
    """``(x, y)`` of cell centres for a grid centred on the origin."""
    H, W = shape
    x = (np.arange(W) - (W - 1) / 2) * h
    y = (np.arange(H) - (H - 1) / 2) * h
    return np.meshgrid(x, y)


# -- heat -----------------------------------------------------------------------------


def heat_kernel(tau: float, h: float) -> np.ndarray:
    return (tau / h**2) * LAPLACE_STENCIL


def heat_step(g: PdeGrid) -> PdeGrid:
    """Forward Euler for u_t = Laplace(u)."""
    bound = g.h**2 / 4
    if g.tau > bound:
        raise StabilityError(f"heat step needs tau <= h^2/4 = {bound:.6g}, got tau = {g.tau:.6g}")
    return g.evolve(g.u + apply_stencil(g.u, heat_kernel(g.tau, g.h), g.bc))


# -- wave -----------------------------------------------------------------------------


def _wave_cfl(h: float, tau: float) -> None:
    bound = h / math.sqrt(2)
    if tau > bound:
        raise StabilityError(f"wave scheme needs tau <= h/sqrt(2) = {bound:.6g}, got {tau:.6g}")


def wave_solve_second_order(
    u0: np.ndarray,
    v0: np.ndarray,
    h: float,
    tau: float,
    steps: int,
    bc: str = "dirichlet-zero",
    history: bool = False,
):
    """Three-level scheme ``u_i = 2u_{i-1} - u_{i-2} + tau^2 Lap_h u_{i-1}``.

    The first step is seeded with ``u_1 = u_0 + tau v_0``.  Returns the final
    grid, or ``(grid, frames)`` with every time level when ``history`` is set.
    """
    _wave_cfl(h, tau)
    prev = np.asarray(u0, dtype=np.float64)
    frames = [prev]
    if steps == 0:
        g = PdeGrid(prev, h, tau, bc, 0)
        return (g, frames) if history else g
    curr = prev + tau * np.asarray(v0, dtype=np.float64)
    frames.append(curr)
    for _ in range(steps - 1):
        prev, curr = curr, 2 * curr - prev + tau**2 * laplacian(curr, h, bc)
        if history:
            frames.append(curr)
    g = PdeGrid(curr, h, tau, bc, steps)
    return (g, frames) if history else g


def wave_energy(u_prev: np.ndarray, u_curr: np.ndarray, h: float, tau: float, bc: str = "dirichlet-zero") -> float:
    """Kinetic plus gradient energy between two time levels.

    The gradient term pairs the two levels, ``-<u_curr, Lap_h u_prev>``, which
    the three-level scheme conserves exactly up to round-off.
    """
    kinetic = np.sum(((u_curr - u_prev) / tau) ** 2)
    potential = -np.sum(u_curr * laplacian(u_prev, h, bc))
    return 0.5 * h * h * float(kinetic + potential)


def wave_system_matrices() -> tuple[np.ndarray, np.ndarray]:
    return WAVE_MATRIX_X.copy(), WAVE_MATRIX_Y.copy()


def wave_step_first_order_system(w: PdeGrid) -> PdeGrid:
    """Euler step of ``w_t = Ax w_x + By w_y`` for w = (u_x, u_y, u_t)."""
    if w.u.shape[0] != 3:
        raise ValueError(f"wave system needs 3 channels, got {w.u.shape[0]}")
    rhs = np.einsum("ij,jhw->ihw", WAVE_MATRIX_X, ddx(w.u, w.h, w.bc)) + np.einsum(
        "ij,jhw->ihw", WAVE_MATRIX_Y, ddy(w.u, w.h, w.bc)
    )
    return w.evolve(w.u + w.tau * rhs)


def wave_solve_first_order(
    u0: np.ndarray, v0: np.ndarray, h: float, tau: float, steps: int, bc: str = "dirichlet-zero"
) -> tuple[np.ndarray, PdeGrid]:
    """Evolve the first-order system and integrate u alongside (``u += tau * u_t``)."""
    u = np.asarray(u0, dtype=np.float64).copy()
    w0 = np.stack([ddx(u[None], h, bc)[0], ddy(u[None], h, bc)[0], np.asarray(v0, dtype=np.float64)])
    w = PdeGrid(w0, h, tau, bc)
    for _ in range(steps):
        u = u + tau * w.u[2]
        w = wave_step_first_order_system(w)
    return u, w


# -- rotation ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearOperatorSpec:
    """Coefficients of ``u_t = alpha(x, y) u_x + beta(x, y) u_y``.

    Each coefficient is a constant or an affine function given as
    ``(c0, cx, cy)`` meaning ``c0 + cx * x + cy * y``.
    """

    alpha: object = 0.0
    beta: object = 0.0

    @staticmethod
    def _eval(coef, x, y):
        if np.isscalar(coef):
            return np.full_like(x, float(coef))
        c0, cx, cy = coef
        return c0 + cx * x + cy * y

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._eval(self.alpha, x, y), self._eval(self.beta, x, y)


ROTATION = LinearOperatorSpec(alpha=(0.0, 0.0, -1.0), beta=(0.0, 1.0, 0.0))


def advective_cfl_step(op: LinearOperatorSpec, shape: tuple[int, int], h: float) -> float:
    x, y = centered_coordinates(shape, h)
    a, b = op.evaluate(x, y)
    speed = float(np.max(np.abs(a) + np.abs(b)))
    return math.inf if speed == 0 else h / speed


def rotation_cfl_step(shape: tuple[int, int], h: float) -> float:
    """Largest stable upwind time step: h / (max|y| + max|x|) at the corner."""
    return advective_cfl_step(ROTATION, shape, h)


def linear_advect(
    g: PdeGrid,
    op: LinearOperatorSpec,
    t_final: float,
    steps: Optional[int] = None,
    cfl: float = 0.5,
) -> PdeGrid:
    """First-order upwind integration of a variable-coefficient transport equation.

    Coordinates are cell centres of a grid centred on the origin.  Without
    ``steps`` the step count is the smallest one keeping the Courant number
    at or below ``cfl``; ``g.tau`` is ignored.  Inflow ghost cells follow
    ``g.bc``.
    """
    if g.u.shape[0] != 1:
        raise ValueError("transport equation is scalar (one channel)")
    shape = g.u.shape[1:]
    tau_max = advective_cfl_step(op, shape, g.h)
    if steps is None:
        steps = 1 if math.isinf(tau_max) else max(1, math.ceil(t_final / (cfl * tau_max)))
    tau = t_final / steps
    if tau > tau_max * (1 + 1e-12):
        raise StabilityError(f"advection step tau = {tau:.6g} exceeds the corner CFL bound {tau_max:.6g}")
    x, y = centered_coordinates(shape, g.h)
    a, b = op.evaluate(x, y)
    u = g.u[0].copy()
    h = g.h
    for _ in range(steps):
        up = pad(u, g.bc)
        # information arrives from the side the velocity (-a, -b) comes from
        ux = np.where(a > 0, up[1:-1, 2:] - u, u - up[1:-1, :-2]) / h
        uy = np.where(b > 0, up[2:, 1:-1] - u, u - up[:-2, 1:-1]) / h
        u = u + tau * (a * ux + b * uy)
    return PdeGrid(u[None], g.h, tau, g.bc, steps)


def rotation_advect(g: PdeGrid, t_final: float, steps: Optional[int] = None, cfl: float = 0.5) -> PdeGrid:
    """Upwind solution of ``u_t = -y u_x + x u_y``: rigid rotation of the data by angle t."""
    return linear_advect(g, ROTATION, t_final, steps, cfl)


def rotated_initial_data(f: Callable[[np.ndarray, np.ndarray], np.ndarray], shape, h: float, t: float) -> np.ndarray:
    """Exact solution ``f(x cos t - y sin t, x sin t + y cos t)``."""
    x, y = centered_coordinates(shape, h)
    return f(x * math.cos(t) - y * math.sin(t), x * math.sin(t) + y * math.cos(t))


# -- quasi-linear systems -----------------------------------------------------------------


def quasilinear_rhs(u: np.ndarray, A, B, C, D, variant: str, h: float, bc: str) -> np.ndarray:
    """Right-hand side of the factored quasi-linear system for one variant.

    ``eq3``: sum_j A_ij (C u)_j d_x u_j + B_ij (D u)_j d_y u_j
    ``eq4``: (C u)_i (A d_x u)_i + (D u)_i (B d_y u)_i
    ``eq5``: (C u)_i d_x u_i + (D u)_i d_y u_i
    ``eq6``: A d_x(u . C u) + B d_y(u . C u)
    ``eq7``: A d_x(u . C u) + B d_y(u . D u)
    """
    if variant not in QUASILINEAR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")

    def mix(M, v):
        return np.einsum("ij,jhw->ihw", np.asarray(M, dtype=np.float64), v)

    if variant == "eq3":
        return mix(A, mix(C, u) * ddx(u, h, bc)) + mix(B, mix(D, u) * ddy(u, h, bc))
    if variant == "eq4":
        return mix(C, u) * mix(A, ddx(u, h, bc)) + mix(D, u) * mix(B, ddy(u, h, bc))
    if variant == "eq5":
        return mix(C, u) * ddx(u, h, bc) + mix(D, u) * ddy(u, h, bc)
    Dm = C if variant == "eq6" else D
    return mix(A, ddx(u * mix(C, u), h, bc)) + mix(B, ddy(u * mix(Dm, u), h, bc))


def quasilinear_step(g: PdeGrid, A, B, C, D, variant: str = "eq3") -> PdeGrid:
    n = g.u.shape[0]
    for name, M in zip("ABCD", (A, B, C, D)):
        if M is not None and np.shape(M) != (n, n):
            raise ValueError(f"matrix {name} must be {n}x{n}, got {np.shape(M)}")
    return g.evolve(g.u + g.tau * quasilinear_rhs(g.u, A, B, C, D, variant, g.h, g.bc))


def tensorform_rhs(u: np.ndarray, A3: np.ndarray, B3: np.ndarray, h: float, bc: str) -> np.ndarray:
    return np.einsum("ijk,khw,jhw->ihw", A3, u, ddx(u, h, bc)) + np.einsum(
        "ijk,khw,jhw->ihw", B3, u, ddy(u, h, bc)
    )


def tensorform_step(g: PdeGrid, A3: np.ndarray, B3: np.ndarray) -> PdeGrid:
    """Euler step of ``u_t = sum_jk A_ijk u_k d_x u_j + B_ijk u_k d_y u_j``."""
    n = g.u.shape[0]
    if np.shape(A3) != (n, n, n) or np.shape(B3) != (n, n, n):
        raise ValueError(f"coefficient tensors must be {(n, n, n)}")
    return g.evolve(g.u + g.tau * tensorform_rhs(g.u, A3, B3, g.h, g.bc))


def conservation_rhs(u: np.ndarray, A3: np.ndarray, B3: np.ndarray, h: float, bc: str) -> np.ndarray:
    """Divergence form ``sum_jk A_ijk d_x(u_j u_k) + B_ijk d_y(u_j u_k)``."""
    prod = np.einsum("jhw,khw->jkhw", u, u)
    return np.einsum("ijk,jkhw->ihw", A3, ddx(prod, h, bc)) + np.einsum("ijk,jkhw->ihw", B3, ddy(prod, h, bc))


def conservation_step(g: PdeGrid, A3: np.ndarray, B3: np.ndarray) -> PdeGrid:
    return g.evolve(g.u + g.tau * conservation_rhs(g.u, A3, B3, g.h, g.bc))


def run(g: PdeGrid, stepper: Callable[[PdeGrid], PdeGrid], steps: int) -> list[PdeGrid]:
    """Trajectory including the initial grid."""
    out = [g]
    for _ in range(steps):
        g = stepper(g)
        out.append(g)
    return out


# -- blow-up --------------------------------------------------------------------------------


@dataclass(frozen=True)
class BlowupDiagnostic:
    step: int
    reason: str  # "non-finite" or "threshold"
    max_abs: float
    max_gradient: float


def detect_blowup(
    trajectory: Iterable,
    h: float = 1.0,
    threshold: Optional[float] = None,
    threshold_factor: float = 1e6,
) -> Optional[BlowupDiagnostic]:
    """First step where the field turns non-finite or exceeds the threshold.

    ``trajectory`` yields arrays or :class:`PdeGrid` objects, starting at step
    0.  The default threshold is ``threshold_factor * max|u_0|``.
    """
    for step, item in enumerate(trajectory):
        u = item.u if isinstance(item, PdeGrid) else np.asarray(item, dtype=np.float64)
        if threshold is None:
            base = float(np.max(np.abs(u))) if np.all(np.isfinite(u)) else 1.0
            threshold = threshold_factor * (base if base > 0 else 1.0)
        finite = np.isfinite(u)
        max_abs = float(np.max(np.abs(np.where(finite, u, 0.0))))
        if np.all(finite):
            grad = np.sqrt(ddx(u, h, "neumann-reflect") ** 2 + ddy(u, h, "neumann-reflect") ** 2)
            max_grad = float(grad.max())
        else:
            max_grad = math.inf
        if not np.all(finite):
            return BlowupDiagnostic(step, "non-finite", max_abs, max_grad)
        if max_abs > threshold:
            return BlowupDiagnostic(step, "threshold", max_abs, max_grad)
    return None


def run_until_blowup(
    g: PdeGrid, stepper: Callable[[PdeGrid], PdeGrid], max_steps: int, threshold_factor: float = 1e6
) -> tuple[PdeGrid, Optional[BlowupDiagnostic]]:
    """Step until ``detect_blowup`` fires or ``max_steps`` is reached."""

    def gen():
        nonlocal g
        yield g
        for _ in range(max_steps):
            with np.errstate(all="ignore"):
                g = stepper(g)
            yield g

    diag = detect_blowup(gen(), h=g.h, threshold_factor=threshold_factor)
    return g, diag
