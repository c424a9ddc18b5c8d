"""Problem definitions: potentials, coefficient matrices, grids, paths.

A sampling problem is one of three variants:

* free path: sample the diffusion started at ``x_minus`` with no further
  conditioning,
* bridge: additionally condition on the value at the right endpoint,
* smoothing: condition the signal on a continuously observed linear
  functional corrupted by independent noise.

All drifts are "linear plus gradient": ``A x - B B^T grad V(x)``.  The
structural growth conditions that make the samplers well behaved are
checked numerically by :func:`validate_problem`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "Potential",
    "builtin_potential",
    "zero_potential",
    "make_potential",
    "finite_difference_derivatives",
    "MatrixSet",
    "make_matrix_set",
    "Grid",
    "Path",
    "Observations",
    "StartWeight",
    "stationary_start_weight",
    "FreePathProblem",
    "BridgeProblem",
    "SmoothingProblem",
    "ProblemSpec",
    "ValidationReport",
    "CheckResult",
    "validate_problem",
]


def _as_points(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to shape (n, d); second value tells whether input was 1-d."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ValueError(f"point has dimension {x.shape[0]}, expected {d}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"points must have shape (n, {d}), got {x.shape}")
    return x, False


@dataclass(frozen=True)
class Potential:
    """Callback bundle for a potential V and its derivatives.

    All callbacks are vectorized over a leading batch axis: ``value`` maps
    (n, d) -> (n,), ``grad`` maps (n, d) -> (n, d), ``hess`` maps
    (n, d) -> (n, d, d) and ``third_contract(x, sigma)`` returns the vector
    ``T_k = sum_ij sigma_ij d^3 V / dx_k dx_i dx_j`` with shape (n, d).

    ``p`` is the degree of the leading 2p-homogeneous term (1 for a
    quadratic potential, 2 for a quartic double well).
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    third_contract: Callable[[np.ndarray, np.ndarray], np.ndarray]
    p: int
    d: int


def builtin_potential(kind: str, **params) -> Potential:
    """Construct one of the built-in analytic potentials.

    Parameters
    ----------
    kind : {"quadratic", "double_well"}
        ``quadratic`` takes an SPD matrix ``Q`` and is V(x) = x^T Q x / 2.
        ``double_well`` takes scalars ``a, b > 0`` and a dimension ``d``
        (default 1) and is V(x) = (a/4)|x|^4 - (b/2)|x|^2.
    """
    if kind == "quadratic":
        Q = np.atleast_2d(np.asarray(params.pop("Q"), dtype=float))
        if params:
            raise TypeError(f"unexpected parameters for quadratic: {sorted(params)}")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Q).min() <= 0:
            raise ValueError("Q must be positive definite")
        d = Q.shape[0]

        def value(x):
            x, _ = _as_points(x, d)
            return 0.5 * np.einsum("ni,ij,nj->n", x, Q, x)

        def grad(x):
            x, one = _as_points(x, d)
            out = x @ Q.T
            return out[0] if one else out

        def hess(x):
            x, one = _as_points(x, d)
            out = np.broadcast_to(Q, (x.shape[0], d, d)).copy()
            return out[0] if one else out

        def third_contract(x, sigma):
            x, one = _as_points(x, d)
            out = np.zeros_like(x)
            return out[0] if one else out

        return Potential(value, grad, hess, third_contract, p=1, d=d)

    if kind == "double_well":
        a = float(params.pop("a"))
        b = float(params.pop("b"))
        d = int(params.pop("d", 1))
        if params:
            raise TypeError(f"unexpected parameters for double_well: {sorted(params)}")
        if a <= 0 or b <= 0:
            raise ValueError("double_well requires a > 0 and b > 0")

        def value(x):
            x, _ = _as_points(x, d)
            r2 = np.einsum("ni,ni->n", x, x)
            return 0.25 * a * r2**2 - 0.5 * b * r2

        def grad(x):
            x, one = _as_points(x, d)
            r2 = np.einsum("ni,ni->n", x, x)
            out = (a * r2 - b)[:, None] * x
            return out[0] if one else out

        def hess(x):
            x, one = _as_points(x, d)
            r2 = np.einsum("ni,ni->n", x, x)
            eye = np.eye(d)
            out = (a * r2 - b)[:, None, None] * eye + 2.0 * a * np.einsum(
                "ni,nj->nij", x, x
            )
            return out[0] if one else out

        def third_contract(x, sigma):
            # d^3 V = 2a (delta_ij x_k + delta_ki x_j + delta_kj x_i)
            x, one = _as_points(x, d)
            sigma = np.asarray(sigma, dtype=float)
            out = 2.0 * a * (np.trace(sigma) * x + 2.0 * x @ sigma.T)
            return out[0] if one else out

        return Potential(value, grad, hess, third_contract, p=2, d=d)

    raise ValueError(f"unknown potential kind {kind!r}")


def zero_potential(d: int = 1) -> Potential:
    """V identically zero (pure Gaussian reference dynamics, f = 0)."""

    def value(x):
        x, _ = _as_points(x, d)
        return np.zeros(x.shape[0])

    def grad(x):
        x, one = _as_points(x, d)
        out = np.zeros_like(x)
        return out[0] if one else out

    def hess(x):
        x, one = _as_points(x, d)
        out = np.zeros((x.shape[0], d, d))
        return out[0] if one else out

    def third_contract(x, sigma):
        x, one = _as_points(x, d)
        out = np.zeros_like(x)
        return out[0] if one else out

    return Potential(value, grad, hess, third_contract, p=1, d=d)


def finite_difference_derivatives(
    value: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central-difference gradient, Hessian and third-derivative tensor at one point.

    ``value`` takes a single point (d,) and returns a scalar.  Returns
    ``(grad (d,), hess (d, d), third (d, d, d))``.  Intended as a fallback
    for user potentials supplied without analytic derivatives.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if h <= 0:
        raise ValueError("h must be positive")

    def v(pt):
        out = float(value(pt))
        if not np.isfinite(out):
            raise ValueError("potential evaluated to a non-finite value")
        return out

    grad = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        grad[i] = (v(x + e) - v(x - e)) / (2 * h)

    hess = np.zeros((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        hess[i, i] = (v(x + ei) - 2 * v(x) + v(x - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            hess[i, j] = (
                v(x + ei + ej) - v(x + ei - ej) - v(x - ei + ej) + v(x - ei - ej)
            ) / (4 * h**2)
            hess[j, i] = hess[i, j]

    # third derivative as central difference of the Hessian
    third = np.zeros((d, d, d))
    for k in range(d):
        ek = np.zeros(d)
        ek[k] = h
        hp = _fd_hess(v, x + ek, h)
        hm = _fd_hess(v, x - ek, h)
        third[k] = (hp - hm) / (2 * h)
    return grad, hess, third


def _fd_hess(v, x, h):
    d = x.shape[0]
    out = np.zeros((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        out[i, i] = (v(x + ei) - 2 * v(x) + v(x - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            out[i, j] = (
                v(x + ei + ej) - v(x + ei - ej) - v(x - ei + ej) + v(x - ei - ej)
            ) / (4 * h**2)
            out[j, i] = out[i, j]
    return out


def make_potential(
    value: Callable[[np.ndarray], float],
    d: int,
    grad: Optional[Callable] = None,
    hess: Optional[Callable] = None,
    third_contract: Optional[Callable] = None,
    p: int = 1,
    h: float = 1e-4,
) -> Potential:
    """Wrap a scalar potential into a :class:`Potential`, filling missing
    derivatives with central finite differences.

    ``value`` takes one point (d,).  Supplied callbacks must follow the
    same one-point convention; vectorization over batches is added here.
    """

    def batched_value(x):
        x, _ = _as_points(x, d)
        return np.array([float(value(p_)) for p_ in x])

    if grad is not None:
        def batched_grad(x):
            x, one = _as_points(x, d)
            out = np.array([np.asarray(grad(p_), dtype=float) for p_ in x])
            return out[0] if one else out
    else:
        def batched_grad(x):
            x, one = _as_points(x, d)
            out = np.array(
                [finite_difference_derivatives(value, p_, h)[0] for p_ in x]
            )
            return out[0] if one else out

    if hess is not None:
        def batched_hess(x):
            x, one = _as_points(x, d)
            out = np.array([np.asarray(hess(p_), dtype=float) for p_ in x])
            return out[0] if one else out
    else:
        def batched_hess(x):
            x, one = _as_points(x, d)
            out = np.array([_fd_hess(lambda q: float(value(q)), p_, h) for p_ in x])
            return out[0] if one else out

    if third_contract is not None:
        def batched_third(x, sigma):
            x, one = _as_points(x, d)
            out = np.array(
                [np.asarray(third_contract(p_, sigma), dtype=float) for p_ in x]
            )
            return out[0] if one else out
    else:
        def batched_third(x, sigma):
            x, one = _as_points(x, d)
            sigma = np.asarray(sigma, dtype=float)
            hess_at = batched_hess
            out = np.zeros_like(x)
            for k in range(d):
                e = np.zeros(d)
                e[k] = h
                hp = hess_at(x + e)
                hm = hess_at(x - e)
                out[:, k] = np.einsum("nij,ij->n", hp - hm, sigma) / (2 * h)
            return out[0] if one else out

    return Potential(batched_value, batched_grad, batched_hess, batched_third, p=p, d=d)


# ---------------------------------------------------------------------------
# coefficient matrices


@dataclass(frozen=True)
class MatrixSet:
    """Constant coefficients of the linear part: drift matrix A and noise B."""

    A: np.ndarray
    B: np.ndarray
    BBt: np.ndarray
    BBt_inv: np.ndarray

    @property
    def d(self) -> int:
        return self.A.shape[0]


def make_matrix_set(
    A: Optional[np.ndarray] = None, B: Optional[np.ndarray] = None, d: Optional[int] = None
) -> MatrixSet:
    """Build a :class:`MatrixSet`, defaulting A to zero and B to identity."""
    if A is None and B is None and d is None:
        raise ValueError("need at least one of A, B, d")
    if A is not None:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = A.shape[0]
    if B is not None:
        B = np.atleast_2d(np.asarray(B, dtype=float))
        d = B.shape[0]
    if A is None:
        A = np.zeros((d, d))
    if B is None:
        B = np.eye(d)
    if A.shape != (d, d) or B.shape != (d, d):
        raise ValueError("A and B must be square with matching dimension")
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError("B is singular or too ill-conditioned to invert")
    BBt = B @ B.T
    BBt_inv = np.linalg.inv(BBt)
    if np.abs(BBt_inv @ BBt - np.eye(d)).max() > 1e-10:
        raise ValueError("failed to invert B B^T accurately")
    return MatrixSet(A=A, B=B, BBt=BBt, BBt_inv=BBt_inv)


# ---------------------------------------------------------------------------
# grid and paths


class Grid:
    """Uniform grid on [0, 1] with M intervals and trapezoidal weights."""

    def __init__(self, M: int):
        if M < 2:
            raise ValueError("grid needs at least 2 intervals")
        self.M = int(M)
        self.du = 1.0 / self.M
        self.nodes = np.linspace(0.0, 1.0, self.M + 1)
        w = np.full(self.M + 1, self.du)
        w[0] = w[-1] = 0.5 * self.du
        self.weights = w

    def __eq__(self, other):
        return isinstance(other, Grid) and other.M == self.M

    def __hash__(self):
        return hash(("Grid", self.M))

    def __repr__(self):
        return f"Grid(M={self.M})"

    def node_at(self, u: float) -> int:
        """Index of the grid node closest to position u."""
        return int(round(u * self.M))


@dataclass(frozen=True)
class Path:
    """Field values on the grid nodes, shape (M+1, d)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.M + 1:
            raise ValueError(
                f"path has {v.shape[0]} nodes, grid has {self.grid.M + 1}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Observations:
    """Increments of the observed process over the grid cells, shape (M, m)."""

    increments: np.ndarray
    grid: Grid

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.shape[0] != self.grid.M:
            raise ValueError(
                f"expected {self.grid.M} increments, got {inc.shape[0]}"
            )
        if not np.all(np.isfinite(inc)):
            raise ValueError("observation increments must be finite")
        object.__setattr__(self, "increments", inc)

    @classmethod
    def from_node_values(cls, values: np.ndarray, grid: Grid) -> "Observations":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.M + 1:
            raise ValueError("node values must cover all grid nodes")
        if np.abs(values[0]).max() > 1e-12:
            raise ValueError("observed process must start at zero")
        return cls(np.diff(values, axis=0), grid)

    @property
    def m(self) -> int:
        return self.increments.shape[1]


# ---------------------------------------------------------------------------
# problem variants


@dataclass(frozen=True)
class StartWeight:
    """Log-weight applied to the start point of a smoothing path.

    ``log_value`` maps (n, d) -> (n,), ``grad`` maps (n, d) -> (n, d);
    ``hess`` is optional and only needed for dense Gaussian reference
    computations on linear problems.
    """

    log_value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None


def stationary_start_weight(potential: Potential) -> StartWeight:
    """Start weight for a chain whose initial point follows the drift's
    invariant density: log-weight = -V."""
    return StartWeight(
        log_value=lambda x: -potential.value(x),
        grad=lambda x: -potential.grad(x),
        hess=lambda x: -potential.hess(x),
    )


@dataclass(frozen=True)
class FreePathProblem:
    """Sample the diffusion on [0, 1] started at ``x_minus``."""

    mats: MatrixSet
    potential: Potential
    x_minus: np.ndarray

    variant = "free_path"

    def __post_init__(self):
        object.__setattr__(
            self, "x_minus", np.atleast_1d(np.asarray(self.x_minus, dtype=float))
        )
        if self.x_minus.shape != (self.d,):
            raise ValueError("x_minus dimension mismatch")

    @property
    def d(self) -> int:
        return self.mats.d


@dataclass(frozen=True)
class BridgeProblem:
    """Sample the diffusion conditioned on both endpoints."""

    mats: MatrixSet
    potential: Potential
    x_minus: np.ndarray
    x_plus: np.ndarray

    variant = "bridge"

    def __post_init__(self):
        object.__setattr__(
            self, "x_minus", np.atleast_1d(np.asarray(self.x_minus, dtype=float))
        )
        object.__setattr__(
            self, "x_plus", np.atleast_1d(np.asarray(self.x_plus, dtype=float))
        )
        if self.x_minus.shape != (self.d,) or self.x_plus.shape != (self.d,):
            raise ValueError("endpoint dimension mismatch")

    @property
    def d(self) -> int:
        return self.mats.d


@dataclass(frozen=True)
class SmoothingProblem:
    """Sample the signal conditioned on linearly observed increments.

    Signal: dX = f(X) du + B11 dW, f = -B11 B11^T grad V, start weighted by
    ``start_weight``.  Observation: dY = A21 X du + B22 dW'.
    """

    A21: np.ndarray
    B11: np.ndarray
    B22: np.ndarray
    potential: Potential
    start_weight: StartWeight
    observations: Observations

    variant = "smoothing"

    def __post_init__(self):
        A21 = np.atleast_2d(np.asarray(self.A21, dtype=float))
        B11 = np.atleast_2d(np.asarray(self.B11, dtype=float))
        B22 = np.atleast_2d(np.asarray(self.B22, dtype=float))
        object.__setattr__(self, "A21", A21)
        object.__setattr__(self, "B11", B11)
        object.__setattr__(self, "B22", B22)
        d = B11.shape[0]
        m = B22.shape[0]
        if A21.shape != (m, d):
            raise ValueError(f"A21 must be ({m}, {d}), got {A21.shape}")
        if self.observations.m != m:
            raise ValueError("observation dimension does not match B22")
        for name, mat in (("B11", B11), ("B22", B22)):
            cond = np.linalg.cond(mat)
            if not np.isfinite(cond) or cond > 1e12:
                raise ValueError(f"{name} is singular or too ill-conditioned")

    @property
    def d(self) -> int:
        return self.B11.shape[0]

    @property
    def m(self) -> int:
        return self.B22.shape[0]

    @cached_property
    def mats(self) -> MatrixSet:
        """Signal-level coefficients: A = 0, B = B11."""
        return make_matrix_set(A=np.zeros((self.d, self.d)), B=self.B11)

    @cached_property
    def obs_precision(self) -> np.ndarray:
        """(B22 B22^T)^{-1}."""
        return np.linalg.inv(self.B22 @ self.B22.T)

    def full_matrix_set(self) -> MatrixSet:
        """Block coefficients of the joint (signal, observation) system."""
        d, m = self.d, self.m
        A = np.zeros((d + m, d + m))
        A[d:, :d] = self.A21
        B = np.zeros((d + m, d + m))
        B[:d, :d] = self.B11
        B[d:, d:] = self.B22
        return make_matrix_set(A=A, B=B)


ProblemSpec = Union[FreePathProblem, BridgeProblem, SmoothingProblem]


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self):
        lines = []
        for c in self.checks:
            lines.append(f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _sphere_points(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pts = rng.standard_normal((n, d))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _check_derivatives(pot: Potential, rng: np.random.Generator, n: int = 20) -> CheckResult:
    """Derivative consistency of the potential at random points in [-3, 3]^d."""
    d = pot.d
    pts = rng.uniform(-3.0, 3.0, size=(n, d))
    sigma = np.eye(d) + 0.1 * np.ones((d, d))
    worst = 0.0
    h = 1e-5
    for x in pts:
        g_fd, h_fd, t_fd = finite_difference_derivatives(
            lambda q: float(pot.value(q[None, :])[0]), x, h
        )
        g = pot.grad(x)
        hs = pot.hess(x)
        t = pot.third_contract(x, sigma)
        t_ref = np.einsum("kij,ij->k", t_fd, sigma)
        scale_g = 1.0 + np.abs(g).max()
        scale_h = 1.0 + np.abs(hs).max()
        scale_t = 1.0 + np.abs(t).max()
        worst = max(
            worst,
            np.abs(g - g_fd).max() / scale_g,
            np.abs(hs - h_fd).max() / scale_h,
            np.abs(t - t_ref).max() / scale_t,
        )
    # FD Hessians of smooth quartics are good to ~1e-6 relative at h=1e-5
    passed = worst < 5e-5
    return CheckResult(
        "derivative_consistency", passed, f"max relative deviation {worst:.2e}"
    )


def _check_growth(pot: Potential, rng: np.random.Generator) -> CheckResult:
    """Lower polynomial growth of V: V(R xi) / R^(2p) bounded below on spheres."""
    d, p = pot.d, pot.p
    c0 = np.inf
    for R in (10.0, 100.0):
        pts = R * _sphere_points(d, 64, rng)
        vals = pot.value(pts) / R ** (2 * p)
        c0 = min(c0, vals.min())
    passed = c0 > 1e-8
    return CheckResult("growth_condition", passed, f"c0 estimate {c0:.4g} (p={p})")


def _check_drift_dissipativity(
    pot: Potential, mats: MatrixSet, rng: np.random.Generator
) -> CheckResult:
    """For p = 1: Q A + A^T Q - Q B B^T Q must be negative definite, with Q
    the leading quadratic form of V estimated at large radius."""
    d = pot.d
    R = 100.0
    pts = R * _sphere_points(d, 32, rng)
    H = pot.hess(pts).mean(axis=0)
    Q = 0.5 * (H + H.T)
    S = Q @ mats.A + mats.A.T @ Q - Q @ mats.BBt @ Q
    lam_max = np.linalg.eigvalsh(0.5 * (S + S.T)).max()
    passed = lam_max < 0
    return CheckResult(
        "drift_dissipativity", passed, f"max eigenvalue {lam_max:.4g}"
    )


def _check_start_weight_decay(
    spec: SmoothingProblem, rng: np.random.Generator, radius_scale: float
) -> CheckResult:
    """Quadratic decay of the start weight: both max(log alpha, <grad log alpha, x>/2)
    must be <= -eps |x|^2 at large radius."""
    d = spec.d
    worst = -np.inf
    for R in (2.0 * radius_scale, 10.0 * radius_scale):
        pts = R * _sphere_points(d, 64, rng)
        la = spec.start_weight.log_value(pts)
        gla = spec.start_weight.grad(pts)
        half_inner = 0.5 * np.einsum("ni,ni->n", gla, pts)
        branch = np.maximum(la, half_inner) / R**2
        worst = max(worst, branch.max())
    passed = worst < -1e-8
    return CheckResult(
        "start_weight_decay", passed, f"max branch value / |x|^2 = {worst:.4g}"
    )


def validate_problem(
    spec: ProblemSpec,
    strict: bool = False,
    seed: int = 0,
    radius_scale: float = 1.0,
) -> ValidationReport:
    """Numerically check the structural conditions a problem must satisfy.

    Checks are randomized sweeps but deterministic given ``seed``.  Failed
    checks raise in strict mode and warn otherwise.  A non-invertible noise
    matrix is always a hard error (raised at spec construction).
    """
    rng = np.random.default_rng(seed)
    checks = [_check_derivatives(spec.potential, rng)]
    if spec.variant in ("free_path", "bridge"):
        checks.append(_check_growth(spec.potential, rng))
        if spec.potential.p == 1:
            checks.append(_check_drift_dissipativity(spec.potential, spec.mats, rng))
    else:
        checks.append(_check_growth(spec.potential, rng))
        checks.append(_check_start_weight_decay(spec, rng, radius_scale))
    report = ValidationReport(tuple(checks))
    if not report.ok:
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        if strict:
            raise ValueError(f"problem validation failed: {failed}\n{report}")
        warnings.warn(f"problem validation failed: {failed}", stacklevel=2)
    return report
