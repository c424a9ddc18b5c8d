"""Discrete elliptic operators on the path grid.

The Gaussian reference law of each problem is encoded by a symmetric
positive definite block-tridiagonal precision matrix over the unknown
nodes.  The quadratic form is assembled cell by cell so that

    x^T Lam x = sum_m du * | (x_{m+1} - x_m)/du - A (x_m + x_{m+1})/2 |_B^2
                (+ observation penalty for smoothing),

which is the trapezoidal discretization of int |x' - A x|_B^2 du and makes
the node covariance of the discrete Gaussian exact (Brownian bridge
covariance u_m (1 - u_n) in the simplest case).  Dirichlet nodes are
eliminated from the unknowns and their coupling folded into the forcing
vector ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .model import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    Path,
    ProblemSpec,
    SmoothingProblem,
)

__all__ = [
    "BlockTridiag",
    "CholeskyFactor",
    "DiscreteOperator",
    "assemble_precision",
    "cholesky_banded",
    "solve_bvp",
    "sample_from_precision",
    "mean_path",
]


class BlockTridiag:
    """Symmetric block-tridiagonal matrix stored as diagonal and
    super-diagonal d x d blocks.

    ``diag`` has shape (n, d, d); ``off`` has shape (n-1, d, d) and holds
    the block coupling node m to node m+1 (the sub-diagonal blocks are the
    transposes).
    """

    def __init__(self, diag: np.ndarray, off: np.ndarray):
        self.diag = np.asarray(diag, dtype=float)
        self.off = np.asarray(off, dtype=float)
        if self.diag.ndim != 3 or self.diag.shape[1] != self.diag.shape[2]:
            raise ValueError("diag must have shape (n, d, d)")
        if self.off.shape != (self.diag.shape[0] - 1, *self.diag.shape[1:]):
            raise ValueError("off must have shape (n-1, d, d)")

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    @property
    def d(self) -> int:
        return self.diag.shape[1]

    @property
    def n(self) -> int:
        return self.n_blocks * self.d

    def copy(self) -> "BlockTridiag":
        return BlockTridiag(self.diag.copy(), self.off.copy())

    def __add__(self, other: "BlockTridiag") -> "BlockTridiag":
        return BlockTridiag(self.diag + other.diag, self.off + other.off)

    def __sub__(self, other: "BlockTridiag") -> "BlockTridiag":
        return BlockTridiag(self.diag - other.diag, self.off - other.off)

    def scaled(self, c: float) -> "BlockTridiag":
        return BlockTridiag(c * self.diag, c * self.off)

    def plus_identity(self, c: float = 1.0) -> "BlockTridiag":
        out = self.copy()
        out.diag += c * np.eye(self.d)
        return out

    def is_zero(self) -> bool:
        return not (np.any(self.diag) or np.any(self.off))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Apply to node-shaped input (..., n_blocks, d)."""
        x = np.asarray(x, dtype=float)
        y = np.einsum("mij,...mj->...mi", self.diag, x)
        y[..., :-1, :] += np.einsum("mij,...mj->...mi", self.off, x[..., 1:, :])
        y[..., 1:, :] += np.einsum("mji,...mj->...mi", self.off, x[..., :-1, :])
        return y

    def quadratic_form(self, x: np.ndarray) -> np.ndarray:
        """x^T M x for node-shaped input (..., n_blocks, d)."""
        return np.einsum("...mi,...mi->...", np.asarray(x), self.matvec(x))

    def to_banded_lower(self) -> np.ndarray:
        """Symmetric lower banded storage, ab[i, j] = M[j + i, j]."""
        nb, d = self.n_blocks, self.d
        n = nb * d
        k = 2 * d - 1
        ab = np.zeros((k + 1, n))
        for bi in range(nb):
            blk = self.diag[bi]
            for a in range(d):
                for b in range(a, d):
                    ab[b - a, bi * d + a] = blk[b, a]
        # sub-diagonal blocks are off[bi].T at rows (bi+1), columns bi
        for bi in range(nb - 1):
            blk_t = self.off[bi].T
            for a in range(d):
                for b in range(d):
                    i = (bi + 1) * d + b
                    j = bi * d + a
                    ab[i - j, j] = blk_t[b, a]
        return ab

    def to_dense(self) -> np.ndarray:
        nb, d = self.n_blocks, self.d
        out = np.zeros((nb * d, nb * d))
        for bi in range(nb):
            out[bi * d : (bi + 1) * d, bi * d : (bi + 1) * d] = self.diag[bi]
        for bi in range(nb - 1):
            out[bi * d : (bi + 1) * d, (bi + 1) * d : (bi + 2) * d] = self.off[bi]
            out[(bi + 1) * d : (bi + 2) * d, bi * d : (bi + 1) * d] = self.off[bi].T
        return out

    @classmethod
    def zeros(cls, n_blocks: int, d: int) -> "BlockTridiag":
        return cls(np.zeros((n_blocks, d, d)), np.zeros((max(n_blocks - 1, 0), d, d)))


class CholeskyFactor:
    """Banded lower Cholesky factor of a symmetric positive definite banded
    matrix; supports full solves and the two triangular half-solves."""

    def __init__(self, ab_lower: np.ndarray):
        self.k = ab_lower.shape[0] - 1
        self.n = ab_lower.shape[1]
        try:
            self.cb = sla.cholesky_banded(ab_lower, lower=True)
        except sla.LinAlgError as exc:
            raise sla.LinAlgError(
                "banded Cholesky failed; operator is not positive definite"
            ) from exc
        # upper banded storage of L^T for solve_banded
        k, n = self.k, self.n
        ub = np.zeros((k + 1, n))
        for r in range(k + 1):
            ub[k - r, r:] = self.cb[r, : n - r]
        self._ub = ub

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve (L L^T) x = b."""
        return self.solve_lt(self.solve_l(b))

    def solve_l(self, b: np.ndarray) -> np.ndarray:
        """Solve L x = b."""
        return sla.solve_banded((self.k, 0), self.cb, b, check_finite=False)

    def solve_lt(self, b: np.ndarray) -> np.ndarray:
        """Solve L^T x = b."""
        return sla.solve_banded((0, self.k), self._ub, b, check_finite=False)

    def reconstruct(self) -> np.ndarray:
        """Dense L L^T, for tests on small instances."""
        L = np.zeros((self.n, self.n))
        for r in range(self.k + 1):
            L += np.diag(self.cb[r, : self.n - r], -r)
        return L @ L.T


def cholesky_banded(mat) -> CholeskyFactor:
    """Factor a :class:`BlockTridiag` (or symmetric lower banded array)."""
    if isinstance(mat, BlockTridiag):
        mat = mat.to_banded_lower()
    return CholeskyFactor(np.asarray(mat, dtype=float))


@dataclass
class DiscreteOperator:
    """Precision matrices, boundary data and forcing for one problem.

    ``precision_full`` together with ``forcing_full`` describes the
    quadratic part of the log target over all M+1 nodes (boundary nodes
    included); ``precision``/``forcing`` are the restriction to the unknown
    nodes with Dirichlet couplings folded in.  ``precision0`` is the
    preconditioner: the full operator for free paths, the bare
    second-difference part for bridges, and the second-difference part with
    a Robin regularization (coefficient ``epsilon`` at the right end) for
    smoothing, where the bare operator is singular.
    """

    grid: Grid
    d: int
    variant: str
    precision_full: BlockTridiag
    forcing_full: np.ndarray
    precision: BlockTridiag
    precision0: BlockTridiag
    forcing: np.ndarray
    unknown_start: int
    unknown_stop: int
    fixed_left: Optional[np.ndarray]
    fixed_right: Optional[np.ndarray]
    boundary_modes: tuple
    epsilon: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_unknown_nodes(self) -> int:
        return self.unknown_stop - self.unknown_start

    @property
    def precision1(self) -> BlockTridiag:
        """Lower-order remainder: precision - precision0."""
        if "prec1" not in self._cache:
            self._cache["prec1"] = self.precision - self.precision0
        return self._cache["prec1"]

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Full node array (..., M+1, d) -> unknown nodes (..., n_u, d)."""
        return np.asarray(values)[..., self.unknown_start : self.unknown_stop, :]

    def embed(self, unknown: np.ndarray) -> np.ndarray:
        """Unknown node array (..., n_u, d) -> full array with fixed nodes set."""
        unknown = np.asarray(unknown, dtype=float)
        shape = unknown.shape[:-2] + (self.grid.M + 1, self.d)
        out = np.zeros(shape)
        out[..., self.unknown_start : self.unknown_stop, :] = unknown
        if self.fixed_left is not None:
            out[..., 0, :] = self.fixed_left
        if self.fixed_right is not None:
            out[..., -1, :] = self.fixed_right
        return out

    def chol(self) -> CholeskyFactor:
        if "chol" not in self._cache:
            self._cache["chol"] = cholesky_banded(self.precision)
        return self._cache["chol"]

    def chol0(self) -> CholeskyFactor:
        if "chol0" not in self._cache:
            self._cache["chol0"] = cholesky_banded(self.precision0)
        return self._cache["chol0"]

    def chol_shifted(self, coef: float) -> CholeskyFactor:
        """Factor of (I + coef * precision), cached per coefficient."""
        key = ("shifted", float(coef))
        if key not in self._cache:
            self._cache[key] = cholesky_banded(
                self.precision.scaled(coef).plus_identity()
            )
        return self._cache[key]


def _cell_block(S: np.ndarray, A: np.ndarray, du: float) -> np.ndarray:
    """Local 2d x 2d contribution of one cell to the quadratic form.

    du * G^T S G with G = [-I/du - A/2 | I/du - A/2] maps the pair
    (x_m, x_{m+1}) to |(x_{m+1}-x_m)/du - A (x_m+x_{m+1})/2|_B^2 * du.
    """
    d = S.shape[0]
    eye = np.eye(d)
    G = np.hstack([-eye / du - 0.5 * A, eye / du - 0.5 * A])
    return du * G.T @ S @ G


def _assemble_cells(S: np.ndarray, A: np.ndarray, grid: Grid) -> BlockTridiag:
    d = S.shape[0]
    M = grid.M
    local = _cell_block(S, A, grid.du)
    diag = np.zeros((M + 1, d, d))
    off = np.zeros((M, d, d))
    diag[:-1] += local[:d, :d]
    diag[1:] += local[d:, d:]
    off[:] = local[:d, d:]
    return BlockTridiag(diag, off)


def assemble_precision(
    spec: ProblemSpec, grid: Grid, epsilon: float = 1.0
) -> DiscreteOperator:
    """Build the discrete precision operator for one problem variant.

    Raises for grids with fewer than 2 intervals and propagates hard errors
    from singular noise matrices (caught at spec construction).
    """
    d = spec.d
    M = grid.M

    if isinstance(spec, (FreePathProblem, BridgeProblem)):
        S = spec.mats.BBt_inv
        A = spec.mats.A
        full = _assemble_cells(S, A, grid)
        g_full = np.zeros((M + 1, d))
        if isinstance(spec, BridgeProblem):
            start, stop = 1, M
            fixed_left, fixed_right = spec.x_minus, spec.x_plus
            modes = (("dirichlet", spec.x_minus), ("dirichlet", spec.x_plus))
        else:
            start, stop = 1, M + 1
            fixed_left, fixed_right = spec.x_minus, None
            modes = (("dirichlet", spec.x_minus), ("robin_linear", A))
        prec = BlockTridiag(
            full.diag[start:stop].copy(), full.off[start : stop - 1].copy()
        )
        g = np.zeros((stop - start, d))
        # Dirichlet elimination: g_u = -Lam_{u,b} x_b
        g[0] -= full.off[0].T @ fixed_left
        if fixed_right is not None:
            g[-1] -= full.off[M - 1] @ fixed_right
        if isinstance(spec, BridgeProblem):
            cells0 = _assemble_cells(S, np.zeros((d, d)), grid)
            prec0 = BlockTridiag(
                cells0.diag[start:stop].copy(), cells0.off[start : stop - 1].copy()
            )
        else:
            prec0 = prec.copy()
        return DiscreteOperator(
            grid=grid,
            d=d,
            variant=spec.variant,
            precision_full=full,
            forcing_full=g_full,
            precision=prec,
            precision0=prec0,
            forcing=g,
            unknown_start=start,
            unknown_stop=stop,
            fixed_left=fixed_left,
            fixed_right=fixed_right,
            boundary_modes=modes,
            epsilon=epsilon,
        )

    if isinstance(spec, SmoothingProblem):
        S = np.linalg.inv(spec.B11 @ spec.B11.T)
        cells = _assemble_cells(S, np.zeros((d, d)), grid)
        W = spec.obs_precision
        obs_block = spec.A21.T @ W @ spec.A21
        full = cells.copy()
        full.diag += grid.weights[:, None, None] * obs_block
        # forcing pairs each increment with the cell-midpoint average
        inc = spec.observations.increments
        coupling = inc @ (spec.A21.T @ W).T  # (M, d): A21^T W dY_m
        g_full = np.zeros((M + 1, d))
        g_full[:-1] += 0.5 * coupling
        g_full[1:] += 0.5 * coupling
        prec0 = cells.copy()
        prec0.diag[-1] += epsilon * np.eye(d)
        return DiscreteOperator(
            grid=grid,
            d=d,
            variant=spec.variant,
            precision_full=full,
            forcing_full=g_full,
            precision=full.copy(),
            precision0=prec0,
            forcing=g_full.copy(),
            unknown_start=0,
            unknown_stop=M + 1,
            fixed_left=None,
            fixed_right=None,
            boundary_modes=(("neumann", None), ("robin_regularized", epsilon)),
            epsilon=epsilon,
        )

    raise TypeError(f"unsupported problem spec {type(spec).__name__}")


def solve_bvp(op: DiscreteOperator, rhs: Optional[np.ndarray] = None) -> Path:
    """Solve precision * x = rhs + g over the unknowns and reinstate the
    Dirichlet nodes.  ``rhs`` is node-shaped over the unknowns (or None)."""
    n_u = op.n_unknown_nodes
    b = op.forcing.copy()
    if rhs is not None:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (n_u, op.d):
            raise ValueError(f"rhs must have shape ({n_u}, {op.d})")
        b = b + rhs
    z = op.chol().solve(b.ravel())
    return Path(op.embed(z.reshape(n_u, op.d)), op.grid)


def sample_from_precision(
    factor: CholeskyFactor, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """Draw from N(0, Lam^{-1}) given the Cholesky factor of Lam: solve
    L^T z = xi with xi standard normal.  Returns (n,) or (size, n)."""
    if size is None:
        xi = rng.standard_normal(factor.n)
        return factor.solve_lt(xi)
    xi = rng.standard_normal((factor.n, size))
    return factor.solve_lt(xi).T


def mean_path(spec: ProblemSpec, grid: Grid) -> Path:
    """Mean of the Gaussian reference law: the solution of the discrete
    boundary value problem with observation forcing (zero for free paths
    and bridges, where only boundary data enters)."""
    op = assemble_precision(spec, grid)
    return solve_bvp(op)
