"""Log-density of the discrete target measure and its gradient.

The target factorizes as

    log pi(x) = -1/2 x^T Lam x + g^T x + log_tilt(x) + const,

where the quadratic part comes from the discrete operator and ``log_tilt``
collects the non-Gaussian terms: the Onsager--Machlup potential integrated
along the path, the drift-coupling term, and the endpoint weights.  The
endpoint terms act on the boundary nodes with weight one (they are genuine
boundary functionals, the discrete form of Dirac drift masses), while
interior density terms pair with the trapezoidal quadrature weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .model import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    MatrixSet,
    Path,
    Potential,
    ProblemSpec,
    SmoothingProblem,
)
from .operators import DiscreteOperator, assemble_precision

__all__ = [
    "om_potential",
    "om_potential_grad",
    "girsanov_log_density",
    "log_tilt",
    "grad_log_tilt",
    "TargetMeasure",
    "build_target",
]


def om_potential(pot: Potential, mats: MatrixSet, x: np.ndarray) -> np.ndarray:
    """Onsager--Machlup potential 1/2 (|B^T grad V|^2 - B B^T : hess V)."""
    x = np.asarray(x, dtype=float)
    one = x.ndim == 1
    pts = x[None, :] if one else x
    g = pot.grad(pts)
    h = pot.hess(pts)
    Bt_g = g @ mats.B  # rows are B^T grad V
    out = 0.5 * (
        np.einsum("ni,ni->n", Bt_g, Bt_g) - np.einsum("nij,ij->n", h, mats.BBt)
    )
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite potential derivatives")
    return out[0] if one else out


def om_potential_grad(pot: Potential, mats: MatrixSet, x: np.ndarray) -> np.ndarray:
    """Gradient of :func:`om_potential`:
    hess V . B B^T . grad V - 1/2 T(x; B B^T)."""
    x = np.asarray(x, dtype=float)
    one = x.ndim == 1
    pts = x[None, :] if one else x
    g = pot.grad(pts)
    h = pot.hess(pts)
    t = pot.third_contract(pts, mats.BBt)
    out = np.einsum("nij,jk,nk->ni", h, mats.BBt, g) - 0.5 * t
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite potential derivatives")
    return out[0] if one else out


def _path_values(path: Union[Path, np.ndarray], d: int) -> np.ndarray:
    if isinstance(path, Path):
        values = path.values
    else:
        values = np.asarray(path, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
    if values.shape[-1] != d:
        raise ValueError(f"path has {values.shape[-1]} components, expected {d}")
    return values


def _flatten_eval(fn, values):
    """Apply a (n, d) -> (n,) or (n, d) callback over (..., M+1, d) nodes."""
    flat = values.reshape(-1, values.shape[-1])
    out = fn(flat)
    return out.reshape(values.shape[:-1] + out.shape[1:])


def log_tilt(spec: ProblemSpec, grid: Grid, path: Union[Path, np.ndarray]) -> np.ndarray:
    """Non-Gaussian part of the log target, up to an additive constant.

    Supports batched paths of shape (..., M+1, d); returns shape (...,).
    """
    values = _path_values(path, spec.d)
    w = grid.weights
    pot = spec.potential

    if isinstance(spec, (FreePathProblem, BridgeProblem)):
        mats = spec.mats
        phi = _flatten_eval(lambda q: om_potential(pot, mats, q), values)
        out = -np.einsum("m,...m->...", w, phi)
        if np.any(mats.A):
            gv = _flatten_eval(pot.grad, values)
            drift_pair = np.einsum("...mi,ij,...mj->...m", gv, mats.A, values)
            out = out + np.einsum("m,...m->...", w, drift_pair)
        if isinstance(spec, FreePathProblem):
            out = out - _flatten_eval(pot.value, values[..., -1:, :])[..., 0]
        return out

    if isinstance(spec, SmoothingProblem):
        mats = spec.mats
        phi = _flatten_eval(lambda q: om_potential(pot, mats, q), values)
        out = -np.einsum("m,...m->...", w, phi)
        out = out + _flatten_eval(spec.start_weight.log_value, values[..., :1, :])[..., 0]
        out = out - _flatten_eval(pot.value, values[..., -1:, :])[..., 0]
        return out

    raise TypeError(f"unsupported problem spec {type(spec).__name__}")


def grad_log_tilt(
    spec: ProblemSpec, grid: Grid, path: Union[Path, np.ndarray]
) -> np.ndarray:
    """Node-wise gradient of :func:`log_tilt`, shape (..., M+1, d).

    Interior terms carry the quadrature weight of their node; the endpoint
    terms (final-value potential, start weight) act on the boundary node
    with weight one.
    """
    values = _path_values(path, spec.d)
    w = grid.weights
    pot = spec.potential

    if isinstance(spec, (FreePathProblem, BridgeProblem)):
        mats = spec.mats
        out = -w[:, None] * _flatten_eval(
            lambda q: om_potential_grad(pot, mats, q), values
        )
        if np.any(mats.A):
            gv = _flatten_eval(pot.grad, values)
            hv = _flatten_eval(pot.hess, values)
            term = np.einsum("...mij,jk,...mk->...mi", hv, mats.A, values)
            term = term + np.einsum("ji,...mj->...mi", mats.A, gv)
            out = out + w[:, None] * term
        if isinstance(spec, FreePathProblem):
            out[..., -1, :] -= _flatten_eval(pot.grad, values[..., -1:, :])[..., 0, :]
        return out

    if isinstance(spec, SmoothingProblem):
        mats = spec.mats
        out = -w[:, None] * _flatten_eval(
            lambda q: om_potential_grad(pot, mats, q), values
        )
        out[..., 0, :] += _flatten_eval(spec.start_weight.grad, values[..., :1, :])[
            ..., 0, :
        ]
        out[..., -1, :] -= _flatten_eval(pot.grad, values[..., -1:, :])[..., 0, :]
        return out

    raise TypeError(f"unsupported problem spec {type(spec).__name__}")


def girsanov_log_density(
    spec: Union[FreePathProblem, BridgeProblem], path: Union[Path, np.ndarray], grid: Grid = None
) -> np.ndarray:
    """Log-density of the nonlinear path law against the linear reference,
    up to normalization: -V(x_M) + sum w <grad V, A x> - sum w Phi.

    The start-point potential term is constant on these problems and
    omitted.
    """
    if isinstance(spec, SmoothingProblem):
        raise TypeError("Girsanov density applies to free-path and bridge problems")
    if grid is None:
        if not isinstance(path, Path):
            raise ValueError("pass a Path or supply the grid explicitly")
        grid = path.grid
    values = _path_values(path, spec.d)
    w = grid.weights
    pot, mats = spec.potential, spec.mats
    phi = _flatten_eval(lambda q: om_potential(pot, mats, q), values)
    out = -np.einsum("m,...m->...", w, phi)
    gv = _flatten_eval(pot.grad, values)
    drift_pair = np.einsum("...mi,ij,...mj->...m", gv, mats.A, values)
    out = out + np.einsum("m,...m->...", w, drift_pair)
    out = out - _flatten_eval(pot.value, values[..., -1:, :])[..., 0]
    return out


def _tilt_and_grad(
    spec: ProblemSpec, grid: Grid, values: np.ndarray
) -> tuple[float, np.ndarray]:
    """log_tilt and its node gradient for one path, sharing derivative calls."""
    w = grid.weights
    pot = spec.potential
    mats = spec.mats
    gv = pot.grad(values)
    hv = pot.hess(values)
    tv = pot.third_contract(values, mats.BBt)
    bt_g = gv @ mats.B
    phi = 0.5 * (
        np.einsum("mi,mi->m", bt_g, bt_g) - np.einsum("mij,ij->m", hv, mats.BBt)
    )
    phi_grad = np.einsum("mij,jk,mk->mi", hv, mats.BBt, gv) - 0.5 * tv

    val = -float(w @ phi)
    grad = -w[:, None] * phi_grad
    if isinstance(spec, (FreePathProblem, BridgeProblem)):
        if np.any(mats.A):
            val += float(w @ np.einsum("mi,ij,mj->m", gv, mats.A, values))
            grad += w[:, None] * (
                np.einsum("mij,jk,mk->mi", hv, mats.A, values)
                + np.einsum("ji,mj->mi", mats.A, gv)
            )
        if isinstance(spec, FreePathProblem):
            val -= float(pot.value(values[-1:])[0])
            grad[-1] -= gv[-1]
        return val, grad
    # smoothing
    val += float(spec.start_weight.log_value(values[:1])[0])
    grad[0] += spec.start_weight.grad(values[:1])[0]
    val -= float(pot.value(values[-1:])[0])
    grad[-1] -= gv[-1]
    return val, grad


@dataclass
class TargetMeasure:
    """Bundles the discrete operator with the nonlinear tilt of one problem.

    ``log_density`` and ``grad`` act on full node arrays (..., M+1, d);
    ``log_density_unknown``/``grad_unknown`` act on flattened unknown
    coordinates and are the sampler-facing surface.
    """

    spec: ProblemSpec
    grid: Grid
    op: DiscreteOperator

    def log_density(self, path: Union[Path, np.ndarray]) -> np.ndarray:
        values = _path_values(path, self.spec.d)
        quad = -0.5 * self.op.precision_full.quadratic_form(values)
        lin = np.einsum("mi,...mi->...", self.op.forcing_full, values)
        return quad + lin + log_tilt(self.spec, self.grid, values)

    def grad(self, path: Union[Path, np.ndarray]) -> np.ndarray:
        """Node-wise gradient, zeroed at Dirichlet nodes."""
        values = _path_values(path, self.spec.d)
        out = (
            -self.op.precision_full.matvec(values)
            + self.op.forcing_full
            + grad_log_tilt(self.spec, self.grid, values)
        )
        if self.op.fixed_left is not None:
            out[..., 0, :] = 0.0
        if self.op.fixed_right is not None:
            out[..., -1, :] = 0.0
        return out

    # -- unknown-coordinate views used by the samplers ---------------------

    def log_density_unknown(self, z: np.ndarray) -> np.ndarray:
        n_u, d = self.op.n_unknown_nodes, self.op.d
        z = np.asarray(z, dtype=float)
        values = self.op.embed(z.reshape(z.shape[:-1] + (n_u, d)))
        return self.log_density(values)

    def grad_unknown(self, z: np.ndarray) -> np.ndarray:
        n_u, d = self.op.n_unknown_nodes, self.op.d
        z = np.asarray(z, dtype=float)
        values = self.op.embed(z.reshape(z.shape[:-1] + (n_u, d)))
        g = self.op.restrict(self.grad(values))
        return g.reshape(z.shape)

    def tilt_grad_unknown(self, z: np.ndarray) -> np.ndarray:
        """grad log_tilt restricted to the unknowns, flattened."""
        n_u, d = self.op.n_unknown_nodes, self.op.d
        values = self.op.embed(z.reshape((n_u, d)))
        g = self.op.restrict(grad_log_tilt(self.spec, self.grid, values))
        return g.reshape(z.shape)

    def log_density_and_grad_unknown(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        """Fused density/gradient evaluation sharing the potential calls;
        this is the hot path of the Metropolis-adjusted oracle."""
        op = self.op
        n_u, d = op.n_unknown_nodes, op.d
        values = op.embed(z.reshape((n_u, d)))
        lam_x = op.precision_full.matvec(values)
        quad = -0.5 * float(np.einsum("mi,mi->", values, lam_x))
        quad += float(np.einsum("mi,mi->", op.forcing_full, values))
        tilt_val, tilt_grad = _tilt_and_grad(self.spec, self.grid, values)
        grad_full = -lam_x + op.forcing_full + tilt_grad
        g = op.restrict(grad_full)
        return quad + tilt_val, g.reshape(z.shape)


def build_target(spec: ProblemSpec, grid: Grid, epsilon: float = 1.0) -> TargetMeasure:
    """Assemble the discrete operator and wrap it with the problem's tilt."""
    op = assemble_precision(spec, grid, epsilon=epsilon)
    return TargetMeasure(spec=spec, grid=grid, op=op)
