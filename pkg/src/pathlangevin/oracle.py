"""Independent reference samplers and exact linear-case algebra.

These implementations deliberately avoid the Langevin machinery so that
chain output can be checked against them: forward Euler--Maruyama
simulation, importance sampling against the exact discrete Gaussian,
brute-force rejection on the endpoint, a Metropolis-adjusted random walk
on the exact discrete target, a Kalman/RTS smoother for linear problems,
and dense Gaussian algebra for any quadratic potential.  All of them run
on the same grid and the same discrete target as the samplers, so the
comparisons test the sampler rather than the grid bias (which is reported
separately by refinement sweeps).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .measure import TargetMeasure, build_target, log_tilt
from .model import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    Observations,
    Path,
    ProblemSpec,
    SmoothingProblem,
)
from .operators import assemble_precision, sample_from_precision, solve_bvp

__all__ = [
    "WeightedEnsemble",
    "simulate_sde",
    "importance_bridge",
    "rejection_bridge",
    "mala_oracle",
    "rts_smoother",
    "GaussianMoments",
    "gaussian_reference_moments",
]

_EXPLOSION_LIMIT = 1e8


@dataclass
class WeightedEnsemble:
    """Paths with log-weights; equal weights are all zero."""

    paths: np.ndarray  # (n, M+1, d)
    log_weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if not np.all(np.isfinite(self.log_weights)):
            raise ValueError("log-weights must be finite")

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    @property
    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        w = np.exp(lw)
        return w / w.sum()

    @property
    def n_eff(self) -> float:
        w = self.normalized_weights
        return 1.0 / float((w**2).sum())

    def estimate(self, fn: Callable[[np.ndarray], float]) -> tuple[float, float]:
        """Self-normalized estimate of E[fn(path)] with its standard error."""
        vals = np.array([fn(p) for p in self.paths])
        w = self.normalized_weights
        est = float(w @ vals)
        se = float(np.sqrt((w**2 * (vals - est) ** 2).sum()))
        return est, se

    def marginal(self, node: int, component: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Values and normalized weights of one node marginal."""
        return self.paths[:, node, component], self.normalized_weights


def _drift(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """A x - B B^T grad V(x) on a batch of states (n, d)."""
    mats = spec.mats
    out = -spec.potential.grad(x) @ mats.BBt.T
    if np.any(mats.A):
        out = out + x @ mats.A.T
    return out


def simulate_sde(
    spec: ProblemSpec,
    grid: Grid,
    rng: np.random.Generator,
    n_paths: int = 1,
    x0: Optional[np.ndarray] = None,
):
    """Euler--Maruyama paths of the generative model on the grid.

    For free-path and bridge specs this simulates the unconditioned
    dynamics started at ``x_minus``.  For smoothing it additionally returns
    the synthetic observation increments: ``(paths, y_increments)`` with
    shapes (n, M+1, d) and (n, M, m).  The smoothing start point defaults
    to a Gaussian (Laplace) approximation of the declared start density,
    exact when the potential and start weight are quadratic.
    """
    d = spec.d
    M, du = grid.M, grid.du
    sq = math.sqrt(du)

    if isinstance(spec, SmoothingProblem):
        if x0 is None:
            prec = spec.potential.hess(np.zeros((1, d)))[0]
            if spec.start_weight.hess is not None:
                prec = prec - spec.start_weight.hess(np.zeros((1, d)))[0]
            lead = spec.potential.grad(np.zeros((1, d)))[0] - spec.start_weight.grad(
                np.zeros((1, d))
            )[0]
            cov = np.linalg.inv(prec)
            mean = -cov @ lead
            x = mean + rng.standard_normal((n_paths, d)) @ np.linalg.cholesky(cov).T
        else:
            x = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, d)).copy()
        paths = np.empty((n_paths, M + 1, d))
        yinc = np.empty((n_paths, M, spec.m))
        paths[:, 0] = x
        for mstep in range(M):
            yinc[:, mstep] = du * x @ spec.A21.T + sq * rng.standard_normal(
                (n_paths, spec.m)
            ) @ spec.B22.T
            x = x + du * _drift(spec, x) + sq * rng.standard_normal(
                (n_paths, d)
            ) @ spec.B11.T
            if np.abs(x).max() > _EXPLOSION_LIMIT:
                raise ValueError(
                    "simulated path exploded; refine the grid (smaller du)"
                )
            paths[:, mstep + 1] = x
        return paths, yinc

    start = spec.x_minus if x0 is None else np.asarray(x0, dtype=float)
    x = np.broadcast_to(start, (n_paths, d)).copy()
    paths = np.empty((n_paths, M + 1, d))
    paths[:, 0] = x
    B = spec.mats.B
    for mstep in range(M):
        x = x + du * _drift(spec, x) + sq * rng.standard_normal((n_paths, d)) @ B.T
        if np.abs(x).max() > _EXPLOSION_LIMIT:
            raise ValueError("simulated path exploded; refine the grid (smaller du)")
        paths[:, mstep + 1] = x
    return paths


def importance_bridge(
    spec: BridgeProblem, grid: Grid, n: int, rng: np.random.Generator
) -> WeightedEnsemble:
    """Exact discrete Gaussian bridges reweighted by the nonlinear tilt.

    Draws from N(mean path, Lam^{-1}) and attaches log-weights log_tilt, so
    any self-normalized estimate targets the nonlinear bridge law.
    """
    if not isinstance(spec, BridgeProblem):
        raise TypeError("importance_bridge requires a bridge problem")
    op = assemble_precision(spec, grid)
    m = solve_bvp(op).values
    z = sample_from_precision(op.chol(), rng, size=n)
    z = z.reshape(n, op.n_unknown_nodes, op.d)
    paths = np.tile(m, (n, 1, 1))
    paths[:, op.unknown_start : op.unknown_stop] += z
    lw = log_tilt(spec, grid, paths)
    ens = WeightedEnsemble(paths, lw)
    if ens.n_eff < 50:
        warnings.warn(
            f"importance weights are degenerate (n_eff = {ens.n_eff:.1f})",
            stacklevel=2,
        )
    return ens


def rejection_bridge(
    spec: BridgeProblem,
    grid: Grid,
    tol: float,
    n_target: int,
    rng: np.random.Generator,
    batch: int = 20000,
    max_sims: int = 20_000_000,
) -> tuple[WeightedEnsemble, float]:
    """Brute-force conditioning: simulate forward, keep paths whose right
    endpoint lands within ``tol`` (Euclidean) of the bridge target.

    Returns the accepted ensemble (equal weights) and the acceptance rate.
    Aborts if the acceptance rate drops below 1e-5.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    kept = []
    n_sim = 0
    n_acc = 0
    while n_acc < n_target:
        paths = simulate_sde(spec, grid, rng, n_paths=batch)
        n_sim += batch
        err = np.linalg.norm(paths[:, -1] - spec.x_plus, axis=1)
        sel = paths[err <= tol]
        if len(sel):
            kept.append(sel)
            n_acc += len(sel)
        rate = n_acc / n_sim
        if n_sim >= 10 * batch and rate < 1e-5:
            raise RuntimeError(
                f"rejection acceptance rate {rate:.2e} is below 1e-5; "
                "widen tol or use the importance or Metropolis oracles"
            )
        if n_sim >= max_sims:
            break
    if n_acc == 0:
        raise RuntimeError("rejection sampler accepted no paths")
    paths = np.concatenate(kept)[:n_target]
    return WeightedEnsemble(paths, np.zeros(len(paths))), n_acc / n_sim


def mala_oracle(
    target: TargetMeasure,
    n: int,
    delta: float,
    rng: np.random.Generator,
    x0: Optional[np.ndarray] = None,
    thin: int = 10,
    burn_in: Optional[int] = None,
) -> tuple[WeightedEnsemble, float]:
    """Metropolis-adjusted Langevin chain on the exact discrete target.

    The proposal is z' = z + delta grad log pi(z) + sqrt(2 delta) xi with
    the standard acceptance correction, so the chain is exactly invariant
    for the discrete target whatever the step size.  Returns the thinned
    ensemble and the acceptance rate; warns when the rate leaves
    [0.1, 0.9].
    """
    op = target.op
    if burn_in is None:
        burn_in = n // 10
    if x0 is None:
        z = op.restrict(solve_bvp(op).values).ravel().copy()
    else:
        z = op.restrict(np.asarray(x0, dtype=float)).ravel().copy()
    logp, grad = target.log_density_and_grad_unknown(z)
    sq = math.sqrt(2.0 * delta)
    kept = []
    n_acc = 0
    for step in range(n):
        xi = rng.standard_normal(z.size)
        zp = z + delta * grad + sq * xi
        logp_p, grad_p = target.log_density_and_grad_unknown(zp)
        # forward density in the exponent is -|xi|^2/2 up to shared constants
        fwd = -0.5 * float(xi @ xi)
        back = -float(
            np.square(z - zp - delta * grad_p).sum()
        ) / (4.0 * delta)
        log_alpha = logp_p - logp + back - fwd
        if math.log(rng.random()) < log_alpha:
            z, logp, grad = zp, logp_p, grad_p
            n_acc += 1
        if step >= burn_in and (step - burn_in) % thin == 0:
            kept.append(z.copy())
    rate = n_acc / max(n, 1)
    if not 0.1 <= rate <= 0.9:
        warnings.warn(
            f"Metropolis acceptance rate {rate:.2f} outside [0.1, 0.9]; "
            "retune delta",
            stacklevel=2,
        )
    zs = np.asarray(kept).reshape(len(kept), op.n_unknown_nodes, op.d)
    paths = op.embed(zs)
    return WeightedEnsemble(paths, np.zeros(len(paths))), rate


def _require_quadratic(spec: ProblemSpec) -> np.ndarray:
    pot = spec.potential
    d = spec.d
    h0 = pot.hess(np.zeros((1, d)))[0]
    h1 = pot.hess(np.full((1, d), 0.7))[0]
    if np.abs(h0 - h1).max() > 1e-10 * (1.0 + np.abs(h0).max()):
        raise ValueError("this oracle requires a quadratic potential")
    return h0


def rts_smoother(spec: SmoothingProblem, grid: Grid) -> tuple[Path, np.ndarray]:
    """Forward Kalman filter and backward smoothing pass on the
    Euler-discretized linear state space; exact posterior for quadratic V.

    Returns the posterior mean path and the marginal node variances
    (M+1, d).  Refuses non-quadratic potentials.
    """
    Q = _require_quadratic(spec)
    d, m_obs = spec.d, spec.m
    M, du = grid.M, grid.du
    BBt = spec.B11 @ spec.B11.T

    # start density: log zeta = start log-weight - V, Gaussian by assumption
    if spec.start_weight.hess is None:
        raise ValueError("linear smoothing needs a start weight with a Hessian")
    zero = np.zeros((1, d))
    p0_prec = Q - spec.start_weight.hess(zero)[0]
    lead = spec.start_weight.grad(zero)[0] - spec.potential.grad(zero)[0]
    P0 = np.linalg.inv(p0_prec)
    m0 = P0 @ lead

    F = np.eye(d) - du * BBt @ Q
    Qw = du * BBt
    H = du * spec.A21
    R = du * (spec.B22 @ spec.B22.T)
    inc = spec.observations.increments

    means_f = np.empty((M + 1, d))
    covs_f = np.empty((M + 1, d, d))
    means_p = np.empty((M + 1, d))  # predicted (prior to update)
    covs_p = np.empty((M + 1, d, d))
    mean, cov = m0, P0
    for k in range(M + 1):
        means_p[k] = mean
        covs_p[k] = cov
        if k < M:
            # update with the increment observed over cell k
            S = H @ cov @ H.T + R
            K = cov @ H.T @ np.linalg.inv(S)
            mean = mean + K @ (inc[k] - H @ mean)
            cov = cov - K @ H @ cov
        means_f[k] = mean
        covs_f[k] = cov
        if k < M:
            mean = F @ mean
            cov = F @ cov @ F.T + Qw

    means_s = means_f.copy()
    covs_s = covs_f.copy()
    for k in range(M - 1, -1, -1):
        G = covs_f[k] @ F.T @ np.linalg.inv(covs_p[k + 1])
        means_s[k] = means_f[k] + G @ (means_s[k + 1] - means_p[k + 1])
        covs_s[k] = covs_f[k] + G @ (covs_s[k + 1] - covs_p[k + 1]) @ G.T

    node_var = np.einsum("kii->ki", covs_s).copy()
    return Path(means_s, grid), node_var


@dataclass
class GaussianMoments:
    """Exact mean and covariance of the discrete target for quadratic V."""

    mean: Path
    cov_unknown: np.ndarray  # dense, over flattened unknown coordinates
    node_var: np.ndarray  # (M+1, d); zero at Dirichlet nodes
    unknown_start: int
    unknown_stop: int


def gaussian_reference_moments(
    spec: ProblemSpec, grid: Grid, max_dense: int = 256
) -> GaussianMoments:
    """Dense ground-truth moments when the potential (and, for smoothing,
    the start weight) is quadratic, so the target is Gaussian.

    The tilt's quadratic form is extracted by probing its gradient on unit
    paths, which is exact for affine gradients and verified on a random
    path; non-quadratic inputs are refused.
    """
    _require_quadratic(spec)
    if grid.M > max_dense:
        raise ValueError(f"dense reference limited to M <= {max_dense}")
    target = build_target(spec, grid)
    op = target.op
    n = op.n_unknown_nodes * op.d
    b = target.tilt_grad_unknown(np.zeros(n))
    Hu = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        Hu[:, j] = target.tilt_grad_unknown(e) - b
    Hu = 0.5 * (Hu + Hu.T)
    probe = np.sin(np.arange(n) + 0.5)
    pred = b + Hu @ probe
    actual = target.tilt_grad_unknown(probe)
    if np.abs(pred - actual).max() > 1e-8 * (1.0 + np.abs(actual).max()):
        raise ValueError("tilt gradient is not affine; potential not quadratic")

    lam_tot = op.precision.to_dense() - Hu
    eigs = np.linalg.eigvalsh(lam_tot)
    if eigs.min() <= 0:
        raise ValueError(
            f"total precision is not positive definite (min eig {eigs.min():.3g}); "
            "problem is ill-posed"
        )
    cov = np.linalg.inv(lam_tot)
    mean_u = cov @ (op.forcing.ravel() + b)
    mean = op.embed(mean_u.reshape(op.n_unknown_nodes, op.d))
    node_var = np.zeros((grid.M + 1, spec.d))
    var_u = np.diag(cov).reshape(op.n_unknown_nodes, op.d)
    node_var[op.unknown_start : op.unknown_stop] = var_u
    return GaussianMoments(
        mean=Path(mean, grid),
        cov_unknown=cov,
        node_var=node_var,
        unknown_start=op.unknown_start,
        unknown_stop=op.unknown_stop,
    )
