"""Estimates with error bars and the comparison gates used by acceptance
tests.

Standard errors come from non-overlapping batch means; mixing speed is
quantified by the integrated autocorrelation time with an
initial-positive-sequence truncation.  ``compare_report`` joins a chain
summary against an oracle summary with z-score and Kolmogorov--Smirnov
gates (3 standard errors and 0.05 by default, both overridable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ErgodicEstimate",
    "ergodic_average",
    "iact",
    "ks_distance",
    "CompareRow",
    "CompareReport",
    "compare_report",
]


@dataclass(frozen=True)
class ErgodicEstimate:
    value: float
    se: float
    n_batches: int
    burn_in: int


def ergodic_average(
    series: np.ndarray, burn_in: int = 0, batches: int = 20
) -> ErgodicEstimate:
    """Post-burn-in mean with a batch-means standard error.

    Requires at least one point per batch after burn-in; a reportable SE
    needs ``batches`` >= 20 (enforced by the caller's choice, not here).
    """
    series = np.asarray(series, dtype=float).ravel()
    tail = series[burn_in:]
    if len(tail) < batches:
        raise ValueError(
            f"series too short: {len(tail)} points after burn-in for {batches} batches"
        )
    bs = len(tail) // batches
    used = tail[: bs * batches].reshape(batches, bs)
    bm = used.mean(axis=1)
    value = float(tail.mean())
    se = float(bm.std(ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0
    return ErgodicEstimate(value=value, se=se, n_batches=batches, burn_in=burn_in)


def iact(series: np.ndarray) -> float:
    """Integrated autocorrelation time, 1 + 2 sum rho_t, truncated where
    the paired autocorrelation sums first turn negative.

    A constant series is defined to have IACT 1.
    """
    series = np.asarray(series, dtype=float).ravel()
    n = len(series)
    if n < 2:
        return 1.0
    x = series - series.mean()
    var = float(x @ x) / n
    if var == 0.0:
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]
    # sum lag pairs (0,1), (2,3), ... while they stay positive
    tau = -1.0
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
        t += 2
    return max(tau, 1.0)


def _weighted_ecdf_distance(
    a: np.ndarray, wa: np.ndarray, b: np.ndarray, wb: np.ndarray
) -> float:
    order_a = np.argsort(a, kind="mergesort")
    order_b = np.argsort(b, kind="mergesort")
    a, wa = a[order_a], wa[order_a]
    b, wb = b[order_b], wb[order_b]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca /= ca[-1]
    cb /= cb[-1]
    pooled = np.concatenate([a, b])
    ia = np.searchsorted(a, pooled, side="right")
    ib = np.searchsorted(b, pooled, side="right")
    fa = np.where(ia > 0, ca[ia - 1], 0.0)
    fb = np.where(ib > 0, cb[ib - 1], 0.0)
    return float(np.abs(fa - fb).max())


def ks_distance(
    samples_a: np.ndarray,
    samples_b: np.ndarray,
    log_weights_a: Optional[np.ndarray] = None,
    log_weights_b: Optional[np.ndarray] = None,
) -> float:
    """Two-sample Kolmogorov--Smirnov statistic; weighted empirical CDFs
    when log-weights are given.  Symmetric, in [0, 1]."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")

    def weights(lw, n):
        if lw is None:
            return np.full(n, 1.0 / n)
        lw = np.asarray(lw, dtype=float).ravel()
        w = np.exp(lw - lw.max())
        return w / w.sum()

    return _weighted_ecdf_distance(a, weights(log_weights_a, len(a)), b, weights(log_weights_b, len(b)))


@dataclass(frozen=True)
class CompareRow:
    name: str
    chain_value: float
    chain_se: float
    oracle_value: float
    oracle_se: float
    z: float
    passed: bool


@dataclass(frozen=True)
class CompareReport:
    rows: tuple[CompareRow, ...]
    ks_rows: tuple[tuple[str, float, bool], ...]
    z_gate: float
    ks_gate: float

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows) and all(ok for _, _, ok in self.ks_rows)

    def __str__(self):
        lines = [
            f"{'functional':<22} {'chain':>12} {'oracle':>12} {'z':>8}  gate"
        ]
        for r in self.rows:
            lines.append(
                f"{r.name:<22} {r.chain_value:>12.5g} {r.oracle_value:>12.5g} "
                f"{r.z:>8.2f}  {'pass' if r.passed else 'FAIL'}"
            )
        for name, dist, ok in self.ks_rows:
            lines.append(f"{name:<22} KS = {dist:.4f}  {'pass' if ok else 'FAIL'}")
        return "\n".join(lines)


def compare_report(
    chain: Mapping[str, tuple[float, float]],
    oracle: Mapping[str, tuple[float, float]],
    marginals: Optional[
        Mapping[str, tuple[np.ndarray, Optional[np.ndarray], np.ndarray, Optional[np.ndarray]]]
    ] = None,
    z_gate: float = 3.0,
    ks_gate: float = 0.05,
) -> CompareReport:
    """Join two (value, se) summaries on their shared functionals.

    ``marginals`` optionally maps names to
    (samples_a, log_weights_a, samples_b, log_weights_b) for KS gates.
    Functionals present on only one side raise, mirroring a grid mismatch.
    """
    names = sorted(chain)
    if sorted(oracle) != names:
        missing = set(chain).symmetric_difference(oracle)
        raise ValueError(f"summaries do not match; differing functionals: {sorted(missing)}")
    rows = []
    for name in names:
        cv, cs = chain[name]
        ov, os_ = oracle[name]
        denom = math.sqrt(cs**2 + os_**2)
        z = abs(cv - ov) / denom if denom > 0 else (0.0 if cv == ov else math.inf)
        rows.append(
            CompareRow(
                name=name,
                chain_value=cv,
                chain_se=cs,
                oracle_value=ov,
                oracle_se=os_,
                z=z,
                passed=z <= z_gate,
            )
        )
    ks_rows = []
    if marginals:
        for name in sorted(marginals):
            sa, lwa, sb, lwb = marginals[name]
            dist = ks_distance(sa, sb, lwa, lwb)
            ks_rows.append((name, dist, dist <= ks_gate))
    return CompareReport(
        rows=tuple(rows), ks_rows=tuple(ks_rows), z_gate=z_gate, ks_gate=ks_gate
    )
