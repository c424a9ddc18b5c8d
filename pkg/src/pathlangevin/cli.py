"""Command-line front end.

Run plans are TOML files; observations travel as CSV; outputs are CSV plus
JSON with fixed float formatting (%.12g) so identical inputs produce
byte-identical files.  Exit codes: 0 success, 2 configuration error,
3 chain divergence, 4 oracle infeasible.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import math
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import diagnostics
from .diagnostics import ergodic_average, iact
from .measure import build_target
from .model import (
    BridgeProblem,
    FreePathProblem,
    Grid,
    Observations,
    ProblemSpec,
    SmoothingProblem,
    builtin_potential,
    make_matrix_set,
    stationary_start_weight,
    validate_problem,
    zero_potential,
)
from .operators import mean_path
from .oracle import importance_bridge, mala_oracle, rejection_bridge
from .sampler import ChainResult, SamplerConfig, default_functionals, run_chain

__all__ = [
    "ConfigError",
    "RunPlan",
    "parse_config",
    "load_observations",
    "save_observations",
    "emit_outputs",
    "main",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_ORACLE",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ORACLE = 4

_KEY_HINTS = {
    "stepsize": "delta",
    "step_size": "delta",
    "dt": "delta",
    "nsteps": "steps",
    "n_steps": "steps",
    "burnin": "burn_in",
    "thinning": "thin",
}


class ConfigError(Exception):
    """Configuration problem; rendered with the offending line if known."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _find_line(text: Optional[str], key: str) -> Optional[int]:
    if text is None:
        return None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=", re.MULTILINE)
    m = pat.search(text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def _reject_unknown(section: dict, allowed: set[str], where: str, text: Optional[str]):
    for key in section:
        if key not in allowed:
            hint = _KEY_HINTS.get(key)
            if hint is None:
                close = difflib.get_close_matches(key, sorted(allowed), n=1)
                hint = close[0] if close else None
            suffix = f'; did you mean "{hint}"?' if hint else ""
            raise ConfigError(
                f'unknown key "{key}" in [{where}]{suffix}', _find_line(text, key)
            )


def _matrix(value, name, text) -> list[list[float]]:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f'"{name}" must be a matrix (list of rows)', _find_line(text, name))
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return [[float(v) for v in row] for row in arr]


def _vector(value, name, text) -> list[float]:
    try:
        arr = np.atleast_1d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(f'"{name}" must be a number or list', _find_line(text, name))
    if arr.ndim != 1:
        raise ConfigError(f'"{name}" must be one-dimensional', _find_line(text, name))
    return [float(v) for v in arr]


@dataclass
class RunPlan:
    """Fully resolved run description.

    ``canonical`` is a plain nested dict of normalized values that fully
    determines the plan; it round-trips through :meth:`to_toml`.
    """

    canonical: dict

    @property
    def grid(self) -> Grid:
        return Grid(self.canonical["grid"]["M"])

    @property
    def seed(self) -> int:
        return self.canonical["run"]["seed"]

    @property
    def strict(self) -> bool:
        return self.canonical["run"]["strict"]

    @property
    def oracle(self) -> dict:
        return self.canonical["oracle"]

    def sampler_config(self) -> SamplerConfig:
        s = self.canonical["sampler"]
        return SamplerConfig(
            delta=s["delta"],
            steps=s["steps"],
            scheme=s["scheme"],
            theta=s["theta"],
            burn_in=s["burn_in"],
            thin=s["thin"],
            r_max=None if s["r_max"] == 0.0 else s["r_max"],
            epsilon=s["epsilon"],
        )

    def build_spec(self) -> ProblemSpec:
        prob = self.canonical["problem"]
        pot_cfg = prob["potential"]
        kind = pot_cfg["kind"]
        if kind == "quadratic":
            potential = builtin_potential("quadratic", Q=np.asarray(pot_cfg["Q"]))
        elif kind == "double_well":
            potential = builtin_potential(
                "double_well", a=pot_cfg["a"], b=pot_cfg["b"], d=pot_cfg["d"]
            )
        elif kind == "zero":
            potential = zero_potential(pot_cfg["d"])
        else:  # pragma: no cover - blocked at parse time
            raise ConfigError(f"unknown potential kind {kind!r}")

        if prob["variant"] in ("free_path", "bridge"):
            mats = make_matrix_set(
                A=np.asarray(prob["matrices"]["A"]),
                B=np.asarray(prob["matrices"]["B"]),
            )
            x_minus = np.asarray(prob["endpoints"]["x_minus"])
            if prob["variant"] == "bridge":
                return BridgeProblem(
                    mats=mats,
                    potential=potential,
                    x_minus=x_minus,
                    x_plus=np.asarray(prob["endpoints"]["x_plus"]),
                )
            return FreePathProblem(mats=mats, potential=potential, x_minus=x_minus)

        sm = prob["smoothing"]
        obs = load_observations(sm["observations"], self.grid)
        if sm["start_weight"] != "stationary":  # pragma: no cover - blocked at parse
            raise ConfigError(f"unknown start_weight {sm['start_weight']!r}")
        return SmoothingProblem(
            A21=np.asarray(sm["A21"]),
            B11=np.asarray(sm["B11"]),
            B22=np.asarray(sm["B22"]),
            potential=potential,
            start_weight=stationary_start_weight(potential),
            observations=obs,
        )

    def to_toml(self) -> str:
        return _toml_dumps(self.canonical)


def _parse_plan_dict(raw: dict, base_dir: Optional[FsPath], text: Optional[str]) -> RunPlan:
    _reject_unknown(raw, {"problem", "grid", "sampler", "oracle", "run"}, "", text)
    if "problem" not in raw or "grid" not in raw or "sampler" not in raw:
        missing = [k for k in ("problem", "grid", "sampler") if k not in raw]
        raise ConfigError(f"missing required sections: {', '.join(missing)}")

    prob_raw = raw["problem"]
    _reject_unknown(
        prob_raw,
        {"variant", "matrices", "potential", "endpoints", "smoothing"},
        "problem",
        text,
    )
    variant = prob_raw.get("variant")
    if variant not in ("free_path", "bridge", "smoothing"):
        raise ConfigError(
            f'problem.variant must be "free_path", "bridge" or "smoothing", got {variant!r}',
            _find_line(text, "variant"),
        )

    pot_raw = prob_raw.get("potential")
    if not isinstance(pot_raw, dict):
        raise ConfigError("missing [problem.potential] section")
    _reject_unknown(pot_raw, {"kind", "Q", "a", "b", "d"}, "problem.potential", text)
    kind = pot_raw.get("kind")
    if kind not in ("quadratic", "double_well", "zero"):
        raise ConfigError(
            f'potential kind must be "quadratic", "double_well" or "zero", got {kind!r}',
            _find_line(text, "kind"),
        )
    potential: dict[str, Any] = {"kind": kind}
    if kind == "quadratic":
        if "Q" not in pot_raw:
            raise ConfigError("quadratic potential needs Q")
        potential["Q"] = _matrix(pot_raw["Q"], "Q", text)
        potential["d"] = len(potential["Q"])
    elif kind == "double_well":
        try:
            potential["a"] = float(pot_raw["a"])
            potential["b"] = float(pot_raw["b"])
        except KeyError as exc:
            raise ConfigError(f"double_well potential needs {exc.args[0]}")
        potential["d"] = int(pot_raw.get("d", 1))
    else:
        potential["d"] = int(pot_raw.get("d", 1))

    problem: dict[str, Any] = {"variant": variant, "potential": potential}
    d = potential["d"]

    if variant in ("free_path", "bridge"):
        mats_raw = prob_raw.get("matrices", {})
        _reject_unknown(mats_raw, {"A", "B"}, "problem.matrices", text)
        A = _matrix(mats_raw.get("A", np.zeros((d, d)).tolist()), "A", text)
        B = _matrix(mats_raw.get("B", np.eye(d).tolist()), "B", text)
        problem["matrices"] = {"A": A, "B": B}
        ep_raw = prob_raw.get("endpoints")
        if not isinstance(ep_raw, dict) or "x_minus" not in ep_raw:
            raise ConfigError("missing [problem.endpoints] with x_minus")
        _reject_unknown(ep_raw, {"x_minus", "x_plus"}, "problem.endpoints", text)
        endpoints = {"x_minus": _vector(ep_raw["x_minus"], "x_minus", text)}
        if variant == "bridge":
            if "x_plus" not in ep_raw:
                raise ConfigError("bridge problems need endpoints.x_plus")
            endpoints["x_plus"] = _vector(ep_raw["x_plus"], "x_plus", text)
        problem["endpoints"] = endpoints
    else:
        sm_raw = prob_raw.get("smoothing")
        if not isinstance(sm_raw, dict):
            raise ConfigError("missing [problem.smoothing] section")
        _reject_unknown(
            sm_raw,
            {"A21", "B11", "B22", "start_weight", "observations"},
            "problem.smoothing",
            text,
        )
        if "observations" not in sm_raw:
            raise ConfigError("smoothing problems need an observations CSV path")
        obs_path = FsPath(str(sm_raw["observations"]))
        if base_dir is not None and not obs_path.is_absolute():
            obs_path = base_dir / obs_path
        start_weight = sm_raw.get("start_weight", "stationary")
        if start_weight != "stationary":
            raise ConfigError(
                f'unsupported start_weight {start_weight!r} (only "stationary")',
                _find_line(text, "start_weight"),
            )
        problem["smoothing"] = {
            "A21": _matrix(sm_raw.get("A21", [[1.0]]), "A21", text),
            "B11": _matrix(sm_raw.get("B11", np.eye(d).tolist()), "B11", text),
            "B22": _matrix(sm_raw.get("B22", [[1.0]]), "B22", text),
            "start_weight": start_weight,
            "observations": str(obs_path),
        }

    grid_raw = raw["grid"]
    _reject_unknown(grid_raw, {"M"}, "grid", text)
    if "M" not in grid_raw:
        raise ConfigError("grid needs M")
    M = int(grid_raw["M"])
    if M < 2:
        raise ConfigError("grid.M must be at least 2", _find_line(text, "M"))

    s_raw = raw["sampler"]
    _reject_unknown(
        s_raw,
        {"scheme", "delta", "theta", "steps", "burn_in", "thin", "r_max", "epsilon"},
        "sampler",
        text,
    )
    scheme = s_raw.get("scheme", "semi_implicit")
    if scheme not in ("semi_implicit", "preconditioned"):
        raise ConfigError(
            f"unknown sampler scheme {scheme!r}", _find_line(text, "scheme")
        )
    if "steps" not in s_raw:
        raise ConfigError("sampler needs steps")
    steps = int(s_raw["steps"])
    delta = float(s_raw.get("delta", 0.1 / M if scheme == "semi_implicit" else 0.1))
    sampler = {
        "scheme": scheme,
        "delta": delta,
        "theta": float(s_raw.get("theta", 0.5)),
        "steps": steps,
        "burn_in": int(s_raw.get("burn_in", steps // 10)),
        "thin": int(s_raw.get("thin", 10)),
        "r_max": float(s_raw.get("r_max", 0.0)),
        "epsilon": float(s_raw.get("epsilon", 1.0)),
    }
    if sampler["delta"] <= 0:
        raise ConfigError("sampler.delta must be positive", _find_line(text, "delta"))
    if sampler["burn_in"] > steps:
        raise ConfigError("sampler.burn_in exceeds steps", _find_line(text, "burn_in"))

    o_raw = raw.get("oracle", {})
    _reject_unknown(o_raw, {"kind", "n", "delta", "tol", "n_target", "thin"}, "oracle", text)
    o_kind = o_raw.get("kind", "importance")
    if o_kind not in ("importance", "rejection", "mala"):
        raise ConfigError(f"unknown oracle kind {o_kind!r}", _find_line(text, "kind"))
    oracle = {
        "kind": o_kind,
        "n": int(o_raw.get("n", 100000)),
        "delta": float(o_raw.get("delta", 0.002)),
        "tol": float(o_raw.get("tol", 0.05)),
        "n_target": int(o_raw.get("n_target", 2000)),
        "thin": int(o_raw.get("thin", 10)),
    }

    run_raw = raw.get("run", {})
    _reject_unknown(run_raw, {"seed", "strict"}, "run", text)
    run = {"seed": int(run_raw.get("seed", 0)), "strict": bool(run_raw.get("strict", False))}

    return RunPlan(
        canonical={
            "problem": problem,
            "grid": {"M": M},
            "sampler": sampler,
            "oracle": oracle,
            "run": run,
        }
    )


def parse_config(path) -> RunPlan:
    """Parse and normalize a TOML run plan; unknown keys are rejected."""
    path = FsPath(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}")
    return _parse_plan_dict(raw, path.parent, text)


# ---------------------------------------------------------------------------
# observation CSV


def load_observations(path, grid: Grid) -> Observations:
    """Read observations: either node values (u, Y_1..Y_m) or increments
    (cell, dY_1..dY_m).  Node u values must match the grid to 1e-9."""
    path = FsPath(path)
    if not path.exists():
        raise ConfigError(f"observations file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"observations file {path} is empty")
        rows = [[float(v) for v in row] for row in reader if row]
    header = [h.strip() for h in header]
    data = np.asarray(rows, dtype=float)
    if header[0] == "u":
        if data.shape[0] != grid.M + 1:
            raise ConfigError(
                f"expected {grid.M + 1} node rows, found {data.shape[0]}"
            )
        u = data[:, 0]
        if np.any(np.diff(u) <= 0):
            raise ConfigError("u column must be strictly increasing")
        if np.abs(u - grid.nodes).max() > 1e-9:
            raise ConfigError("u column does not match the grid nodes")
        return Observations.from_node_values(data[:, 1:], grid)
    if header[0] == "cell":
        if data.shape[0] != grid.M:
            raise ConfigError(f"expected {grid.M} increment rows, found {data.shape[0]}")
        cells = data[:, 0].astype(int)
        if not np.array_equal(cells, np.arange(grid.M)):
            raise ConfigError("cell column must be 0..M-1 in order")
        return Observations(data[:, 1:], grid)
    raise ConfigError(
        'observations header must start with "u" (node values) or "cell" (increments)'
    )


def save_observations(path, obs: Observations) -> None:
    """Write increments with full float precision (%.17g round-trips)."""
    inc = obs.increments
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell"] + [f"dY_{j + 1}" for j in range(inc.shape[1])])
        for i, row in enumerate(inc):
            writer.writerow([i] + [format(v, ".17g") for v in row])


# ---------------------------------------------------------------------------
# deterministic serialization


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    if x == int(x) and abs(x) < 1e15:
        # keep a float marker so json types are stable
        return format(x, ".1f")
    return format(x, ".12g")


def _json_dumps(obj, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for key in sorted(obj):
            items.append(f'{pad}  {json.dumps(str(key))}: {_json_dumps(obj[key], indent + 1)}')
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ", ".join(_json_dumps(v, indent + 1) for v in obj)
        return f"[{inner}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    FsPath(path).write_text(_json_dumps(obj) + "\n")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g") if v != int(v) else format(v, ".1f")
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def _toml_dumps(tree: dict) -> str:
    lines: list[str] = []

    def emit(section: dict, prefix: str):
        scalars = {k: v for k, v in section.items() if not isinstance(v, dict)}
        subs = {k: v for k, v in section.items() if isinstance(v, dict)}
        if prefix:
            lines.append(f"[{prefix}]")
        for key in sorted(scalars):
            lines.append(f"{key} = {_toml_value(scalars[key])}")
        if prefix or scalars:
            lines.append("")
        for key in sorted(subs):
            emit(subs[key], f"{prefix}.{key}" if prefix else key)

    for top in ("problem", "grid", "sampler", "oracle", "run"):
        if top in tree:
            emit(tree[top], top)
    return "\n".join(lines).rstrip() + "\n"


# ---------------------------------------------------------------------------
# output emission


def _samples_csv(path, samples: np.ndarray, grid: Grid, log_weights=None) -> None:
    d = samples.shape[2] if samples.size else 1
    header = ["sample_index", "u"] + [f"component_{j + 1}" for j in range(d)]
    if log_weights is not None:
        header.append("log_weight")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, sample in enumerate(samples):
            for mnode, u in enumerate(grid.nodes):
                row = [str(i), _fmt_float(float(u))]
                row += [_fmt_float(float(v)) for v in sample[mnode]]
                if log_weights is not None:
                    row.append(_fmt_float(float(log_weights[i])))
                writer.writerow(row)


def _functional_summary(series: dict[str, np.ndarray]) -> dict:
    out = {}
    for name, values in series.items():
        if len(values) >= 40:
            est = ergodic_average(values, burn_in=0, batches=20)
            out[name] = {
                "estimate": est.value,
                "se": est.se,
                "iact": iact(values),
            }
        elif len(values) > 0:
            out[name] = {
                "estimate": float(np.mean(values)),
                "se": None,
                "iact": None,
            }
        else:
            out[name] = {"estimate": None, "se": None, "iact": None}
    return out


def emit_outputs(result: ChainResult, grid: Grid, plan_canonical: dict, out_dir) -> dict:
    """Write samples.csv and summary.json for one chain result; returns the
    summary dict.  Deterministic given inputs."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _samples_csv(out / "samples.csv", result.samples, grid)
    summary = {
        "config": plan_canonical,
        "seed": result.seed,
        "scheme": result.config.scheme,
        "delta": result.config.delta,
        "steps": result.config.steps,
        "recorded": result.recorded,
        "n_samples": int(result.samples.shape[0]),
        "no_samples": bool(result.samples.shape[0] == 0),
        "diverged": result.diverged,
        "diverged_step": result.diverged_step,
        "watermark": result.watermark,
        "grid_M": grid.M,
        "nodes": [float(u) for u in grid.nodes],
        "node_mean": result.node_mean.tolist(),
        "node_var": result.node_var.tolist(),
        "node_mean_se": result.node_mean_se.tolist(),
        "node_var_se": result.node_var_se.tolist(),
        "functionals": _functional_summary(result.series),
    }
    write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# subcommands


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PATHLANGEVIN_THREADS", "1")))
    except ValueError:
        return 1


def _chain_job(canonical: dict, seed: int):
    plan = RunPlan(canonical)
    spec = plan.build_spec()
    return run_chain(spec, plan.grid, plan.sampler_config(), seed)


def _cmd_sample(args) -> int:
    plan = parse_config(args.config)
    if args.seed is not None:
        plan.canonical["run"]["seed"] = int(args.seed)
    strict = plan.strict or args.strict
    spec = plan.build_spec()
    try:
        validate_problem(spec, strict=strict)
    except ValueError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seeds = [plan.seed + 1000003 * i for i in range(args.chains)]
    jobs = [(plan.canonical, s) for s in seeds]
    threads = min(_threads(), len(jobs))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_chain_job, *zip(*jobs)))
    else:
        results = [_chain_job(c, s) for c, s in jobs]

    grid = plan.grid
    primary = results[0]
    if len(results) > 1:
        primary = _pool_chains(results)
    summary = emit_outputs(primary, grid, plan.canonical, args.out)
    if len(results) > 1:
        summary["n_chains"] = len(results)
        write_json(FsPath(args.out) / "summary.json", summary)
    if primary.diverged:
        print(
            f"chain diverged at step {primary.diverged_step}; partial results written",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    return EXIT_OK


def _pool_chains(results: list[ChainResult]) -> ChainResult:
    """Pool independent chains: concatenate samples and series, average the
    node statistics with independent-chain error propagation."""
    n = len(results)
    base = results[0]
    node_mean = np.mean([r.node_mean for r in results], axis=0)
    node_var = np.mean([r.node_var for r in results], axis=0)
    node_mean_se = np.sqrt(np.sum([r.node_mean_se**2 for r in results], axis=0)) / n
    node_var_se = np.sqrt(np.sum([r.node_var_se**2 for r in results], axis=0)) / n
    series = {
        k: np.concatenate([r.series[k] for r in results]) for k in base.series
    }
    return ChainResult(
        node_mean=node_mean,
        node_var=node_var,
        node_mean_se=node_mean_se,
        node_var_se=node_var_se,
        samples=np.concatenate([r.samples for r in results]),
        series=series,
        mean_path_values=base.mean_path_values,
        steps_run=sum(r.steps_run for r in results),
        recorded=sum(r.recorded for r in results),
        diverged=any(r.diverged for r in results),
        diverged_step=next((r.diverged_step for r in results if r.diverged), None),
        watermark=max(r.watermark for r in results),
        config=base.config,
        seed=base.seed,
    )


def _cmd_oracle(args) -> int:
    plan = parse_config(args.config)
    if args.seed is not None:
        plan.canonical["run"]["seed"] = int(args.seed)
    spec = plan.build_spec()
    grid = plan.grid
    rng = np.random.default_rng(plan.seed)
    cfg = plan.oracle
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra: dict[str, Any] = {}
    try:
        if cfg["kind"] == "importance":
            ens = importance_bridge(spec, grid, cfg["n"], rng)
        elif cfg["kind"] == "rejection":
            ens, rate = rejection_bridge(
                spec, grid, cfg["tol"], cfg["n_target"], rng
            )
            extra["acceptance_rate"] = rate
        else:
            target = build_target(spec, grid)
            ens, rate = mala_oracle(
                target, cfg["n"], cfg["delta"], rng, thin=cfg["thin"]
            )
            extra["acceptance_rate"] = rate
    except RuntimeError as exc:
        print(f"oracle infeasible: {exc}", file=sys.stderr)
        return EXIT_ORACLE

    functionals = default_functionals(grid)
    fsummary = {}
    for name, fn in functionals.items():
        est, se = ens.estimate(fn)
        fsummary[name] = {"estimate": est, "se": se, "iact": None}
    summary = {
        "config": plan.canonical,
        "seed": plan.seed,
        "oracle": cfg["kind"],
        "n_paths": int(ens.n),
        "n_eff": ens.n_eff,
        "grid_M": grid.M,
        "nodes": [float(u) for u in grid.nodes],
        "functionals": fsummary,
        **extra,
    }
    _samples_csv(out / "samples.csv", ens.paths, grid, log_weights=ens.log_weights)
    write_json(out / "summary.json", summary)
    return EXIT_OK


def _load_run_dir(dirpath) -> tuple[dict, np.ndarray, Optional[np.ndarray]]:
    dirpath = FsPath(dirpath)
    summary = json.loads((dirpath / "summary.json").read_text())
    with open(dirpath / "samples.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    weighted = header[-1] == "log_weight"
    M = summary["grid_M"]
    if rows:
        data = np.asarray(rows)
        n = int(data[-1, 0]) + 1
        d = data.shape[1] - 2 - (1 if weighted else 0)
        paths = data[:, 2 : 2 + d].reshape(n, M + 1, d)
        lw = data[:: M + 1, -1][:n] if weighted else None
    else:
        paths = np.zeros((0, M + 1, 1))
        lw = None
    return summary, paths, lw


def _cmd_compare(args) -> int:
    chain_summary, chain_paths, _ = _load_run_dir(args.chain)
    oracle_summary, oracle_paths, oracle_lw = _load_run_dir(args.oracle)
    if chain_summary["grid_M"] != oracle_summary["grid_M"]:
        print("grid mismatch between chain and oracle runs", file=sys.stderr)
        return EXIT_CONFIG
    M = chain_summary["grid_M"]

    def ests(summary):
        return {
            name: (entry["estimate"], entry["se"] or 0.0)
            for name, entry in summary["functionals"].items()
            if entry["estimate"] is not None
        }

    chain_est = ests(chain_summary)
    oracle_est = ests(oracle_summary)
    shared = sorted(set(chain_est) & set(oracle_est))
    marginals = None
    if len(chain_paths) and len(oracle_paths):
        mid = M // 2
        marginals = {
            "x_mid_marginal": (
                chain_paths[:, mid, 0],
                None,
                oracle_paths[:, mid, 0],
                oracle_lw,
            )
        }
    report = diagnostics.compare_report(
        {k: chain_est[k] for k in shared},
        {k: oracle_est[k] for k in shared},
        marginals=marginals,
        z_gate=args.z_gate,
        ks_gate=args.ks_gate,
    )
    out = FsPath(args.out) if args.out else FsPath(args.chain)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "z_gate": report.z_gate,
        "ks_gate": report.ks_gate,
        "all_pass": report.all_pass,
        "functionals": {
            r.name: {
                "chain": r.chain_value,
                "chain_se": r.chain_se,
                "oracle": r.oracle_value,
                "oracle_se": r.oracle_se,
                "z": r.z,
                "pass": r.passed,
            }
            for r in report.rows
        },
        "ks": {name: {"distance": dist, "pass": ok} for name, dist, ok in report.ks_rows},
    }
    write_json(out / "compare.json", payload)
    print(report)
    return EXIT_OK


def _cmd_mean_path(args) -> int:
    plan = parse_config(args.config)
    spec = plan.build_spec()
    grid = plan.grid
    m = mean_path(spec, grid)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mean_path.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u"] + [f"component_{j + 1}" for j in range(m.d)])
        for u, row in zip(grid.nodes, m.values):
            writer.writerow([_fmt_float(float(u))] + [_fmt_float(float(v)) for v in row])
    return EXIT_OK


def _cmd_validate(args) -> int:
    plan = parse_config(args.config)
    spec = plan.build_spec()
    try:
        report = validate_problem(spec, strict=plan.strict or args.strict)
    except ValueError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathlangevin",
        description="Sample conditioned diffusion paths with Langevin dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="run Langevin chains and write outputs")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("oracle", help="run a reference sampler")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("compare", help="gate a chain run against an oracle run")
    p.add_argument("--chain", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--z-gate", type=float, default=3.0)
    p.add_argument("--ks-gate", type=float, default=0.05)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("mean-path", help="solve the mean boundary value problem")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mean_path)

    p = sub.add_parser("validate", help="check the structural conditions only")
    p.add_argument("--config", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
