"""Experiment configuration, orchestration and report emission.

A config file is YAML (or JSON, which YAML also reads) with the fields of
:class:`ExperimentConfig`. Minimal example::

    problem: affine-flux-interval
    seed: 7

Everything else takes the documented defaults in :data:`DEFAULTS`.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import yaml

from . import __version__, bsde, diagnostics, forward, geometry, problems
from .bsde import PiecewiseConstantBasis, PolynomialBasis, SolverConfig
from .forward import TimeGrid

CSV_HEADER = (
    "problem", "n", "dt", "paths", "component", "estimate", "stderr",
    "exact", "abs_error", "sup_coupling_distance", "wall_time_ms",
)

DEFAULTS = {
    "problem": "neumann-heat-interval",
    "start": None,  # None: the problem's own start point
    "grid": {"T": None, "steps": 1000},  # T None: the problem's horizon
    "paths": 100_000,
    "n_schedule": [4, 16, 64, 256],
    "solver": {
        "mode": "linear-mc",
        "picard_iterations": 3,
        "ridge_lambda": None,
        "basis": {"kind": "polynomial", "max_degree": 3},
    },
    "seed": 0,
    "output": "penbsde-out",
    "format": "csv",
    "workers": 1,
}

WORKERS_ENV = "PENBSDE_WORKERS"


class ConfigError(ValueError):
    """Invalid or unparsable configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ValidationFailure(RuntimeError):
    pass


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    start: Optional[tuple]  # (t, (x_1, ..., x_d)) or None
    T: Optional[float]
    steps: int
    paths: int
    n_schedule: tuple
    solver: SolverConfig
    seed: int
    output: str
    format: str
    workers: object  # int or "auto"

    @property
    def worker_count(self) -> int:
        return (os.cpu_count() or 1) if self.workers == "auto" else int(self.workers)

    def instance(self) -> problems.ProblemInstance:
        inst = problems.builtin(self.problem, self.T)
        if self.start is not None:
            inst = inst.with_start(self.start[0], self.start[1])
        return inst

    def grid(self, instance=None) -> TimeGrid:
        inst = self.instance() if instance is None else instance
        return TimeGrid.for_instance(inst, steps=self.steps)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(d, allowed, where):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown field {where}{k!r}", f"{where}{k}")


def _number(v, name, kind=float, minimum=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        raise ConfigError(f"field {name!r} must be {'an integer' if kind is int else 'a number'}", name)
    v = kind(v)
    if minimum is not None and v < minimum:
        raise ConfigError(f"field {name!r} must be >= {minimum}", name)
    return v


def _basis(d):
    if not isinstance(d, dict):
        raise ConfigError("field 'solver.basis' must be a mapping", "solver.basis")
    kind = d.get("kind", "polynomial")
    if kind == "polynomial":
        _check_keys(d, {"kind", "max_degree"}, "solver.basis.")
        return PolynomialBasis(_number(d.get("max_degree", 3), "solver.basis.max_degree", int, 0))
    if kind == "piecewise-constant":
        _check_keys(d, {"kind", "cells_per_axis"}, "solver.basis.")
        return PiecewiseConstantBasis(_number(d.get("cells_per_axis", 16), "solver.basis.cells_per_axis", int, 1))
    raise ConfigError(f"unknown basis kind {kind!r}", "solver.basis.kind")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Merge ``raw`` over :data:`DEFAULTS` and check every invariant."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    _check_keys(raw, DEFAULTS.keys(), "")
    d = _merge(DEFAULTS, raw)
    if isinstance(raw.get("solver"), dict) and "basis" in raw["solver"]:
        d["solver"]["basis"] = raw["solver"]["basis"]  # a basis is replaced whole, not merged
    prob = d["problem"]
    if isinstance(prob, dict):
        _check_keys(prob, {"builtin"}, "problem.")
        prob = prob.get("builtin")
    if prob not in problems.BUILTIN_NAMES:
        raise ConfigError(f"field 'problem' must be one of {', '.join(problems.BUILTIN_NAMES)}", "problem")

    start = d["start"]
    if start is not None:
        if not isinstance(start, dict) or set(start) - {"t", "x"} or "x" not in start:
            raise ConfigError("field 'start' must be a mapping with 't' and 'x'", "start")
        x = start["x"]
        x = [x] if not isinstance(x, list) else x
        start = (_number(start.get("t", 0.0), "start.t"), tuple(_number(v, "start.x") for v in x))

    grid = d["grid"]
    if not isinstance(grid, dict):
        raise ConfigError("field 'grid' must be a mapping", "grid")
    _check_keys(grid, {"T", "steps"}, "grid.")
    T = None if grid.get("T") is None else _number(grid["T"], "grid.T")
    if T is not None and not T > 0:
        raise ConfigError("field 'grid.T' must be positive", "grid.T")
    steps = _number(grid["steps"], "grid.steps", int, 1)

    paths = _number(d["paths"], "paths", int, 1)
    sched = d["n_schedule"]
    if not isinstance(sched, list):
        raise ConfigError("field 'n_schedule' must be a list", "n_schedule")
    sched = tuple(_number(v, "n_schedule", float, 1) for v in sched)
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("field 'n_schedule' must be strictly increasing", "n_schedule")
    sched = tuple(int(v) if v.is_integer() else v for v in sched)

    so = d["solver"]
    if not isinstance(so, dict):
        raise ConfigError("field 'solver' must be a mapping", "solver")
    _check_keys(so, {"mode", "picard_iterations", "ridge_lambda", "basis"}, "solver.")
    ridge = so.get("ridge_lambda")
    try:
        solver = SolverConfig(
            mode=so["mode"],
            picard_iterations=_number(so["picard_iterations"], "solver.picard_iterations", int, 1),
            ridge_lambda=None if ridge is None else _number(ridge, "solver.ridge_lambda", float, 0),
            basis=_basis(so["basis"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"field 'solver.mode': {exc}", "solver.mode") from None

    seed = _number(d["seed"], "seed", int, 0)
    if seed >= 2**64:
        raise ConfigError("field 'seed' must fit in 64 bits", "seed")
    fmt = d["format"]
    if fmt not in ("csv", "json"):
        raise ConfigError("field 'format' must be csv or json", "format")
    workers = d["workers"]
    if workers != "auto":
        workers = _number(workers, "workers", int, 1)
    if not isinstance(d["output"], str) or not d["output"]:
        raise ConfigError("field 'output' must be a directory path", "output")

    cfg = ExperimentConfig(
        prob, start, T, steps, paths, sched, solver, seed, d["output"], fmt, workers
    )
    if solver.mode != "linear-mc":
        dim = problems.builtin(prob).dim
        need = 10 * solver.basis.size(dim)
        if paths < need:
            raise ConfigError(f"field 'paths' must be >= {need} (10 x basis size) for {solver.mode}", "paths")
    return cfg


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse YAML or JSON text; syntax errors carry line and column."""
    try:
        if source.endswith(".json"):
            return json.loads(text)
        data = yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{source}: {where}{problem}") from None
    return {} if data is None else data


def read_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), str(path))


def load_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read, merge ``overrides`` on top (flags beat file beat defaults) and check."""
    raw = read_config_file(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(_merge(raw, overrides or {}))


def canonical(config: ExperimentConfig) -> dict:
    """Plain-data form of a config; reloading it gives an equal config."""
    b = config.solver.basis
    basis = (
        {"kind": "polynomial", "max_degree": b.max_degree}
        if isinstance(b, PolynomialBasis)
        else {"kind": "piecewise-constant", "cells_per_axis": b.cells_per_axis}
    )
    return {
        "problem": config.problem,
        "start": None if config.start is None else {"t": config.start[0], "x": list(config.start[1])},
        "grid": {"T": config.T, "steps": config.steps},
        "paths": config.paths,
        "n_schedule": list(config.n_schedule),
        "solver": {
            "mode": config.solver.mode,
            "picard_iterations": config.solver.picard_iterations,
            "ridge_lambda": config.solver.ridge_lambda,
            "basis": basis,
        },
        "seed": config.seed,
        "output": config.output,
        "format": config.format,
        "workers": config.workers,
    }


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(canonical(config), sort_keys=True)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str
    config_hash: str
    started: str
    finished: str = ""

    @classmethod
    def begin(cls, config: ExperimentConfig) -> "RunManifest":
        return cls(canonical(config), config.seed, __version__, config_hash(config), _now())

    def to_dict(self):
        return {
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
        }


def _now():
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ReportRow:
    problem: str
    n: object  # penalty level, "reflected" or "limit"
    dt: float
    paths: int
    component: int
    estimate: float
    stderr: float
    exact: Optional[float] = None
    abs_error: Optional[float] = None
    sup_coupling_distance: Optional[float] = None
    wall_time_ms: float = 0.0

    def values(self):
        return [getattr(self, k) for k in CSV_HEADER]


def _rows_for(problem, n, dt, paths, u, se, exact, sup_dist, wall_ms):
    rows = []
    for c in range(len(u)):
        ex = None if exact is None else float(exact[c])
        rows.append(ReportRow(
            problem, n, float(dt), int(paths), c, float(u[c]), float(se[c]), ex,
            None if ex is None else abs(float(u[c]) - ex),
            None if sup_dist is None else float(sup_dist), float(wall_ms),
        ))
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def _check_finite(rows):
    for i, r in enumerate(rows):
        for name in CSV_HEADER:
            v = getattr(r, name)
            if isinstance(v, (float, np.floating)) and not math.isfinite(v):
                raise ReportError(f"row {i}: field {name!r} is not finite ({v})")


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def emit_report(rows, manifest: RunManifest, format: str, output_dir: str, extra: Optional[dict] = None):
    """Write ``report.csv`` or ``report.json`` plus ``manifest.json`` into ``output_dir``.

    ``extra`` (e.g. ``{"diagnostics": ...}``) goes into the JSON report, or
    into the manifest for CSV output. Files are written to a temporary name
    and renamed, so a failure never leaves a partial report behind.
    Returns the list of written paths.
    """
    if not rows:
        raise ReportError("no rows to emit")
    if format not in ("csv", "json"):
        raise ReportError(f"unknown format {format!r}")
    _check_finite(rows)
    os.makedirs(output_dir, exist_ok=True)
    extra = extra or {}
    manifest.finished = _now()
    man = manifest.to_dict()
    if format == "csv":
        report = os.path.join(output_dir, "report.csv")
        text = rows_to_csv(rows)
        man.update(extra)
    else:
        report = os.path.join(output_dir, "report.json")
        body = {"rows": [{k: v for k, v in zip(CSV_HEADER, _json_values(r))} for r in rows]}
        body.update(extra)
        text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    man_path = os.path.join(output_dir, "manifest.json")
    _atomic_write(report, text)
    _atomic_write(man_path, json.dumps(man, indent=2, sort_keys=True) + "\n")
    return [report, man_path]


def _json_values(r):
    out = []
    for v in r.values():
        if isinstance(v, (np.floating,)):
            v = float(v)
        out.append(v)
    return out


# -- orchestration --------------------------------------------------------------


def geometry_property_suite(pairs: int = 10_000, rng_stream=0) -> problems.ValidationReport:
    """Projection inequality, penalty Lipschitz bound, idempotence and contraction."""
    gen = np.random.default_rng(rng_stream)
    rep = problems.ValidationReport()
    domains = {
        "ball": geometry.Ball([0.0, 0.0], 1.0),
        "box": geometry.Box([0.0, -1.0], [1.0, 2.0]),
        "halfspaces": geometry.HalfspaceIntersection(
            [[-1.0, 0.0], [0.0, -1.0], [1 / np.sqrt(2), 1 / np.sqrt(2)]], [0.0, 0.0, 1 / np.sqrt(2)]
        ),
    }
    for name, dom in domains.items():
        lo, hi = dom.bounding_box()
        mid, width = 0.5 * (lo + hi), hi - lo
        x = mid + 2.0 * width * (gen.random((pairs, dom.dim)) - 0.5) * 1.5
        y = mid + 2.0 * width * (gen.random((pairs, dom.dim)) - 0.5) * 1.5
        z = geometry.sample_points(dom, pairs, "interior", gen)
        z[: pairs // 4] = geometry.project(dom, x[: pairs // 4] + 0.1)
        dx, dy = geometry.penalty_delta(dom, x), geometry.penalty_delta(dom, y)
        px, py = geometry.project(dom, x), geometry.project(dom, y)
        gap = np.linalg.norm(x - y, axis=1)
        rep.add(f"{name}_projection_inequality", np.max(np.sum((z - x) * dx, axis=1)), slack=1e-12)
        rep.add(f"{name}_penalty_lipschitz", np.max(np.linalg.norm(dx - dy, axis=1) - 4 * gap), slack=1e-12)
        rep.add(f"{name}_idempotent", np.max(np.abs(geometry.project(dom, px) - px)), slack=0.0)
        rep.add(f"{name}_contraction", np.max(np.linalg.norm(px - py, axis=1) - gap), slack=1e-12)
    return rep


def _instance_config(cfg: ExperimentConfig, inst):
    # lsmc for drivers that depend on y, otherwise the configured mode
    if inst.drivers.y_free:
        return cfg.solver
    if cfg.solver.mode == "linear-mc":
        return SolverConfig(mode="lsmc-picard", basis=cfg.solver.basis, ridge_lambda=cfg.solver.ridge_lambda)
    return cfg.solver


@dataclass
class ValidationOutcome:
    status: int
    rows: list
    checks: list = field(default_factory=list)

    @property
    def failures(self):
        return [c for c in self.checks if not c["passed"]]


def run_validation(config: ExperimentConfig, instances=None, emit: bool = True) -> ValidationOutcome:
    """Geometry properties, assumption checks and exact-solution comparisons.

    ``instances`` defaults to every built-in problem. Exact-solution
    comparisons pass when ``|u_hat - u| <= 3 stderr + max(0.01, c sqrt(dt))``
    at the problem's start point on the reflected scheme, where ``c`` is the
    problem's declared time-step bias constant (zero on the intervals). Status is 0 when every
    check passes and 1 otherwise; rows are written either way.
    """
    manifest = RunManifest.begin(config)
    checks = []

    def record(group, rep):
        for c in rep.checks:
            checks.append({"group": group, "name": c.name, "passed": bool(c.passed), "worst": float(c.worst)})

    record("geometry", geometry_property_suite(rng_stream=config.seed))
    if instances is None:
        instances = [problems.builtin(n, config.T) for n in problems.BUILTIN_NAMES]
    rows = []
    for inst in instances:
        record(inst.name, problems.validate_instance(inst, 1000, config.seed))
        exact = inst.exact_value()
        if exact is None:
            continue
        grid = TimeGrid.for_instance(inst, steps=config.steps)
        t0 = time.perf_counter()
        u, se = bsde.estimate_u_point(
            inst, None, grid, config.paths, config.seed, _instance_config(config, inst), config.worker_count
        )
        wall = 1e3 * (time.perf_counter() - t0)
        new = _rows_for(inst.name, "reflected", grid.dt, config.paths, u, se, exact, None, wall)
        rows.extend(new)
        allowance = max(0.01, inst.exact.bias_constant * np.sqrt(grid.dt))
        for r in new:
            margin = r.abs_error - 3 * r.stderr - allowance
            checks.append({
                "group": inst.name, "name": f"exact_solution_component_{r.component}",
                "passed": bool(margin <= 0), "worst": float(margin),
            })
    status = 0 if all(c["passed"] for c in checks) else 1
    if emit:
        emit_report(rows, manifest, config.format, config.output, {"checks": checks})
    return ValidationOutcome(status, rows, checks)


@dataclass
class ConvergenceOutcome:
    rows: list
    diagnostics: diagnostics.DiagnosticsReport
    estimates: dict  # level (None = limit) -> (u_hat, stderr)
    streams: Optional[list] = None


def run_convergence(config: ExperimentConfig, emit: bool = True) -> ConvergenceOutcome:
    """``u^n`` for every level of the schedule plus the reflected limit, on shared noise."""
    if not config.n_schedule:
        raise ConfigError("field 'n_schedule' must be nonempty for a convergence study", "n_schedule")
    manifest = RunManifest.begin(config)
    inst = config.instance()
    grid = config.grid(inst)
    exact = inst.exact_value()
    levels = list(config.n_schedule) + [None]
    M, seed, W = config.paths, config.seed, config.worker_count
    solver = _instance_config(config, inst)
    estimates, wall, streams = {}, {}, None
    if solver.mode == "linear-mc":
        t0 = time.perf_counter()
        streams = bsde.stream_levels(inst, levels, grid, M, seed, W)
        share = 1e3 * (time.perf_counter() - t0) / len(levels)
        for s in streams:
            estimates[s.level] = s.summary()
            wall[s.level] = share
    else:
        for lvl in levels:
            t0 = time.perf_counter()
            ens = forward.batch_simulate(inst, lvl, grid, M, seed, W)
            sol = bsde.solve_lsmc(inst, ens, solver)
            del ens
            estimates[lvl] = (sol.u_hat, sol.stderr)
            wall[lvl] = 1e3 * (time.perf_counter() - t0)
        streams = bsde.stream_levels(inst, levels, grid, M, seed, W, with_estimates=False)
    diag = diagnostics.coupling_report(streams)
    rows = []
    for lvl in levels:
        label = "limit" if lvl is None else lvl
        sd = 0.0 if lvl is None else diag.sup_coupling_distance[lvl]
        u, se = estimates[lvl]
        rows.extend(_rows_for(inst.name, label, grid.dt, M, u, se, exact, sd, wall[lvl]))
    if emit:
        emit_report(rows, manifest, config.format, config.output, {"diagnostics": diag.to_dict()})
    return ConvergenceOutcome(rows, diag, estimates, streams)


def run_simulate(config: ExperimentConfig, max_paths: int = 100) -> list:
    """Dump the first ``max_paths`` paths of every level as CSV; returns written paths."""
    inst = config.instance()
    grid = config.grid(inst)
    M = min(config.paths, max_paths)
    os.makedirs(config.output, exist_ok=True)
    levels = list(config.n_schedule) + [None]
    out = []
    for ens in forward.batch_simulate_coupled(inst, levels, grid, M, config.seed, config.worker_count):
        tag = "reflected" if ens.level is None else f"n{_fmt(ens.level)}"
        path = os.path.join(config.output, f"paths_{tag}.csv")
        forward.write_path_csv(ens, path)
        out.append(path)
    return out


def run_diagnose(config: ExperimentConfig, sub_paths: int = 10_000, emit: bool = True):
    """Coupling distances on all paths, plus ``cv + mean sup|Y|`` per level on a sub-ensemble."""
    manifest = RunManifest.begin(config)
    inst = config.instance()
    grid = config.grid(inst)
    levels = list(config.n_schedule) + [None]
    W = config.worker_count
    diag = diagnostics.coupling_report(
        bsde.stream_levels(inst, levels, grid, config.paths, config.seed, W, with_estimates=False)
    ) if config.n_schedule else diagnostics.DiagnosticsReport()
    M = min(config.paths, sub_paths)
    solver = _instance_config(config, inst)
    solver = SolverConfig(solver.mode, solver.picard_iterations, solver.ridge_lambda, solver.basis, keep_paths=True)
    criterion, rows = {}, []
    exact = inst.exact_value()
    for lvl in levels:
        t0 = time.perf_counter()
        ens = forward.batch_simulate(inst, lvl, grid, M, config.seed, W)
        sol = bsde.solve(inst, ens, solver)
        Y = sol.Y[..., 0]
        cv = diagnostics.conditional_variation(Y, ens.X, solver.basis, inst.domain)
        criterion["reflected" if lvl is None else str(lvl)] = {"cv": cv, "sup_abs": diagnostics.sup_abs(Y)}
        sd = diag.sup_coupling_distance.get(lvl, 0.0) if lvl is not None else 0.0
        rows.extend(_rows_for(inst.name, "limit" if lvl is None else lvl, grid.dt, M, sol.u_hat, sol.stderr,
                              exact, sd, 1e3 * (time.perf_counter() - t0)))
    body = diag.to_dict()
    body["criterion"] = criterion
    if emit:
        emit_report(rows, manifest, config.format, config.output, {"diagnostics": body})
    return rows, body
