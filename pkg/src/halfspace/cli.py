"""Command-line front end.

Every subcommand reads one JSON config (``--config``) and writes its
artifacts into ``--out``.  Exit codes: 0 success, 1 a residual or tolerance
check failed, 2 the config is invalid.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datum import DatumError, make_datum, parse_datum_spec
from .distinguished import is_distinguished
from .kernels import BranchCutError, export_kernel_csv
from .maximal import ConeSpec, ntmax_grid, pointwise_bound_ratio, wellposedness_report
from .optensor import DEFAULT_SEED, TensorError, lh_margin, tensor_from_literal
from .solver import BoundaryData, DataError, GridSpec, MarginError, resolve_system, solve_dirichlet
from .verify import IDENTITIES, THRESHOLDS, _report, run_all

TASKS = ("check-tensor", "verify", "solve", "maximal-report", "export-kernel")
CONFIG_KEYS = {
    "operator", "task", "grid", "datum", "ell", "p", "kappa", "eval_points", "points", "t",
    "tolerances", "seed", "output_path",
}
GRID_KEYS = {"n", "half_width", "points_per_axis"}
ARTIFACTS = {
    "check-tensor": "check_tensor.json",
    "verify": "verify.json",
    "solve": "solve.csv",
    "maximal-report": "maximal_report.json",
    "export-kernel": "kernel.csv",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str
    operator: dict
    grid: Optional[dict] = None
    datum: object = None
    ell: int = 0
    p: float = 2.0
    kappa: float = 1.0
    eval_points: Optional[list] = None
    points: Optional[list] = None
    t: float = 0.5
    tolerances: dict = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    output_path: Optional[str] = None

    @classmethod
    def from_json(cls, obj, task: Optional[str] = None) -> RunConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config: top level must be an object")
        extra = set(obj) - CONFIG_KEYS
        if extra:
            raise ConfigError(f"config: unknown field(s) {sorted(extra)}")
        cfg_task = obj.get("task")
        if task and cfg_task and cfg_task != task:
            raise ConfigError(f"config: task '{cfg_task}' does not match subcommand '{task}'")
        task = task or cfg_task
        if task not in TASKS:
            raise ConfigError(f"config: unknown task {task!r} (expected one of {list(TASKS)})")
        if "operator" not in obj:
            raise ConfigError("config: missing field 'operator'")
        grid = obj.get("grid")
        if grid is not None:
            if not isinstance(grid, dict):
                raise ConfigError("config.grid: expected an object")
            bad = set(grid) - GRID_KEYS
            if bad:
                raise ConfigError(f"config.grid: unknown field(s) {sorted(bad)}")
        tol = obj.get("tolerances", {})
        if not isinstance(tol, dict) or set(tol) - set(IDENTITIES):
            raise ConfigError(f"config.tolerances: keys must be identity ids, got {sorted(tol) if isinstance(tol, dict) else tol}")
        try:
            cfg = cls(
                task=task,
                operator=obj["operator"],
                grid=grid,
                datum=obj.get("datum"),
                ell=int(obj.get("ell", 0)),
                p=float(obj.get("p", 2.0)),
                kappa=float(obj.get("kappa", 1.0)),
                eval_points=obj.get("eval_points"),
                points=obj.get("points"),
                t=float(obj.get("t", 0.5)),
                tolerances={k: float(v) for k, v in tol.items()},
                seed=int(obj.get("seed", DEFAULT_SEED)),
                output_path=obj.get("output_path"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: bad value ({exc})") from None
        if cfg.ell < 0 or cfg.ell > 4:
            raise ConfigError("config.ell: must be in 0..4")
        if cfg.seed < 0 or cfg.seed >= 2**64:
            raise ConfigError("config.seed: must be an unsigned 64-bit integer")
        return cfg


# -- data ingestion -------------------------------------------------------------------


def _grid(cfg: RunConfig, n: int, default_points: int) -> GridSpec:
    g = dict(cfg.grid or {})
    if "n" in g and int(g["n"]) != n:
        raise ConfigError(f"config.grid.n = {g['n']} does not match the operator dimension {n}")
    try:
        return GridSpec(n, float(g.get("half_width", 8.0)), int(g.get("points_per_axis", default_points)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.grid: {exc}") from None


def read_csv_datum(path: str, n: int, M: int, ell: int = 0, p: float = 2.0) -> BoundaryData:
    """CSV with columns ``x1..x{n-1},component,value`` and optionally ``im``.

    Nodes must form a uniform grid symmetric about the origin.  Derivatives
    are second-order finite differences, so ``ell <= 2``.
    """
    if ell > 2:
        raise DataError("CSV data support ell <= 2 only")
    dim = n - 1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    want = [f"x{i + 1}" for i in range(dim)] + ["component", "value"]
    if header[: dim + 2] != want or header[dim + 2 :] not in ([], ["im"]):
        raise DataError(f"CSV header must be {','.join(want)}[,im], got {','.join(header)}")
    try:
        X = np.array([[float(v) for v in r[:dim]] for r in rows])
        comp = np.array([int(r[dim]) for r in rows])
        re = np.array([float(r[dim + 1]) for r in rows])
        im = np.array([float(r[dim + 2]) for r in rows]) if len(header) == dim + 3 else np.zeros(len(rows))
    except (ValueError, IndexError) as exc:
        raise DataError(f"CSV: malformed row ({exc})") from None
    if comp.min() < 1 or comp.max() > M:
        raise DataError(f"CSV: component must be in 1..{M}")
    axes = [np.unique(X[:, i]) for i in range(dim)]
    N = len(axes[0])
    for ax in axes:
        if len(ax) != N:
            raise DataError("CSV: grid must have the same number of nodes on every axis")
        steps = np.diff(ax)
        if len(steps) == 0 or np.max(np.abs(steps - steps[0])) > 1e-9 * abs(steps[0]):
            raise DataError("CSV: grid is not uniform")
        if abs(ax[0] + ax[-1]) > 1e-9 * abs(ax[-1]):
            raise DataError("CSV: grid must be symmetric about the origin")
    grid = GridSpec(n, float(axes[0][-1]), N)
    idx = np.stack([np.rint((X[:, i] - axes[i][0]) / grid.spacing).astype(int) for i in range(dim)], axis=1)
    values = np.full(grid.shape + (M,), np.nan, dtype=complex)
    values[tuple(idx.T) + (comp - 1,)] = re + 1j * im
    if np.any(np.isnan(values.real)):
        raise DataError("CSV: grid is incomplete")
    return BoundaryData.from_values(grid, values, ell, p)


def write_csv_datum(f: BoundaryData) -> str:
    dim = f.grid.dim
    buf = io.StringIO()
    buf.write(",".join([f"x{i + 1}" for i in range(dim)] + ["component", "value", "im"]) + "\n")
    pts = f.grid.points.reshape(-1, dim)
    vals = f.values.reshape(-1, f.M)
    for x, v in zip(pts, vals):
        xs = ",".join(f"{c:.17g}" for c in x)
        for a, z in enumerate(v):
            buf.write(f"{xs},{a + 1},{z.real:.17g},{z.imag:.17g}\n")
    return buf.getvalue()


def ingest_datum(spec, n: int, M: int, grid: Optional[GridSpec] = None, ell: int = 0, p: float = 2.0) -> BoundaryData:
    """Boundary data from a catalog spec (string or object) or a CSV path."""
    if isinstance(spec, str) and spec.lower().endswith(".csv"):
        return read_csv_datum(spec, n, M, ell, p)
    if isinstance(spec, dict) and "csv" in spec:
        if set(spec) != {"csv"}:
            raise ConfigError("config.datum: a CSV datum takes only the 'csv' field")
        return read_csv_datum(spec["csv"], n, M, ell, p)
    if isinstance(spec, str):
        name, params = parse_datum_spec(spec)
        amplitude = params.pop("amplitude", None)
    elif isinstance(spec, dict):
        bad = set(spec) - {"name", "params", "amplitude"}
        if bad or "name" not in spec:
            raise ConfigError("config.datum: expected fields name, params, amplitude")
        name, params, amplitude = spec["name"], dict(spec.get("params", {})), spec.get("amplitude")
    else:
        raise ConfigError("config.datum: expected a catalog spec, an object or a CSV path")
    if amplitude is not None:
        amplitude = [complex(*a) if isinstance(a, (list, tuple)) else complex(a) for a in amplitude]
    datum = make_datum(name, n - 1, M, amplitude, **params)
    return BoundaryData.from_datum(datum, grid, ell, p)


# -- output ------------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2) + "\n"


# -- tasks ---------------------------------------------------------------------------------


def _check_tensor(cfg: RunConfig, A) -> tuple[int, dict]:
    ell = lh_margin(A, seed=cfg.seed)
    out = {"n": A.n, "M": A.M, "lh_margin": ell.lh_margin, "elliptic": ell.elliptic}
    if not ell.elliptic:
        return 1, out
    rep = is_distinguished(A, seed=cfg.seed)
    out["distinguished"] = rep.to_json()
    return (0 if rep.verdict else 1), out


def _verify(cfg: RunConfig, A, threads: int) -> tuple[int, list]:
    system = resolve_system(A)
    n = system.n
    grid = _grid(cfg, n, {2: 257, 3: 97}.get(n, 33))
    f = ingest_datum(cfg.datum or "gaussian(sigma=1)", n, system.M, grid, max(cfg.ell, 1))
    reports = run_all(system, f, cfg.t, seed=cfg.seed)
    reports = [
        _report(r.identity_id, r.max_residual, r.points_tested, r.fd_step, cfg.tolerances[r.identity_id], r.halving_ratio)
        if r.identity_id in cfg.tolerances
        else r
        for r in reports
    ]
    code = 0 if all(r.passed for r in reports) else 1
    return code, [r.to_json() for r in reports]


def _solve(cfg: RunConfig, A, threads: int) -> str:
    system = resolve_system(A)
    if cfg.eval_points is None:
        raise ConfigError("config: task 'solve' needs 'eval_points'")
    if cfg.datum is None:
        raise ConfigError("config: task 'solve' needs 'datum'")
    grid = _grid(cfg, system.n, 257)
    f = ingest_datum(cfg.datum, system.n, system.M, grid, cfg.ell, cfg.p)
    pts = np.asarray(cfg.eval_points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != system.n:
        raise ConfigError(f"config.eval_points: expected rows of {system.n} numbers")
    return solve_dirichlet(system, f, pts, threads=threads).to_csv()


def _maximal(cfg: RunConfig, A) -> tuple[dict, str, float]:
    system = resolve_system(A)
    if cfg.datum is None:
        raise ConfigError("config: task 'maximal-report' needs 'datum'")
    grid = _grid(cfg, system.n, 257 if system.n == 2 else 65)
    f = ingest_datum(cfg.datum, system.n, system.M, grid, cfg.ell, cfg.p)
    cone = ConeSpec.for_grid(grid, cfg.kappa)
    nt = ntmax_grid(system, f, cone, cfg.ell)
    rep = wellposedness_report(system, f, cfg.p, cfg.ell, cone, nt)
    ratio = pointwise_bound_ratio(system, f, cone)
    out = rep.to_json()
    out["pointwise_bound_ratio"] = ratio
    return out, rep.to_csv(), ratio


def _export_kernel(cfg: RunConfig, A) -> str:
    system = resolve_system(A)
    if cfg.points is not None:
        pts = np.asarray(cfg.points, dtype=float).reshape(-1, system.n - 1)
    else:
        pts = _grid(cfg, system.n, 17).points.reshape(-1, system.n - 1)
    return export_kernel_csv(system.P, pts)


def run(cfg: RunConfig, out_dir: str = ".", threads: int = 1) -> int:
    try:
        A = tensor_from_literal(cfg.operator)
    except TensorError as exc:
        raise ConfigError(f"config.operator: {exc}") from None
    target = cfg.output_path or os.path.join(out_dir, ARTIFACTS[cfg.task])
    if cfg.output_path and not os.path.isabs(target):
        target = os.path.join(out_dir, target)
    code = 0
    if cfg.task == "check-tensor":
        code, obj = _check_tensor(cfg, A)
        atomic_write(target, _dump(obj))
    elif cfg.task == "verify":
        code, obj = _verify(cfg, A, threads)
        atomic_write(target, _dump(obj))
    elif cfg.task == "solve":
        atomic_write(target, _solve(cfg, A, threads))
    elif cfg.task == "maximal-report":
        obj, text, ratio = _maximal(cfg, A)
        atomic_write(target, _dump(obj))
        atomic_write(os.path.splitext(target)[0] + ".csv", text)
        code = 0 if math.isfinite(ratio) else 1
    elif cfg.task == "export-kernel":
        atomic_write(target, _export_kernel(cfg, A))
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halfspace", description="Poisson kernels and half-space Dirichlet solver")
    sub = ap.add_subparsers(dest="task", required=True)
    for name in TASKS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for quadrature")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            obj = json.load(fh)
        if args.seed is not None:
            obj = dict(obj, seed=args.seed)
        cfg = RunConfig.from_json(obj, args.task)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return run(cfg, args.out, args.threads)
    except json.JSONDecodeError as exc:
        print(f"config error: {args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (ConfigError, TensorError, DatumError, DataError, MarginError, BranchCutError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
