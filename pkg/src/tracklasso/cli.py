"""Command-line front end: simulate, solve, verify, benchmark.

Flags mirror a flat key=value config file; explicit flags win over file
entries, which win over per-scenario defaults.  All commands are
deterministic given config plus seed (timings excepted).  Exit codes:
0 success, 1 verification failure, 2 solver/runtime error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .admm import MadmmOptions, SolveReport
from .batch import LMConfig
from .models import SingularSystemError, TrackingProblem, make_regularizer
from .scenarios import (
    CsvSchema,
    ScenarioParams,
    TrackDataset,
    load_track_csv,
    relative_error,
    scenario_defaults,
    simulate_coordinated_turn,
    simulate_range,
    simulate_wiener,
    solver_settings,
    wiener_velocity_model,
    write_track_csv,
)
from .solve import SOLVERS, solve_problem
from .verify import run_all_checks

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

SCENARIOS = ("wiener", "range", "coordinated_turn")
REG_KINDS = ("l2", "lasso", "iso_tv", "aniso_tv", "fused", "group", "sparse_group")
NONLINEAR_SCENARIOS = ("range", "coordinated_turn")

# model constants for CSV tracks (diffuse prior anchored at the first fix)
CSV_QC = 1.0
CSV_SIGMA = 0.3
CSV_P1_SCALE = 100.0


class UsageError(Exception):
    """Bad flag/config combination; maps to exit code 64."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    """Resolved options for one command invocation."""

    command: str
    scenario: Optional[str] = None
    input: Optional[str] = None
    solver: str = "ks_madmm"
    regularizer: str = "l2"
    groups: Optional[Tuple[Tuple[int, ...], ...]] = None
    mu: float = 1.0
    gamma: float = 1.0
    kmax: int = 50
    imax: int = 10
    lambda0: float = 1e-2
    alpha: float = 10.0
    sparsity: str = "process_noise"
    seed: int = 0
    steps: Optional[int] = None
    dt: Optional[float] = None
    p0: Optional[float] = None
    out: str = "tracklasso_out"
    jobs: int = 1

    def __post_init__(self):
        if self.command in ("simulate", "solve"):
            if self.command == "simulate" and self.scenario is None:
                raise UsageError("simulate needs --scenario")
            if self.command == "simulate" and self.input is not None:
                raise UsageError("simulate takes --scenario, not --input")
            if self.command == "solve" and (self.scenario is None) == (self.input is None):
                raise UsageError("solve needs exactly one of --scenario / --input")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise UsageError(f"unknown scenario {self.scenario!r}")
        if self.solver not in SOLVERS:
            raise UsageError(f"unknown solver {self.solver!r}")
        if self.regularizer not in REG_KINDS:
            raise UsageError(f"unknown regularizer {self.regularizer!r}")
        if self.sparsity not in ("state", "process_noise"):
            raise UsageError(f"unknown sparsity mode {self.sparsity!r}")
        if self.command == "solve" and self.solver == "ks_madmm" \
                and self.scenario in NONLINEAR_SCENARIOS:
            raise UsageError(f"ks_madmm needs an affine model; scenario "
                             f"{self.scenario!r} is nonlinear")
        if self.mu < 0:
            raise UsageError("mu must be nonnegative")
        if self.gamma <= 0:
            raise UsageError("gamma must be positive")
        if self.kmax < 0 or self.imax < 1:
            raise UsageError("kmax must be >= 0 and imax >= 1")
        if self.lambda0 < 0 or self.alpha <= 1:
            raise UsageError("need lambda0 >= 0 and alpha > 1")
        if self.p0 is not None and not 0.0 <= self.p0 <= 1.0:
            raise UsageError("p0 must lie in [0, 1]")
        if self.steps is not None and self.steps < 2:
            raise UsageError("steps must be at least 2")
        if self.dt is not None and self.dt <= 0:
            raise UsageError("dt must be positive")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")


_CASTS = {
    "scenario": str, "input": str, "solver": str, "regularizer": str,
    "groups": str, "mu": float, "gamma": float, "kmax": int, "imax": int,
    "lambda0": float, "alpha": float, "sparsity": str, "seed": int,
    "steps": int, "dt": float, "p0": float, "out": str, "jobs": int,
}


def parse_groups(text: str) -> Tuple[Tuple[int, ...], ...]:
    """Index sets like "2,3" or "0,1;2,3" (semicolon between groups)."""
    try:
        sets = tuple(tuple(int(tok) for tok in part.split(",") if tok.strip() != "")
                     for part in text.split(";") if part.strip() != "")
    except ValueError:
        raise UsageError(f"cannot parse group index sets from {text!r}") from None
    if not sets or any(len(s) == 0 for s in sets):
        raise UsageError(f"cannot parse group index sets from {text!r}")
    return sets


def read_config_file(path: Path) -> Dict[str, str]:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    data: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CASTS:
            raise UsageError(f"{path}:{line_no}: unknown key {key!r}")
        data[key] = value
    return data


def resolve_config(args: argparse.Namespace, command: str) -> RunConfig:
    """Merge flags > config file > scenario defaults > global defaults."""
    file_vals: Dict[str, object] = {}
    if getattr(args, "config", None) is not None:
        for key, raw in read_config_file(args.config).items():
            try:
                file_vals[key] = _CASTS[key](raw)
            except ValueError:
                raise UsageError(f"config key {key}: cannot parse {raw!r}") from None

    merged: Dict[str, object] = {}
    for key in _CASTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in file_vals:
            merged[key] = file_vals[key]

    scenario = merged.get("scenario")
    source = scenario if scenario in SCENARIOS else ("csv" if merged.get("input") else None)
    if source is not None:
        defaults = solver_settings(source)
        for key in ("solver", "regularizer", "mu", "gamma", "kmax", "imax", "sparsity"):
            merged.setdefault(key, defaults[key])
        if merged.get("groups") is None and defaults["groups"] is not None:
            merged["groups"] = ";".join(",".join(str(i) for i in g)
                                        for g in defaults["groups"])

    if isinstance(merged.get("groups"), str):
        merged["groups"] = parse_groups(merged["groups"])
    return RunConfig(command=command, **merged)


def config_lines(cfg: RunConfig) -> str:
    """Flat key=value echo of the resolved config (round-trips as a config file)."""
    lines = []
    for f in fields(cfg):
        if f.name == "command":
            continue
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if f.name == "groups":
            value = ";".join(",".join(str(i) for i in g) for g in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def build_dataset(cfg: RunConfig):
    """Simulate the selected scenario or load the input CSV; returns (data, model)."""
    if cfg.scenario is not None:
        overrides = {}
        if cfg.steps is not None:
            overrides["T"] = cfg.steps
        if cfg.dt is not None:
            overrides["dt"] = cfg.dt
        if cfg.p0 is not None:
            overrides["p_zero"] = cfg.p0
        params = scenario_defaults(cfg.scenario, seed=cfg.seed, **overrides)
        sim = {"wiener": simulate_wiener, "range": simulate_range,
               "coordinated_turn": simulate_coordinated_turn}[cfg.scenario]
        return sim(params)
    data = load_track_csv(cfg.input)
    for note in data.warnings:
        print(f"warning: {note}", file=sys.stderr)
    if data.y.shape[1] != 2:
        raise UsageError("CSV tracks must carry two measurement columns")
    dt = cfg.dt if cfg.dt is not None else float(np.median(np.diff(data.times)))
    m1 = np.array([data.y[0, 0], data.y[0, 1], 0.0, 0.0])
    model = wiener_velocity_model(dt, CSV_QC, CSV_SIGMA, data.T,
                                  m1=m1, P1=CSV_P1_SCALE * np.eye(4))
    return data, model


def build_problem(cfg: RunConfig, data: TrackDataset, model) -> TrackingProblem:
    groups = [list(g) for g in cfg.groups] if cfg.groups is not None else None
    reg = make_regularizer(cfg.regularizer, model.n_x, groups=groups,
                           weights=cfg.mu, target_mode=cfg.sparsity)
    return TrackingProblem(model=model, reg=reg, y=data.y)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return repr(float(value))


def cmd_simulate(cfg: RunConfig) -> int:
    data, model = build_dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n_x = data.truth.shape[1]
    _write_csv(out / "truth.csv", ["t"] + [f"x{i + 1}" for i in range(n_x)],
               ([_fmt(t)] + [_fmt(v) for v in row]
                for t, row in zip(data.times, data.truth)))
    n_y = data.y.shape[1]
    meas_cols = ("x", "y") if n_y == 2 else tuple(f"y{i + 1}" for i in range(n_y))
    write_track_csv(out / "measurements.csv", data,
                    CsvSchema(measurement_columns=meas_cols))
    (out / "config.txt").write_text(config_lines(cfg), encoding="utf-8")
    print(f"wrote {data.T} steps to {out}/truth.csv and {out}/measurements.csv")
    return EXIT_OK


def write_report(out: Path, cfg: RunConfig, problem: TrackingProblem,
                 data: TrackDataset, report: SolveReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "iterations.csv",
               ["k", "objective", "lagrangian", "r_primal", "r_dual", "seconds"],
               ([k + 1, _fmt(o), _fmt(l), _fmt(rp), _fmt(rd), _fmt(s)]
                for k, (o, l, rp, rd, s) in enumerate(
                    zip(report.objective, report.lagrangian, report.r_primal,
                        report.r_dual, report.seconds))))
    n_x = problem.n_x
    _write_csv(out / "trajectory.csv", ["t"] + [f"x{i + 1}" for i in range(n_x)],
               ([_fmt(t)] + [_fmt(v) for v in row]
                for t, row in zip(data.times, report.x)))
    norms = problem.reg.group_norms(report.state.w)
    _write_csv(out / "sparsity.csv", ["t", "group", "norm", "is_zero"],
               ([_fmt(data.times[t]), g, _fmt(norms[t, g]),
                 int(report.zero_groups[t, g])]
                for t in range(problem.T) for g in range(problem.reg.n_groups)))

    lines = [
        f"tracklasso_version: {__version__}",
        f"numpy_version: {np.__version__}",
        f"solver: {cfg.solver}",
        f"seed: {cfg.seed}",
        f"steps: {problem.T}",
        f"state_dim: {problem.n_x}",
        f"iterations: {report.iterations}",
        f"converged: {report.converged}",
        f"seconds_total: {_fmt(float(np.sum(report.seconds)))}",
        f"objective_final: {_fmt(report.objective[-1]) if report.iterations else 'nan'}",
        f"r_primal_final: {_fmt(report.r_primal[-1]) if report.iterations else 'nan'}",
        f"r_dual_final: {_fmt(report.r_dual[-1]) if report.iterations else 'nan'}",
        f"zero_group_steps: {int(np.sum(np.all(report.zero_groups, axis=1)))}",
    ]
    if data.truth is not None:
        lines.append(f"relative_error: {_fmt(relative_error(report.x, data.truth))}")
    lines.append("config:")
    lines.extend("  " + ln for ln in config_lines(cfg).strip().splitlines())
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "config.txt").write_text(config_lines(cfg), encoding="utf-8")


def cmd_solve(cfg: RunConfig) -> int:
    data, model = build_dataset(cfg)
    problem = build_problem(cfg, data, model)
    opts = MadmmOptions(gamma=cfg.gamma, k_max=cfg.kmax)
    lm_cfg = LMConfig(lambda0=cfg.lambda0, alpha=cfg.alpha, i_max=cfg.imax)
    try:
        report = solve_problem(problem, solver=cfg.solver, opts=opts,
                               i_max=cfg.imax, lm_cfg=lm_cfg)
    except (SingularSystemError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(cfg.out)
    write_report(out, cfg, problem, data, report)
    msg = (f"{cfg.solver}: {report.iterations} iterations, "
           f"converged={report.converged}")
    if report.iterations:
        msg += f", objective {report.objective[-1]:.6g}"
    if data.truth is not None:
        msg += f", relative error {relative_error(report.x, data.truth):.4f}"
    print(msg)
    print(f"report written to {out}/report.txt")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    jobs = args.jobs if args.jobs is not None else 1
    out = Path(args.out) if args.out is not None else Path("tracklasso_out")
    results = run_all_checks(seed=seed, jobs=jobs, inject_fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        mark = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {mark}  {r.detail}")
        if not r.passed:
            all_ok = False
            if r.payload:
                out.mkdir(parents=True, exist_ok=True)
                dump = out / f"failed_{r.name}.npz"
                np.savez(dump, **r.payload)
                print(f"  inputs saved to {dump}", file=sys.stderr)
    print("all checks passed" if all_ok else "verification FAILED")
    return EXIT_OK if all_ok else EXIT_VERIFY


def _memory_budget_bytes() -> int:
    try:
        total = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError):
        total = 4 << 30
    return int(total * 0.4)


def _benchmark_problem(T: int, seed: int) -> TrackingProblem:
    params = scenario_defaults("wiener", T=T, seed=seed)
    data, model = simulate_wiener(params)
    reg = make_regularizer("l2", 4, weights=1.0, target_mode="process_noise")
    return TrackingProblem(model=model, reg=reg, y=data.y)


def benchmark_one(solver: str, T: int, repeats: int, kmax: int,
                  seed: int = 0) -> Tuple[Optional[float], str]:
    """Median wall time of a fixed-iteration solve; (None, 'skipped') when the
    dense solver cannot fit in memory."""
    if solver == "batch_madmm":
        need = 6 * (T * 4) ** 2 * 8
        if need > _memory_budget_bytes():
            return None, "skipped"
    problem = _benchmark_problem(T, seed)
    opts = MadmmOptions(gamma=1.0, k_max=kmax, eps_primal=0.0, eps_dual=0.0)

    def once() -> float:
        tic = time.perf_counter()
        solve_problem(problem, solver=solver, opts=opts)
        return time.perf_counter() - tic

    try:
        once()  # warm-up
        times = [once() for _ in range(repeats)]
    except MemoryError:
        return None, "skipped"
    return float(np.median(times)), "ok"


def fit_slopes(rows: List[Tuple[str, int, Optional[float], str]]) -> Dict[str, float]:
    slopes = {}
    for solver in {r[0] for r in rows}:
        pts = [(T, sec) for s, T, sec, status in rows
               if s == solver and status == "ok"]
        if len(pts) >= 2:
            logT = np.log([p[0] for p in pts])
            logt = np.log([p[1] for p in pts])
            slopes[solver] = float(np.polyfit(logT, logt, 1)[0])
    return slopes


def cmd_benchmark(args) -> int:
    sizes = [int(tok) for tok in args.sizes.split(",") if tok.strip()]
    if not sizes or any(T < 10 for T in sizes):
        raise UsageError("benchmark sizes must all be >= 10")
    solvers = [tok.strip() for tok in args.solvers.split(",") if tok.strip()]
    bad = [s for s in solvers if s not in SOLVERS]
    if bad or not solvers:
        raise UsageError(f"unknown benchmark solvers: {bad}")
    repeats = args.repeats if args.repeats is not None else 3
    if repeats < 3:
        raise UsageError("benchmark needs at least 3 repeats (median)")
    kmax = args.kmax if args.kmax is not None else 3
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out is not None else Path("tracklasso_out")
    out.mkdir(parents=True, exist_ok=True)

    rows: List[Tuple[str, int, Optional[float], str]] = []
    for solver in solvers:
        for T in sizes:
            sec, status = benchmark_one(solver, T, repeats, kmax, seed)
            rows.append((solver, T, sec, status))
            shown = f"{sec:.4f}s" if sec is not None else "skipped"
            print(f"{solver:>14}  T={T:<8d}  {shown}")
    _write_csv(out / "benchmark.csv", ["solver", "T", "seconds", "status"],
               ([s, T, "" if sec is None else _fmt(sec), status]
                for s, T, sec, status in rows))
    slopes = fit_slopes(rows)
    _write_csv(out / "slopes.csv", ["solver", "loglog_slope"],
               ([s, _fmt(v)] for s, v in sorted(slopes.items())))
    for solver, slope in sorted(slopes.items()):
        print(f"{solver:>14}  log-log slope {slope:.3f}")
    print(f"benchmark tables written to {out}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--input", help="measurement CSV (t,x,y header)")
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--regularizer", choices=REG_KINDS)
    p.add_argument("--groups", help="index sets, e.g. '2,3' or '0,1;2,3'")
    p.add_argument("--mu", type=float, help="penalty weight")
    p.add_argument("--gamma", type=float, help="ADMM penalty parameter")
    p.add_argument("--kmax", type=int, help="outer ADMM iteration cap")
    p.add_argument("--imax", type=int, help="inner smoother iteration cap")
    p.add_argument("--lambda0", type=float, help="initial LM damping")
    p.add_argument("--alpha", type=float, help="LM damping scale factor")
    p.add_argument("--sparsity", choices=("state", "process_noise"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="trajectory length override")
    p.add_argument("--dt", type=float, help="sampling interval override")
    p.add_argument("--p0", type=float, help="probability of zero process noise")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for seed sweeps")


def build_parser() -> _Parser:
    parser = _Parser(prog="tracklasso",
                     description="Group-sparse trajectory estimation with "
                                 "Kalman-smoother ADMM solvers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_common(p_sim)
    p_solve = sub.add_parser("solve", help="estimate a trajectory")
    _add_common(p_solve)
    p_verify = sub.add_parser("verify", help="run the cross-oracle checks")
    p_verify.add_argument("--seed", type=int)
    p_verify.add_argument("--jobs", type=int)
    p_verify.add_argument("--out", help="directory for failure dumps")
    p_verify.add_argument("--inject-fault", action="store_true",
                          help="negative control: corrupt the x update and "
                               "expect the descent check to fail")
    p_bench = sub.add_parser("benchmark", help="wall-time scaling table")
    p_bench.add_argument("--sizes", default="1000,4000,16000",
                         help="comma-separated trajectory lengths")
    p_bench.add_argument("--solvers", default="ks_madmm,batch_madmm")
    p_bench.add_argument("--repeats", type=int)
    p_bench.add_argument("--kmax", type=int)
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--out")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(resolve_config(args, "simulate"))
        if args.command == "solve":
            return cmd_solve(resolve_config(args, "solve"))
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "benchmark":
            return cmd_benchmark(args)
    except UsageError as exc:
        print(f"tracklasso: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"tracklasso: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"tracklasso: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
