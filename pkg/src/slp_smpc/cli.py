"""Command-line entry point: ``slp-smpc <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 design
infeasibility, 3 terminal-set search did not terminate, 4 solver fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .controller import ControllerFault, InitialInfeasibleError
from .model import ScenarioParseError, ValidationError, bundled_scenario_path, load_scenario
from .linalg import InstabilityError
from .terminal import (DesignInfeasibleError, LmiSolverError, NonTerminationError, TerminalDesigner,
                       design_ingredients, synthesize_terminal_gain)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONTERMINATION, EXIT_SOLVER = 0, 1, 2, 3, 4

def _scenario(args):
    path = args.scenario or bundled_scenario_path("hvac")
    return load_scenario(path)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_jsonable))
    print(f"wrote {path}")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def cmd_design_k(args) -> int:
    cfg = _scenario(args)
    eps = np.full(cfg.c, args.eps) if args.eps is not None else cfg.eps()
    if args.use_k is not None:
        K = np.full((cfg.m, cfg.n), float(args.use_k))
        ing = design_ingredients(cfg.system, cfg.constraints, cfg.cost, K, cfg.horizon, require_margin=False)
        ok = bool(np.all(ing.margins >= eps))
        payload = {"K": K, "mode": "verify", "margins": ing.margins, "eps": eps,
                   "sigma_x_inf": ing.cov.sigma_x_inf, "margin_condition_holds": ok}
        _dump(_out(args) / "gain.json", payload)
        if not ok:
            print("the stationary margin condition b_j - sqrt(pt_j)||Sx_inf^(1/2) C_K' L_j'|| >= eps_j fails "
                  f"for K = {args.use_k}", file=sys.stderr)
            return EXIT_INFEASIBLE
        return EXIT_OK
    K, report = synthesize_terminal_gain(cfg.system, cfg.constraints, eps)
    payload = {"K": K, "mode": "synthesize", **report}
    _dump(_out(args) / "gain.json", payload)
    return EXIT_OK


def cmd_terminal_set(args) -> int:
    cfg = _scenario(args)
    t0 = time.perf_counter()
    progress = (lambda msg: print(msg, flush=True)) if args.verbose else None
    designer = TerminalDesigner(use_cache=not args.no_cache, workers=args.workers, progress=progress).fit(cfg)
    tset = designer.terminal_set_
    if tset.meta.get("cache") == "hit":
        print(f"cache hit ({tset.meta.get('cache_key')}); nothing recomputed")
    path = _out(args) / "terminal_set.json"
    path.write_text(tset.to_json())
    print(f"wrote {path}: nu={tset.nu} mu={tset.mu} rows={len(tset.rows)} "
          f"({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulate import run_campaign, write_outputs
    cfg = _scenario(args)
    methods = args.method or ["rc"]
    progress = (lambda msg: print(msg, flush=True)) if args.verbose else None
    res = run_campaign(cfg, methods, args.rollouts, args.steps, args.seed, args.workers,
                       use_cache=not args.no_cache, progress=progress)
    paths = write_outputs(res, _out(args))
    for m, s in res.summaries.items():
        sat = "n/a" if s.min_satisfaction is None else f"{100 * s.min_satisfaction:.1f}%"
        print(f"{m}: cost {s.cost_mean:.3f} +- {s.cost_std:.3f}, min satisfaction {sat}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_sweep_p(args) -> int:
    from .simulate import sweep_probability, write_sweep
    cfg = _scenario(args)
    probs = args.p or list(cfg.simulation.sweep_p)
    methods = args.method or ["rc-mod"]
    cells = []
    for method in methods:
        for cell in sweep_probability(cfg, probs, method, args.rollouts, args.steps, args.seed, args.workers,
                                      use_cache=not args.no_cache):
            cells.append(cell)
            msg = cell.message if cell.status != "ok" else f"cost {cell.summary.cost_mean:.3f}"
            print(f"{method} p={cell.p}: {cell.status} {msg}")
    write_sweep(cells, _out(args))
    return EXIT_OK


def _fmt(v, digits=3):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def build_report(directory: Path) -> str:
    """Markdown comparison tables from every summary/sweep file under ``directory``."""
    summaries = sorted(directory.rglob("summary.json"))
    sweeps = sorted(directory.rglob("sweep.json"))
    if not summaries and not sweeps:
        raise FileNotFoundError(f"no summary.json or sweep.json under {directory}")
    lines = []
    if summaries:
        lines += ["| method | cost (mean +- std) | min satisfaction [%] | solve time [ms] | rollouts |",
                  "|---|---|---|---|---|"]
        for path in summaries:
            data = json.loads(path.read_text())
            for m, s in data["methods"].items():
                sat = None if s["min_satisfaction"] is None else 100 * s["min_satisfaction"]
                st = 1000 * s["solve_time_mean"] if s["solve_time_mean"] else None
                lines.append(f"| {m} | {_fmt(s['cost_mean'], 2)} +- {_fmt(s['cost_std'], 2)} | {_fmt(sat, 1)} | "
                             f"{_fmt(st, 2)} | {s['rollouts']} |")
    for path in sweeps:
        cells = json.loads(path.read_text())
        methods = sorted({c.get("method", "rc-mod") for c in cells})
        ps = sorted({c["p"] for c in cells})
        if lines:
            lines.append("")
        lines += ["| p | " + " | ".join(methods) + " |", "|---|" + "---|" * len(methods)]
        for p in ps:
            row = []
            for m in methods:
                cell = next((c for c in cells if c["p"] == p and c.get("method", "rc-mod") == m), None)
                if cell is None or cell["status"] != "ok":
                    row.append("infeasible" if cell else "")
                else:
                    s = cell["summary"]
                    row.append(f"{_fmt(s['cost_mean'])} +- {_fmt(s['cost_std'])}")
            lines.append(f"| {p} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    directory = Path(args.out)
    if not directory.is_dir():
        print(f"no such directory: {directory}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        text = build_report(directory)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    (directory / "report.md").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slp-smpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=False):
        p.add_argument("scenario", nargs="?", help="scenario TOML (default: bundled HVAC example)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-cache", action="store_true", help="ignore and do not write the terminal-set cache")
        if sim:
            p.add_argument("--method", action="append", choices=("rc", "rc-mod", "policy17"))
            p.add_argument("--rollouts", type=int)
            p.add_argument("--steps", type=int)
            p.add_argument("--seed", type=int)

    p = sub.add_parser("design-k", help="synthesize or verify the terminal gain")
    common(p)
    p.add_argument("--use-k", type=float, help="verify the constant gain K = value instead of synthesizing")
    p.add_argument("--eps", type=float, help="margin eps_j (default 1e-6 * b_j)")
    p.set_defaults(func=cmd_design_k)

    p = sub.add_parser("terminal-set", help="run the terminal-set search (cached)")
    common(p)
    p.set_defaults(func=cmd_terminal_set)

    p = sub.add_parser("simulate", help="Monte Carlo closed-loop campaign")
    common(p, sim=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-p", help="probability-level sweep")
    common(p, sim=True)
    p.add_argument("--p", type=float, action="append", help="probability level (repeatable)")
    p.set_defaults(func=cmd_sweep_p)

    p = sub.add_parser("report", help="merge summaries under --out into markdown tables")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.formatwarning = lambda msg, cat, *rest, **kw: f"warning: {msg}\n"
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("--workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ValidationError, ScenarioParseError, FileNotFoundError, ValueError) as exc:
        if isinstance(exc, (DesignInfeasibleError, InstabilityError)):
            print(f"design infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InitialInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonTerminationError as exc:
        print(f"terminal-set search did not terminate: {exc}", file=sys.stderr)
        return EXIT_NONTERMINATION
    except (ControllerFault, LmiSolverError) as exc:
        print(f"solver fault: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
