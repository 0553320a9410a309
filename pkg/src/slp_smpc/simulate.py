"""Monte Carlo closed-loop campaigns.

Disturbances for rollout ``r`` come from a Philox stream keyed by
``(seed, r)``, so a rollout's noise never depends on how rollouts are split
across worker processes. Results are reduced in rollout order, which keeps
summaries bitwise identical for any worker count.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .controller import (CASES, ControllerFault, ControllerState, InitialInfeasibleError, controller_step,
                         skeleton, solve_initial, tail_rows_for)
from .linalg import psd_sqrt
from .model import ScenarioConfig, stage_cost_eval
from .slp import evaluate_policy
from .terminal import DesignInfeasibleError, TerminalDesigner, TerminalIngredients, TerminalSet

log = logging.getLogger(__name__)

METHOD_LABELS = {"rc": "RC", "rc-mod": "RC-mod", "policy17": "Policy17"}


def step_generator(seed: int, index: int, k: int) -> np.random.Generator:
    """Counter-based stream for one (seed, rollout, step) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), int(k)])))


def rollout_disturbances(sigma_w, steps: int, seed: int, index: int) -> np.ndarray:
    """``(steps, n)`` Gaussian disturbances for one rollout."""
    sigma_w = np.asarray(sigma_w, dtype=float)
    n = sigma_w.shape[0]
    S = psd_sqrt(sigma_w)
    e = np.array([step_generator(seed, index, k).standard_normal(n) for k in range(steps)]).reshape(steps, n)
    return e @ S.T


def sample_disturbances(seed: int, count: int, steps: int, sigma_w) -> np.ndarray:
    """``(count, steps, n)`` disturbance tensor; rollout ``r`` equals ``rollout_disturbances(.., r)``."""
    sigma_w = np.asarray(sigma_w, dtype=float)
    if count == 0:
        return np.zeros((0, steps, sigma_w.shape[0]))
    return np.stack([rollout_disturbances(sigma_w, steps, seed, r) for r in range(count)])


@dataclass
class RolloutRecord:
    index: int
    method: str
    seed: int
    states: np.ndarray          # (T + 1, n)
    inputs: np.ndarray          # (T, m)
    disturbances: np.ndarray    # (T, n)
    cost: float
    satisfied: np.ndarray       # (T, c) bool, constraint j at step k
    objectives: np.ndarray      # (T,) optimal values J*_k (NaN for the dual-mode policy)
    stage_costs: np.ndarray     # (T,)
    candidate_ok: np.ndarray    # (T,) bool; True at k = 0 by convention
    alphas: list = field(default_factory=list)   # per k >= 1: flat list of finite alphas
    cases: dict = field(default_factory=dict)
    attempts: int = 0
    wall_time: float = 0.0
    solve_times: np.ndarray = None  # (T,) solver seconds per step (zeros for the dual-mode policy)

    def long_rows(self):
        """One dict per step: rollout, k, states, inputs, stage cost."""
        for k in range(self.inputs.shape[0]):
            row = {"method": self.method, "rollout": self.index, "k": k}
            row.update({f"x{i}": float(v) for i, v in enumerate(self.states[k])})
            row.update({f"u{i}": float(v) for i, v in enumerate(self.inputs[k])})
            row["cost"] = float(self.stage_costs[k])
            yield row


@dataclass
class CampaignSummary:
    method: str
    rollouts: int
    steps: int
    cost_mean: float
    cost_std: float
    satisfaction: list          # [k][j] empirical Pr[constraint j holds at step k]
    min_satisfaction: Optional[float]
    candidate_failures: int
    alpha_nonneg_fraction: float
    alpha_count: int
    cost_decrease_mean: list    # per k
    cost_decrease_se: list
    cases: dict
    wall_time: float
    solve_time_mean: float = 0.0
    solve_time_std: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Design:
    """Everything the online controller needs, picklable for worker processes."""

    cfg: ScenarioConfig
    ing: TerminalIngredients
    tset: TerminalSet
    mu_hat: int

    @classmethod
    def for_scenario(cls, cfg: ScenarioConfig, use_cache: bool = True, workers: int = 1, progress=None):
        designer = TerminalDesigner(use_cache=use_cache, workers=workers, progress=progress).fit(cfg)
        tset = designer.terminal_set_
        mu_hat = cfg.terminal.mu_hat if cfg.terminal.mu_hat is not None else tset.mu
        return cls(designer.scenario_, designer.ingredients_, tset, int(mu_hat))


class _Runner:
    """Per-process rollout executor with cached shared pieces."""

    def __init__(self, design: Design, initial):
        self.design = design
        self.initial = initial
        self.sk = skeleton(design.cfg, design.ing)
        self._tail = None

    def tail(self):
        if self._tail is None:
            self._tail = tail_rows_for(self.design.ing, self.design.mu_hat)
        return self._tail

    def run(self, method: str, index: int, steps: int, seed: int) -> RolloutRecord:
        d = self.design
        cfg = d.cfg
        sys_, cons = cfg.system, cfg.constraints
        w = rollout_disturbances(sys_.sigma_w, steps, seed, index)
        n, m = sys_.n, sys_.m
        X = np.zeros((steps + 1, n))
        U = np.zeros((steps, m))
        X[0] = cfg.x0
        sat = np.zeros((steps, cons.c), dtype=bool)
        objs = np.full(steps, math.nan)
        stage = np.zeros(steps)
        cand = np.ones(steps, dtype=bool)
        solve_t = np.zeros(steps)
        alphas, cases, attempts = [], {c: 0 for c in CASES}, 0
        t0 = time.perf_counter()
        pol = self.initial[0]
        state = None
        if method != "policy17":
            state = ControllerState(cfg, d.ing, d.tset, method, d.mu_hat, initial_solution=self.initial,
                                    tail_rows=self.tail() if method == "rc-mod" else None, skeleton=self.sk)
        for k in range(steps):
            x = X[k]
            if method == "policy17":
                u = evaluate_policy(pol, w[:k], k, x)
            else:
                try:
                    u, diag = controller_step(state, x)
                except ControllerFault as exc:
                    exc.rollout = index
                    raise
                objs[k] = diag["objective"]
                solve_t[k] = diag["solve_time"]
                if k > 0:
                    cand[k] = bool(diag.get("candidate_feasible", True))
                    alphas.append([a for row in diag["alpha"] for a in row if a is not None and np.isfinite(a)])
                    for c, cnt in diag["cases"].items():
                        cases[c] += cnt
                    attempts += diag.get("attempts", 1) - 1
            sat[k] = cons.G @ x + cons.H @ u <= cons.b
            U[k] = u
            stage[k] = stage_cost_eval(cfg.cost, x, u)
            X[k + 1] = sys_.A @ x + sys_.B @ u + w[k]
        return RolloutRecord(index, method, seed, X, U, w, float(stage.sum()), sat, objs, stage, cand, alphas,
                             cases, attempts, time.perf_counter() - t0, solve_t)


_WORKER: Optional[_Runner] = None


def _init_worker(design, initial):
    global _WORKER
    _WORKER = _Runner(design, initial)


def _work(args):
    method, indices, steps, seed = args
    return [_WORKER.run(method, i, steps, seed) for i in indices]


def run_rollouts(design: Design, method: str, rollouts: int, steps: int, seed: int, workers: int = 1,
                 initial=None, progress=None) -> list:
    """Rollout records in index order; ``initial`` is the shared k = 0 solution."""
    if method not in METHOD_LABELS:
        raise ValueError(f"unknown method {method!r}")
    if initial is None:
        initial = solve_initial(design.cfg, design.ing, design.tset)
    if workers <= 1 or rollouts < 2:
        runner = _Runner(design, initial)
        out = []
        for i in range(rollouts):
            out.append(runner.run(method, i, steps, seed))
            if progress is not None and (i + 1) % 50 == 0:
                progress(f"{method}: {i + 1}/{rollouts}")
        return out
    chunks = [list(c) for c in np.array_split(np.arange(rollouts), min(rollouts, 4 * workers)) if len(c)]
    out = []
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(design, initial)) as pool:
        for recs in pool.map(_work, [(method, [int(i) for i in c], steps, seed) for c in chunks]):
            out.extend(recs)
            if progress is not None:
                progress(f"{method}: {len(out)}/{rollouts}")
    return out


def summarize(method: str, records: Sequence[RolloutRecord], trace_term: float = 0.0,
              wall_time: float = 0.0) -> CampaignSummary:
    if not records:
        raise ValueError("no rollouts to summarize")
    costs = np.array([r.cost for r in records])
    sat = np.mean([r.satisfied for r in records], axis=0)       # (T, c)
    T = sat.shape[0]
    flat = [a for r in records for per_k in r.alphas for a in per_k]
    nonneg = float(np.mean(np.array(flat) >= 0.0)) if flat else math.nan
    cases = {c: int(sum(r.cases.get(c, 0) for r in records)) for c in CASES}
    dec_mean, dec_se = [], []
    if T and np.isfinite(records[0].objectives).any():
        for k in range(T - 1):
            vals = np.array([r.objectives[k + 1] - r.objectives[k] + r.stage_costs[k] - trace_term
                             for r in records])
            dec_mean.append(float(vals.mean()))
            dec_se.append(float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan)
    st = np.concatenate([r.solve_times for r in records]) if T else np.zeros(0)
    return CampaignSummary(
        method=method, rollouts=len(records), steps=T,
        cost_mean=float(costs.mean()), cost_std=float(costs.std(ddof=1)) if len(costs) > 1 else 0.0,
        satisfaction=sat.tolist(), min_satisfaction=float(sat.min()) if sat.size else None,
        candidate_failures=int(sum(int((~r.candidate_ok).sum()) for r in records)),
        alpha_nonneg_fraction=nonneg, alpha_count=len(flat),
        cost_decrease_mean=dec_mean, cost_decrease_se=dec_se, cases=cases, wall_time=wall_time,
        solve_time_mean=float(st.mean()) if st.size else 0.0, solve_time_std=float(st.std()) if st.size else 0.0)


@dataclass
class CampaignResult:
    design: Design
    records: dict            # method -> list of RolloutRecord
    summaries: dict          # method -> CampaignSummary
    seed: int
    meta: dict = field(default_factory=dict)

    def envelope(self, method: str, state: int = 0):
        return trajectory_envelope(self.records[method], state)


def run_campaign(cfg: ScenarioConfig, methods=("rc", "rc-mod", "policy17"), rollouts: Optional[int] = None,
                 steps: Optional[int] = None, seed: Optional[int] = None, workers: int = 1,
                 design: Optional[Design] = None, use_cache: bool = True, progress=None) -> CampaignResult:
    """Run every method against the same disturbance realizations."""
    sim = cfg.simulation
    rollouts = sim.rollouts if rollouts is None else int(rollouts)
    steps = sim.steps if steps is None else int(steps)
    seed = sim.seed if seed is None else int(seed)
    if rollouts < 1 or steps < 0:
        raise ValueError("need at least one rollout and a non-negative step count")
    design = Design.for_scenario(cfg, use_cache, workers) if design is None else design
    # the k = 0 program is identical for every rollout: solve it once
    initial = solve_initial(cfg, design.ing, design.tset)
    trace_term = float(np.trace(design.ing.P @ cfg.system.sigma_w))
    records, summaries = {}, {}
    for method in methods:
        t0 = time.perf_counter()
        recs = run_rollouts(design, method, rollouts, steps, seed, workers, initial, progress)
        records[method] = recs
        summaries[method] = summarize(method, recs, trace_term, time.perf_counter() - t0)
    meta = {"scenario": cfg.name, "rollouts": rollouts, "steps": steps, "seed": seed,
            "mu": design.tset.mu, "nu": design.tset.nu, "mu_hat": design.mu_hat,
            "initial_objective": initial[1]}
    return CampaignResult(design, records, summaries, seed, meta)


def trajectory_envelope(records: Sequence[RolloutRecord], state: int = 0):
    """Per-step mean and standard deviation of one state coordinate, ``(mean, std)`` of length ``T + 1``."""
    if not records:
        raise ValueError("no rollouts")
    X = np.stack([r.states[:, state] for r in records])
    return X.mean(axis=0), X.std(axis=0)


@dataclass
class SweepCell:
    p: float
    status: str                  # ok | infeasible
    summary: Optional[CampaignSummary] = None
    mu: Optional[int] = None
    message: str = ""
    method: str = "rc-mod"


def sweep_probability(cfg: ScenarioConfig, probabilities=None, method: str = "rc-mod",
                      rollouts: Optional[int] = None, steps: Optional[int] = None, seed: Optional[int] = None,
                      workers: int = 1, use_cache: bool = True, progress=None) -> list:
    """Redesign and simulate for each probability level; infeasible designs are marked, not fatal."""
    probabilities = cfg.simulation.sweep_p if probabilities is None else probabilities
    cells = []
    for p in probabilities:
        cp = cfg.with_probability(p)
        try:
            res = run_campaign(cp, (method,), rollouts, steps, seed, workers, use_cache=use_cache,
                               progress=progress)
        except (DesignInfeasibleError, InitialInfeasibleError) as exc:
            cells.append(SweepCell(float(p), "infeasible", message=str(exc), method=method))
            continue
        cells.append(SweepCell(float(p), "ok", res.summaries[method], res.design.tset.mu, method=method))
    return cells


# ---------------------------------------------------------------------------
# output files


def write_outputs(result: CampaignResult, out_dir) -> dict:
    """Write summary.json, rollouts.csv, envelope.csv and satisfaction.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.{ext}" for k, ext in
             (("summary", "json"), ("rollouts", "csv"), ("envelope", "csv"), ("satisfaction", "csv"))}
    payload = {"meta": result.meta, "methods": {m: s.to_dict() for m, s in result.summaries.items()}}
    paths["summary"].write_text(json.dumps(payload, indent=2))
    with open(paths["rollouts"], "w", newline="") as fh:
        cfg = result.design.cfg
        fields = ["method", "rollout", "k"] + [f"x{i}" for i in range(cfg.n)] + [f"u{i}" for i in range(cfg.m)]
        writer = csv.DictWriter(fh, fieldnames=fields + ["cost"])
        writer.writeheader()
        for recs in result.records.values():
            for r in recs:
                writer.writerows(r.long_rows())
    with open(paths["envelope"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "state", "step", "mean", "std"])
        for m, recs in result.records.items():
            for i in range(result.design.cfg.n):
                mean, std = trajectory_envelope(recs, i)
                for k in range(mean.shape[0]):
                    writer.writerow([m, i, k, float(mean[k]), float(std[k])])
    with open(paths["satisfaction"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "step", "constraint", "probability", "required"])
        req = result.design.cfg.constraints.p
        for m, s in result.summaries.items():
            for k, row in enumerate(s.satisfaction):
                for j, val in enumerate(row):
                    writer.writerow([m, k, j, val, float(req[j])])
    return paths


def write_sweep(cells: Sequence[SweepCell], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.json"
    data = [{"p": c.p, "method": c.method, "status": c.status, "mu": c.mu, "message": c.message,
             "summary": c.summary.to_dict() if c.summary else None} for c in cells]
    path.write_text(json.dumps(data, indent=2))
    return path
