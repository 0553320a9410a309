"""Problem definition: system, chance constraints, cost, and scenario files.

Scenario files are TOML (or JSON with the same layout)::

    name = "hvac"
    horizon = 6                 # prediction horizon N
    x0 = [0.5, 0.0, 0.0]

    [system]
    A = [[...], ...]            # n x n
    B = [[...], ...]            # n x m
    sigma_w = [[...], ...]      # disturbance covariance, or give E with sigma_w = E^T E

    [constraints]               # Pr[G_j x + H_j u <= b_j] >= p_j
    G = [[...]]                 # c x n
    H = [[...]]                 # c x m
    b = [...]                   # c, strictly positive
    p = [...]                   # c, each in (0.5, 1)
    L = [[...]]                 # optional decomposition G = L C, H = L D
    C = [[...]]                 # (defaults: L = I, C = G, D = H)
    D = [[...]]

    [cost]                      # |x|_Q^2 + q'x + |u|_R^2 + r'u
    Q = [[...]]
    R = [[...]]
    q = [...]                   # optional, default 0
    r = [...]                   # optional, default 0

    [simulation]                # all optional
    rollouts = 5000
    steps = 10
    seed = 1
    sweep_p = [0.6, 0.7, 0.8]   # probability overrides used by sweep-p

    [solver]                    # all optional
    tol = 1e-8
    max_iter = 200

    [terminal]                  # all optional
    K = [[...]]                 # skip the gain synthesis and use this K
    eps = [...]                 # margins for the gain synthesis, default 1e-6 * b
    mu_hat = 59                 # tail rows kept by RC-mod, default: mu
    nu_max = 200
    mu_max = 200
    lmi_tol = 1e-8
    lmi_form = "lifted"         # or "reduced"
"""
from __future__ import annotations

import dataclasses
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import scipy.optimize

from .linalg import chi_squared_quantile

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STABILIZABILITY_TOL = 1e-9
SYMMETRY_TOL = 1e-10
DECOMPOSITION_TOL = 1e-9


class ValidationError(ValueError):
    """A scenario or problem object violates one of its invariants."""


class ScenarioParseError(ValueError):
    """A scenario file could not be parsed."""


def _matrix(value, name: str, shape: Optional[tuple] = None) -> np.ndarray:
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} is not a numeric matrix") from exc
    if M.ndim == 1 and shape is not None and len(shape) == 2:
        M = M.reshape(shape) if M.size == shape[0] * shape[1] else M
    if M.ndim != 2:
        raise ValidationError(f"{name} must be two-dimensional, got shape {M.shape}")
    if shape is not None and M.shape != tuple(shape):
        raise ValidationError(f"{name} must have shape {tuple(shape)}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError(f"{name} contains non-finite entries")
    M.setflags(write=False)
    return M


def _vector(value, name: str, size: Optional[int] = None) -> np.ndarray:
    try:
        v = np.array(value, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} is not a numeric vector") from exc
    if size is not None and v.size != size:
        raise ValidationError(f"{name} must have length {size}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite entries")
    v.setflags(write=False)
    return v


def _check_symmetric_psd(M: np.ndarray, name: str, tol: float = SYMMETRY_TOL) -> None:
    scale = 1.0 + np.abs(M).max(initial=0.0)
    if np.abs(M - M.T).max(initial=0.0) > tol * scale:
        raise ValidationError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(0.5 * (M + M.T))[0] < -tol * scale:
        raise ValidationError(f"{name} must be positive semidefinite")


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = STABILIZABILITY_TOL) -> bool:
    """PBH test over the eigenvalues of A on or outside the unit circle."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M) < n:
                return False
    return True


@dataclass(frozen=True)
class LinearGaussianSystem:
    """``x+ = A x + B u + w`` with ``w ~ N(0, sigma_w)`` i.i.d."""

    A: np.ndarray
    B: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        A = _matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValidationError(f"A must be square, got {A.shape}")
        B = _matrix(self.B, "B")
        if B.shape[0] != n:
            raise ValidationError(f"B must have {n} rows, got {B.shape}")
        S = _matrix(self.sigma_w, "sigma_w", (n, n))
        _check_symmetric_psd(S, "sigma_w")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma_w", S)
        if np.linalg.eigvalsh(S)[0] <= SYMMETRY_TOL * (1.0 + np.abs(S).max()):
            warnings.warn("sigma_w is singular; results assuming a positive definite "
                          "disturbance covariance hold only approximately", stacklevel=3)
        if not is_stabilizable(A, B):
            raise ValidationError("(A, B) must be stabilizable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def scaled(self, factor: float) -> "LinearGaussianSystem":
        """Same dynamics with the disturbance covariance multiplied by ``factor``."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return LinearGaussianSystem(self.A, self.B, factor * self.sigma_w)


@dataclass(frozen=True)
class ConstraintSpec:
    """Half-space chance constraints ``Pr[G_j x + H_j u <= b_j] >= p_j``.

    ``L``, ``C`` and ``D`` default to ``I``, ``G`` and ``H``. ``p_tilde`` is
    derived from ``p`` and cannot be passed in.
    """

    G: np.ndarray
    H: np.ndarray
    b: np.ndarray
    p: np.ndarray
    L: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    p_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        G = _matrix(self.G, "G")
        c, n = G.shape
        H = _matrix(self.H, "H")
        if H.shape[0] != c:
            raise ValidationError(f"H must have {c} rows, got {H.shape}")
        m = H.shape[1]
        b = _vector(self.b, "b", c)
        if np.any(b <= 0.0):
            raise ValidationError("b must be strictly positive")
        p = _vector(self.p, "p", c)
        if np.any(p <= 0.5) or np.any(p >= 1.0):
            raise ValidationError("p must lie in the open interval (0.5, 1)")
        if self.L is None and self.C is None and self.D is None:
            L, C, D = np.eye(c), G.copy(), H.copy()
        elif self.L is None or self.C is None or self.D is None:
            raise ValidationError("L, C and D must be given together")
        else:
            L = _matrix(self.L, "L")
            if L.shape[0] != c:
                raise ValidationError(f"L must have {c} rows, got {L.shape}")
            d = L.shape[1]
            C = _matrix(self.C, "C", (d, n))
            D = _matrix(self.D, "D", (d, m))
        for M in (L, C, D):
            M.setflags(write=False)
        if (np.abs(L @ C - G).max(initial=0.0) > DECOMPOSITION_TOL
                or np.abs(L @ D - H).max(initial=0.0) > DECOMPOSITION_TOL):
            raise ValidationError("decomposition G = L C, H = L D does not hold")
        p_tilde = np.array([chi_squared_quantile(2.0 * pj - 1.0) for pj in p])
        p_tilde.setflags(write=False)
        for name, val in (("G", G), ("H", H), ("b", b), ("p", p), ("L", L), ("C", C), ("D", D),
                          ("p_tilde", p_tilde)):
            object.__setattr__(self, name, val)
        if not constraint_output_set_bounded(L, b):
            warnings.warn("the constraint output set {y : L y <= b} is unbounded; the terminal "
                          "set search may fail to terminate", stacklevel=3)

    @property
    def c(self) -> int:
        return self.G.shape[0]

    @property
    def d(self) -> int:
        return self.L.shape[1]

    def with_probability(self, p) -> "ConstraintSpec":
        p = np.broadcast_to(np.asarray(p, dtype=float), (self.c,))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ConstraintSpec(self.G, self.H, self.b, p, self.L, self.C, self.D)

    def with_bound(self, b) -> "ConstraintSpec":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ConstraintSpec(self.G, self.H, b, self.p, self.L, self.C, self.D)


def constraint_output_set_bounded(L: np.ndarray, b: np.ndarray) -> bool:
    """Whether ``{y : L y <= b}`` is bounded (it is nonempty since ``b > 0``)."""
    d = L.shape[1]
    # bounded iff the recession cone {dir : L dir <= 0} is {0}
    for k in range(d):
        for sign in (1.0, -1.0):
            cost = np.zeros(d)
            cost[k] = -sign
            res = scipy.optimize.linprog(cost, A_ub=L, b_ub=np.zeros(L.shape[0]),
                                         bounds=[(-1.0, 1.0)] * d, method="highs")
            if res.status != 0 or -res.fun > 1e-9:
                return False
    return True


@dataclass(frozen=True)
class StageCost:
    Q: np.ndarray
    R: np.ndarray
    q: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = _matrix(self.Q, "Q")
        n = Q.shape[0]
        R = _matrix(self.R, "R")
        m = R.shape[0]
        _check_symmetric_psd(Q, "Q")
        _check_symmetric_psd(R, "R")
        q = _vector(np.zeros(n) if self.q is None else self.q, "q", n)
        r = _vector(np.zeros(m) if self.r is None else self.r, "r", m)
        for name, val in (("Q", Q), ("R", R), ("q", q), ("r", r)):
            object.__setattr__(self, name, val)


def stage_cost_eval(cost: StageCost, x, u) -> float:
    """Evaluate ``|x|_Q^2 + q'x + |u|_R^2 + r'u``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != cost.Q.shape[0] or u.size != cost.R.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.size}, u has {u.size} entries")
    return float(x @ cost.Q @ x + cost.q @ x + u @ cost.R @ u + cost.r @ u)


@dataclass(frozen=True)
class SimulationSettings:
    rollouts: int = 5000
    steps: int = 10
    seed: int = 1
    sweep_p: tuple = (0.6, 0.7, 0.8)


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class TerminalSettings:
    K: Optional[tuple] = None
    eps: Optional[tuple] = None
    mu_hat: Optional[int] = None
    nu_max: int = 200
    mu_max: int = 200
    lmi_tol: float = 1e-8
    lmi_form: str = "lifted"


@dataclass(frozen=True)
class ScenarioConfig:
    system: LinearGaussianSystem
    constraints: ConstraintSpec
    cost: StageCost
    horizon: int
    x0: np.ndarray
    simulation: SimulationSettings = SimulationSettings()
    solver: SolverSettings = SolverSettings()
    terminal: TerminalSettings = TerminalSettings()
    name: str = "scenario"

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ValidationError("horizon N must be a positive integer")
        object.__setattr__(self, "x0", _vector(self.x0, "x0", n))
        if self.constraints.G.shape[1] != n or self.constraints.H.shape[1] != m:
            raise ValidationError("constraint matrices do not match the system dimensions")
        if self.cost.Q.shape[0] != n or self.cost.R.shape[0] != m:
            raise ValidationError("cost matrices do not match the system dimensions")
        sim = self.simulation
        if sim.rollouts < 1:
            raise ValidationError("rollout count must be at least 1")
        if sim.steps < 0:
            raise ValidationError("simulation steps must be non-negative")
        for p in sim.sweep_p:
            if not 0.5 < p < 1.0:
                raise ValidationError("sweep probabilities must lie in (0.5, 1)")
        term = self.terminal
        if term.K is not None and np.asarray(term.K, dtype=float).shape != (m, n):
            raise ValidationError(f"terminal K must have shape {(m, n)}")
        if term.eps is not None:
            eps = np.asarray(term.eps, dtype=float)
            if eps.shape != (self.constraints.c,) or np.any(eps <= 0):
                raise ValidationError("terminal eps must be a positive vector of length c")
        if term.lmi_form not in ("lifted", "reduced"):
            raise ValidationError("terminal lmi_form must be 'lifted' or 'reduced'")
        if term.mu_hat is not None and term.mu_hat < 0:
            raise ValidationError("terminal mu_hat must be non-negative")

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    @property
    def c(self) -> int:
        return self.constraints.c

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_probability(self, p) -> "ScenarioConfig":
        return self.replace(constraints=self.constraints.with_probability(p))

    def eps(self) -> np.ndarray:
        if self.terminal.eps is not None:
            return np.asarray(self.terminal.eps, dtype=float)
        return 1e-6 * self.constraints.b


def _section(data: dict, key: str) -> dict:
    sec = data.get(key, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"[{key}] must be a table")
    return sec


def _take(sec: dict, key: str, section: str):
    if key not in sec:
        raise ValidationError(f"missing required field {section}.{key}")
    return sec[key]


def scenario_from_dict(data: dict) -> ScenarioConfig:
    """Build and validate a scenario from the parsed file layout."""
    if not isinstance(data, dict):
        raise ValidationError("scenario must be a table")
    sys_sec = _section(data, "system")
    con_sec = _section(data, "constraints")
    cost_sec = _section(data, "cost")
    A = _take(sys_sec, "A", "system")
    if "sigma_w" in sys_sec:
        sigma_w = np.array(sys_sec["sigma_w"], dtype=float)
    elif "E" in sys_sec:
        E = _matrix(sys_sec["E"], "system.E")
        sigma_w = E.T @ E
    else:
        raise ValidationError("missing required field system.sigma_w (or system.E)")
    system = LinearGaussianSystem(A, _take(sys_sec, "B", "system"), sigma_w)
    constraints = ConstraintSpec(
        _take(con_sec, "G", "constraints"),
        _take(con_sec, "H", "constraints"),
        _take(con_sec, "b", "constraints"),
        _take(con_sec, "p", "constraints"),
        con_sec.get("L"), con_sec.get("C"), con_sec.get("D"),
    )
    cost = StageCost(_take(cost_sec, "Q", "cost"), _take(cost_sec, "R", "cost"),
                     cost_sec.get("q"), cost_sec.get("r"))
    sim_sec = _section(data, "simulation")
    simulation = SimulationSettings(
        rollouts=int(sim_sec.get("rollouts", SimulationSettings.rollouts)),
        steps=int(sim_sec.get("steps", SimulationSettings.steps)),
        seed=int(sim_sec.get("seed", SimulationSettings.seed)),
        sweep_p=tuple(float(p) for p in sim_sec.get("sweep_p", SimulationSettings.sweep_p)),
    )
    solver_sec = _section(data, "solver")
    solver = SolverSettings(tol=float(solver_sec.get("tol", SolverSettings.tol)),
                            max_iter=int(solver_sec.get("max_iter", SolverSettings.max_iter)))
    term_sec = _section(data, "terminal")
    K = term_sec.get("K")
    eps = term_sec.get("eps")
    terminal = TerminalSettings(
        K=None if K is None else tuple(tuple(float(x) for x in row) for row in K),
        eps=None if eps is None else tuple(float(x) for x in eps),
        mu_hat=None if term_sec.get("mu_hat") is None else int(term_sec["mu_hat"]),
        nu_max=int(term_sec.get("nu_max", TerminalSettings.nu_max)),
        mu_max=int(term_sec.get("mu_max", TerminalSettings.mu_max)),
        lmi_tol=float(term_sec.get("lmi_tol", TerminalSettings.lmi_tol)),
        lmi_form=str(term_sec.get("lmi_form", TerminalSettings.lmi_form)),
    )
    horizon = _take(data, "horizon", "scenario")
    if not isinstance(horizon, int) or isinstance(horizon, bool):
        raise ValidationError("horizon N must be a positive integer")
    return ScenarioConfig(system, constraints, cost, horizon, _take(data, "x0", "scenario"),
                          simulation, solver, terminal, name=str(data.get("name", "scenario")))


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`scenario_from_dict` (always writes ``sigma_w`` and ``L, C, D``)."""
    cons = cfg.constraints
    out: dict[str, Any] = {
        "name": cfg.name,
        "horizon": int(cfg.horizon),
        "x0": cfg.x0.tolist(),
        "system": {"A": cfg.system.A.tolist(), "B": cfg.system.B.tolist(),
                   "sigma_w": cfg.system.sigma_w.tolist()},
        "constraints": {"G": cons.G.tolist(), "H": cons.H.tolist(), "b": cons.b.tolist(),
                        "p": cons.p.tolist(), "L": cons.L.tolist(), "C": cons.C.tolist(),
                        "D": cons.D.tolist()},
        "cost": {"Q": cfg.cost.Q.tolist(), "R": cfg.cost.R.tolist(), "q": cfg.cost.q.tolist(),
                 "r": cfg.cost.r.tolist()},
        "simulation": {"rollouts": cfg.simulation.rollouts, "steps": cfg.simulation.steps,
                       "seed": cfg.simulation.seed, "sweep_p": list(cfg.simulation.sweep_p)},
        "solver": {"tol": cfg.solver.tol, "max_iter": cfg.solver.max_iter},
    }
    term = cfg.terminal
    tsec: dict[str, Any] = {"nu_max": term.nu_max, "mu_max": term.mu_max,
                            "lmi_tol": term.lmi_tol, "lmi_form": term.lmi_form}
    if term.K is not None:
        tsec["K"] = [list(row) for row in term.K]
    if term.eps is not None:
        tsec["eps"] = list(term.eps)
    if term.mu_hat is not None:
        tsec["mu_hat"] = term.mu_hat
    out["terminal"] = tsec
    return out


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a TOML or JSON scenario file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ScenarioParseError(f"malformed scenario {path}: {exc}") from exc
    return scenario_from_dict(data)


def dump_scenario(cfg: ScenarioConfig, path) -> Path:
    import tomli_w

    path = Path(path)
    data = scenario_to_dict(cfg)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2))
    else:
        path.write_text(tomli_w.dumps(data))
    return path


def bundled_scenario_path(name: str = "hvac") -> Path:
    return Path(__file__).resolve().parent / "data" / f"{name}.toml"


def hvac_scenario() -> ScenarioConfig:
    """The bundled building temperature control scenario."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return load_scenario(bundled_scenario_path("hvac"))


def scenarios_equal(a: ScenarioConfig, b: ScenarioConfig) -> bool:
    return scenario_to_dict(a) == scenario_to_dict(b)

