"""Offline terminal ingredients: gain, terminal cost, tail rows, terminal set.

The tail of the prediction (steps ``N + i``) uses ``u = K x``. With
``z = z_N`` and ``psi = vec(Phi^x_N.T)`` the chance constraint at tail step
``i`` is the second-order cone row::

    G_Kj A_K^i z <= b_j - sqrt(pt_j) || [ (G_Kj A_K^i kron S_N^{1/2}) psi ; Sx_i^{1/2} G_Kj.T ] ||

with ``S_N = I_N kron Sigma_w``. Rows using ``Sx_inf`` instead of ``Sx_i`` are
"tightened", rows without the constant part are "relaxed".

Containment certificates use the S-procedure on the quadratic form of these
rows. In homogeneous coordinates ``(zeta, 1)``, ``zeta = (z, psi)``, each row
``(k, l)`` yields the two quadratic forms::

    Fk = [[ M' F_l M ,  M' f_l ], [ f_l' M , const ]]      (norm part, M = C A^k)
    Gk = [[ 0        ,  M' g_l ], [ g_l' M , b_l   ]]      (sign part)

The psi part of every such matrix has the form ``X kron S_N`` and never couples
to ``z``, so the same test can be written on two small blocks (``z`` with the
homogeneous coordinate, and ``X`` itself). ``lmi_form="lifted"`` keeps the full
matrices, ``"reduced"`` uses the small blocks; in exact arithmetic they accept
the same multipliers.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import conic
from .linalg import (CovarianceSequence, InstabilityError, check_schur, psd_sqrt,
                     solve_discrete_lyapunov, spectral_radius, tail_covariance_sequence, unvec)
from .model import ConstraintSpec, LinearGaussianSystem, ScenarioConfig, StageCost

log = logging.getLogger(__name__)

CACHE_ENV = "SLP_SMPC_CACHE_DIR"
VARIANTS = ("exact", "tightened", "relaxed")
LMI_FORMS = ("lifted", "reduced")
# covariances are precomputed this far; later indices are generated on demand
_COV_PRECOMPUTE = 64


class DesignInfeasibleError(ValueError):
    """No terminal ingredients exist for the requested data (margin condition fails)."""


class NonTerminationError(RuntimeError):
    """Terminal set search hit its iteration caps."""


class LmiSolverError(RuntimeError):
    """An LMI certificate program could not be solved reliably."""


# ---------------------------------------------------------------------------
# ingredients


def terminal_cost(sys: LinearGaussianSystem, cost: StageCost, K):
    """Terminal Hessian ``P`` and linear term ``p_f`` for the gain ``K``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_K = sys.A + sys.B @ K
    check_schur(A_K)
    P = solve_discrete_lyapunov(A_K, cost.Q + K.T @ cost.R @ K, transpose=True)
    p_f = np.linalg.solve(np.eye(sys.n) - A_K.T, K.T @ cost.r + cost.q)
    return P, p_f


def margin_values(sys: LinearGaussianSystem, cons: ConstraintSpec, K, sigma_inf=None) -> np.ndarray:
    """``b_j - sqrt(pt_j) ||Sx_inf^{1/2} C_K' L_j'||`` for every constraint."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_K = sys.A + sys.B @ K
    if sigma_inf is None:
        sigma_inf = solve_discrete_lyapunov(A_K, sys.sigma_w, transpose=False)
    C_K = cons.C + cons.D @ K
    root = psd_sqrt(sigma_inf)
    norms = np.linalg.norm(root @ C_K.T @ cons.L.T, axis=0)
    return cons.b - np.sqrt(cons.p_tilde) * norms


@dataclass(frozen=True)
class TerminalIngredients:
    K: np.ndarray
    A_K: np.ndarray
    G_K: np.ndarray
    C_K: np.ndarray
    P: np.ndarray
    p_f: np.ndarray
    cov: CovarianceSequence = field(repr=False)
    sigma_w: np.ndarray = field(repr=False)
    constraints: ConstraintSpec = field(repr=False)
    horizon: int = 0
    margins: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A_K.shape[0]

    def sigma_x(self, i: int) -> np.ndarray:
        """Tail state covariance after ``i`` steps (``Sx_0 = 0``)."""
        if i < 0:
            raise ValueError("covariance index must be non-negative")
        seq = self.cov.sigma_x
        if i < len(seq):
            return seq[i]
        S = seq[-1]
        for _ in range(i - len(seq) + 1):
            S = self.A_K @ S @ self.A_K.T + self.sigma_w
            S = 0.5 * (S + S.T)
        return S

    @property
    def noise_sqrt(self) -> np.ndarray:
        """``(I_N kron Sigma_w)^{1/2}``."""
        return np.kron(np.eye(self.horizon), psd_sqrt(self.sigma_w))

    def tail_row(self, j: int, i: int, variant: str = "exact") -> "TailRow":
        return tail_row(self, j, i, variant)


def design_ingredients(sys: LinearGaussianSystem, cons: ConstraintSpec, cost: StageCost, K,
                       horizon: int, require_margin: bool = True) -> TerminalIngredients:
    """Assemble and check ingredients for a given gain."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (sys.m, sys.n):
        raise ValueError(f"K must have shape {(sys.m, sys.n)}, got {K.shape}")
    A_K = sys.A + sys.B @ K
    try:
        check_schur(A_K)
    except InstabilityError as exc:
        raise InstabilityError(f"terminal gain does not stabilize the system: {exc}") from None
    P, p_f = terminal_cost(sys, cost, K)
    cov = tail_covariance_sequence(A_K, sys.sigma_w, _COV_PRECOMPUTE)
    margins = margin_values(sys, cons, K, cov.sigma_x_inf)
    if require_margin and np.any(margins <= 0.0):
        bad = [int(j) for j in np.flatnonzero(margins <= 0.0)]
        raise DesignInfeasibleError(
            f"margin condition b_j - sqrt(pt_j)||Sx_inf^(1/2) C_K' L_j'|| > 0 fails for constraints {bad} "
            f"(margins {margins.tolist()}); the probability level is too high for this gain and covariance")
    arrs = {}
    for name, val in (("K", K), ("A_K", A_K), ("G_K", cons.G + cons.H @ K),
                      ("C_K", cons.C + cons.D @ K), ("P", P), ("p_f", p_f), ("margins", margins)):
        v = np.array(val, dtype=float)
        v.setflags(write=False)
        arrs[name] = v
    return TerminalIngredients(cov=cov, sigma_w=sys.sigma_w, constraints=cons, horizon=int(horizon), **arrs)


def synthesize_terminal_gain(sys: LinearGaussianSystem, cons: ConstraintSpec, eps=None,
                             tol: float = 1e-9):
    """Search a gain with a stationary-covariance margin of at least ``eps``.

    Solves, over ``Sigma`` (symmetric), ``Y`` and ``t``::

        min t  s.t.  t I - Sigma >= 0,
                     [[Sigma - Sigma_w, A Sigma + B Y], [*, Sigma]] >= 0,
                     [[(b_j - eps_j)^2, L_j (C Sigma + D Y)], [*, Sigma / pt_j]] >= 0,

    and returns ``(K, report)`` with ``K = Y Sigma^{-1}``. The margin is then
    re-checked with the exact stationary covariance of ``A + B K``.
    """
    n, m = sys.n, sys.m
    b = cons.b
    eps = 1e-6 * b if eps is None else np.broadcast_to(np.asarray(eps, dtype=float), b.shape).copy()
    if np.any(eps <= 0.0):
        raise ValueError("margins eps must be strictly positive")
    if np.any(eps >= b):
        raise DesignInfeasibleError("eps_j >= b_j leaves no room for any covariance; "
                                    "the probability level is too high for this constraint/covariance")
    ns = n * (n + 1) // 2
    nv = ns + m * n + 1
    it = nv - 1
    basis = []
    for c in range(n):
        for r in range(c + 1):
            E = np.zeros((n, n))
            E[r, c] = E[c, r] = 1.0
            basis.append(E)

    def Yb(idx):
        E = np.zeros((m, n))
        E.flat[idx] = 1.0
        return E

    prog = conic.ConicProgram(nv)
    floor = 1e-9 * (1.0 + np.trace(sys.sigma_w))
    prog.add_psd(-floor * np.eye(n), [(k, E) for k, E in enumerate(basis)], "sigma_floor")
    prog.add_psd(np.zeros((n, n)), [(it, np.eye(n))] + [(k, -E) for k, E in enumerate(basis)], "trace_bound")
    Z = np.zeros((n, n))
    M0 = np.block([[-sys.sigma_w, Z], [Z, Z]])
    terms = [(k, np.block([[E, (sys.A @ E)], [(sys.A @ E).T, E]])) for k, E in enumerate(basis)]
    for idx in range(m * n):
        BY = sys.B @ Yb(idx)
        terms.append((ns + idx, np.block([[Z, BY], [BY.T, Z]])))
    prog.add_psd(M0, terms, "lyapunov")
    for j in range(cons.c):
        if cons.p_tilde[j] == 0.0:
            continue
        Lj = cons.L[j]
        d = n + 1
        M0 = np.zeros((d, d))
        M0[0, 0] = (b[j] - eps[j]) ** 2
        terms = []
        for k, E in enumerate(basis):
            row = Lj @ cons.C @ E
            T = np.zeros((d, d))
            T[0, 1:] = row
            T[1:, 0] = row
            T[1:, 1:] = E / cons.p_tilde[j]
            terms.append((k, T))
        for idx in range(m * n):
            row = Lj @ cons.D @ Yb(idx)
            T = np.zeros((d, d))
            T[0, 1:] = row
            T[1:, 0] = row
            terms.append((ns + idx, T))
        prog.add_psd(M0, terms, f"margin_{j}")
    q = np.zeros(nv)
    q[it] = 1.0
    prog.set_objective(q=q)
    rep = conic.solve(prog.seal(), tol=tol, max_iter=500)
    if rep.status == "infeasible":
        raise DesignInfeasibleError("gain synthesis program is infeasible: the probability level is too "
                                    "high for the constraint bounds and disturbance covariance")
    if rep.status != "optimal":
        raise LmiSolverError(f"gain synthesis failed numerically ({rep.solver_status})")
    x = rep.x
    Sigma = sum(x[k] * E for k, E in enumerate(basis))
    Y = x[ns:ns + m * n].reshape(m, n)
    K = np.linalg.solve(Sigma.T, Y.T).T
    A_K = sys.A + sys.B @ K
    rho = spectral_radius(A_K)
    if rho >= 1.0:
        raise DesignInfeasibleError(f"recovered gain is not stabilizing (spectral radius {rho:.6g})")
    margins = margin_values(sys, cons, K)
    # tolerance on the a-posteriori check: the true stationary covariance is
    # bounded by the solver's Sigma, so only solver error can push it below eps
    slack = 1e-6 * b
    if np.any(margins < eps - slack):
        raise DesignInfeasibleError(f"recovered gain misses the requested margins: {margins.tolist()} "
                                    f"< {eps.tolist()}")
    return K, {"margins": margins, "eps": eps, "sigma_inf": solve_discrete_lyapunov(A_K, sys.sigma_w, False),
               "sigma_bound": Sigma, "spectral_radius": rho, "objective": rep.objective}


# ---------------------------------------------------------------------------
# tail rows


@dataclass(frozen=True)
class TailRow:
    i: int
    j: int
    variant: str
    lin: np.ndarray        # G_Kj A_K^i (n,)
    aug: Optional[np.ndarray]  # Sx^{1/2} G_Kj' (n,) or None
    rhs: float
    scale: float
    noise_sqrt: np.ndarray = field(repr=False)  # (I_N kron Sigma_w)^{1/2}

    def soc_factor(self) -> np.ndarray:
        """Matrix acting on ``psi``: ``lin kron S_N^{1/2}``."""
        return np.kron(self.lin[None, :], self.noise_sqrt)

    def psi_image(self, phi_N: np.ndarray) -> np.ndarray:
        """``(lin kron S_N^{1/2}) psi`` computed from ``Phi^x_N`` directly."""
        return self.noise_sqrt @ (np.asarray(phi_N).T @ self.lin)

    def residual(self, z, phi_N) -> float:
        """Slack ``rhs - lin.z - scale * norm``; non-negative means satisfied."""
        s = self.psi_image(phi_N)
        if self.aug is not None:
            s = np.concatenate([s, self.aug])
        return float(self.rhs - self.lin @ np.asarray(z) - self.scale * np.linalg.norm(s))

    def residual_psi(self, z, psi) -> float:
        n = self.lin.shape[0]
        phi_T = unvec(psi, self.noise_sqrt.shape[0], n)
        return self.residual(z, phi_T.T)

    def satisfied(self, z, phi_N, tol: float = 0.0) -> bool:
        return self.residual(z, phi_N) >= -tol

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "variant": self.variant, "lin": self.lin.tolist(),
                "aug": None if self.aug is None else self.aug.tolist(), "rhs": self.rhs, "scale": self.scale}


def tail_row(ing: TerminalIngredients, j: int, i: int, variant: str = "exact") -> TailRow:
    if i < 0:
        raise ValueError("tail index must be non-negative")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cons = ing.constraints
    if not 0 <= j < cons.c:
        raise IndexError(f"constraint index {j} out of range")
    lin = ing.G_K[j] @ np.linalg.matrix_power(ing.A_K, i)
    if variant == "relaxed":
        aug = None
    else:
        S = ing.sigma_x(i) if variant == "exact" else ing.cov.sigma_x_inf
        aug = psd_sqrt(S) @ ing.G_K[j]
    return TailRow(i, j, variant, lin, aug, float(cons.b[j]), float(math.sqrt(cons.p_tilde[j])),
                   ing.noise_sqrt)


def member(rows, z, phi_N, tol: float = 0.0) -> bool:
    return all(r.satisfied(z, phi_N, tol) for r in rows)


# ---------------------------------------------------------------------------
# LMI data


@dataclass(frozen=True)
class LmiData:
    """Quadratic forms of the tail rows (norm part ``F``, sign part ``g``)."""

    ing: TerminalIngredients = field(repr=False)
    form: str = "lifted"

    def __post_init__(self):
        if self.form not in LMI_FORMS:
            raise ValueError(f"lmi form must be one of {LMI_FORMS}")

    @property
    def c(self) -> int:
        return self.ing.constraints.c

    @property
    def n(self) -> int:
        return self.ing.n

    @property
    def Nn(self) -> int:
        return self.ing.horizon * self.n

    @property
    def sigma_N(self) -> np.ndarray:
        return np.kron(np.eye(self.ing.horizon), self.ing.sigma_w)

    def F(self, j: int) -> np.ndarray:
        cons = self.ing.constraints
        LtL = np.outer(cons.L[j], cons.L[j])
        d = LtL.shape[0]
        big = -cons.p_tilde[j] * np.kron(LtL, self.sigma_N)
        out = np.zeros((d + big.shape[0],) * 2)
        out[:d, :d] = LtL
        out[d:, d:] = big
        return out

    def f(self, j: int) -> np.ndarray:
        cons = self.ing.constraints
        return np.concatenate([-cons.b[j] * cons.L[j], np.zeros(cons.d * self.Nn)])

    def g(self, j: int) -> np.ndarray:
        cons = self.ing.constraints
        return 0.5 * np.concatenate([-cons.L[j], np.zeros(cons.d * self.Nn)])

    def varphi(self, j: int) -> float:
        cons = self.ing.constraints
        Lc = cons.L[j] @ self.ing.C_K
        return float(cons.b[j] ** 2 - cons.p_tilde[j] * Lc @ self.ing.cov.sigma_x_inf @ Lc)

    def phi(self, i: int, j: int) -> float:
        cons = self.ing.constraints
        Lc = cons.L[j] @ self.ing.C_K
        return float(cons.b[j] ** 2 - cons.p_tilde[j] * Lc @ self.ing.sigma_x(i) @ Lc)

    @property
    def bold_A(self) -> np.ndarray:
        A_K = self.ing.A_K
        return _blkdiag(A_K, np.kron(A_K, np.eye(self.Nn)))

    @property
    def bold_C(self) -> np.ndarray:
        C_K = self.ing.C_K
        return _blkdiag(C_K, np.kron(C_K, np.eye(self.Nn)))

    def literal_forms(self, i: int, j: int, const: float):
        """The two homogeneous matrices built literally from the bold maps (for audits)."""
        M = self.bold_C @ np.linalg.matrix_power(self.bold_A, i)
        F, f, g = self.F(j), self.f(j), self.g(j)
        dim = M.shape[1]
        QF = np.zeros((dim + 1, dim + 1))
        QF[:dim, :dim] = M.T @ F @ M
        QF[:dim, dim] = QF[dim, :dim] = M.T @ f
        QF[dim, dim] = const
        QG = np.zeros((dim + 1, dim + 1))
        QG[:dim, dim] = QG[dim, :dim] = M.T @ g
        QG[dim, dim] = self.ing.constraints.b[j]
        return QF, QG

    # block form used by the certificate programs ------------------------
    def direction(self, i: int, j: int) -> np.ndarray:
        """``(L_j C_K A_K^i)'`` as an n-vector."""
        return (self.ing.constraints.L[j] @ self.ing.C_K @ np.linalg.matrix_power(self.ing.A_K, i))

    def blocks(self, i: int, j: int, const: float):
        """``(F-form blocks, g-form blocks)``; each is a list of symmetric arrays."""
        a = self.direction(i, j)
        n = a.shape[0]
        cons = self.ing.constraints
        bj = cons.b[j]
        zF = np.zeros((n + 1, n + 1))
        zF[:n, :n] = np.outer(a, a)
        zF[:n, n] = zF[n, :n] = -bj * a
        zF[n, n] = const
        zG = np.zeros((n + 1, n + 1))
        zG[:n, n] = zG[n, :n] = -0.5 * a
        zG[n, n] = bj
        X = -cons.p_tilde[j] * np.outer(a, a)
        if self.form == "reduced":
            return [zF, X], [zG, np.zeros((n, n))]
        return [_lift(zF, np.kron(X, self.sigma_N))], [_lift(zG, np.zeros((n * self.Nn,) * 2))]


def _blkdiag(*mats) -> np.ndarray:
    rows = sum(M.shape[0] for M in mats)
    cols = sum(M.shape[1] for M in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for M in mats:
        out[r:r + M.shape[0], c:c + M.shape[1]] = M
        r += M.shape[0]
        c += M.shape[1]
    return out


def _lift(zblock: np.ndarray, psi_block: np.ndarray) -> np.ndarray:
    """Arrange ``(z, psi, 1)`` ordering from a ``(z, 1)`` block and a psi block."""
    n = zblock.shape[0] - 1
    p = psi_block.shape[0]
    out = np.zeros((n + p + 1,) * 2)
    out[:n, :n] = zblock[:n, :n]
    out[:n, -1] = out[-1, :n] = zblock[:n, n]
    out[-1, -1] = zblock[n, n]
    out[n:n + p, n:n + p] = psi_block
    return out


# ---------------------------------------------------------------------------
# certificate programs


@dataclass
class Certificate:
    target_i: int
    target_j: int
    margin: float
    certified: bool
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    solve_time: float = 0.0

    def to_dict(self) -> dict:
        return {"i": self.target_i, "j": self.target_j, "margin": self.margin, "certified": self.certified,
                "alpha": self.alpha.tolist(), "beta": self.beta.tolist(),
                "gamma": self.gamma.tolist(), "delta": self.delta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(d["i"], d["j"], d["margin"], d["certified"], *(np.asarray(d[k], dtype=float)
                                                                   for k in ("alpha", "beta", "gamma", "delta")))


def certify_implication(lmi: LmiData, target_i: int, target_j: int, target_const: float,
                        premises: list, lmi_tol: float = 1e-8, solver_tol: float = 1e-9,
                        margin_cap: float = 1.0) -> Certificate:
    """S-procedure test that the premise rows imply the target row.

    ``premises`` is a list of ``(k, l, const)``. Both LMIs (norm part with
    multipliers alpha/beta, sign part with gamma/delta) go into one program
    that maximizes a common margin ``t``: ``LMI - t I >= 0``. The implication
    is certified when ``t >= -lmi_tol * scale`` with ``scale`` the largest
    entry of the target data (at least 1).
    """
    P = len(premises)
    tF, tG = lmi.blocks(target_i, target_j, target_const)
    pre = [lmi.blocks(k, l, const) for k, l, const in premises]
    nv = 4 * P + 1
    it = nv - 1
    prog = conic.ConicProgram(nv)
    for which, target in ((0, tF), (1, tG)):
        for blk, T in enumerate(target):
            terms = []
            for p, (pF, pG) in enumerate(pre):
                a_idx = 4 * p + 2 * which
                if np.any(pF[blk]):
                    terms.append((a_idx, -pF[blk]))
                if np.any(pG[blk]):
                    terms.append((a_idx + 1, -pG[blk]))
            terms.append((it, -np.eye(T.shape[0])))
            prog.add_psd(T, terms, f"{'fg'[which]}{blk}")
    prog.add_nonneg(np.hstack([np.eye(4 * P), np.zeros((4 * P, 1))]), None, "multipliers")
    cap = np.zeros((1, nv))
    cap[0, it] = -1.0
    prog.add_nonneg(cap, [margin_cap], "margin_cap")
    q = np.zeros(nv)
    q[it] = -1.0
    prog.set_objective(q=q)
    rep = conic.solve(prog.seal(), tol=solver_tol, max_iter=400)
    if rep.status != "optimal":
        raise LmiSolverError(f"certificate program for target (i={target_i}, j={target_j}) with "
                             f"{P} premises returned {rep.status} ({rep.solver_status})")
    x = rep.x
    t = float(x[it])
    scale = max(1.0, max(float(np.abs(T).max()) for T in tF + tG))
    mult = x[:4 * P].reshape(P, 4) if P else np.zeros((0, 4))
    return Certificate(target_i, target_j, t, t >= -lmi_tol * scale, mult[:, 0].copy(), mult[:, 1].copy(),
                       mult[:, 2].copy(), mult[:, 3].copy(), rep.solve_time)


def _nu_premises(lmi: LmiData, nu: int):
    return [(k, l, lmi.varphi(l)) for k in range(nu + 1) for l in range(lmi.c)]


def _mu_premises(lmi: LmiData, mu: int):
    return [(k, l, lmi.phi(k, l)) for k in range(mu + 1) for l in range(lmi.c)]


def lmi_containment_nu(lmi: LmiData, nu: int, lmi_tol: float = 1e-8, solver_tol: float = 1e-9):
    """Certify that the tightened rows up to ``nu`` imply tightened row ``nu + 1``."""
    if nu < 0:
        raise ValueError("nu must be non-negative")
    prem = _nu_premises(lmi, nu)
    certs = [certify_implication(lmi, nu + 1, j, lmi.varphi(j), prem, lmi_tol, solver_tol)
             for j in range(lmi.c)]
    return all(c.certified for c in certs), certs


def _mu_target(args):
    lmi, i, j, prem, lmi_tol, solver_tol = args
    return certify_implication(lmi, i, j, lmi.varphi(j), prem, lmi_tol, solver_tol)


def lmi_containment_mu(lmi: LmiData, mu: int, nu: int, lmi_tol: float = 1e-8, solver_tol: float = 1e-9,
                       stop_early: bool = True, workers: int = 1):
    """Certify that the exact rows up to ``mu`` imply tightened rows ``mu+1 .. mu+nu+1``.

    Targets are checked in increasing ``i``; with ``stop_early`` the search
    stops at the first target that is not certified.
    """
    if mu < 0 or nu < 0:
        raise ValueError("mu and nu must be non-negative")
    prem = _mu_premises(lmi, mu)
    jobs = [(lmi, i, j, prem, lmi_tol, solver_tol)
            for i in range(mu + 1, mu + nu + 2) for j in range(lmi.c)]
    certs = []
    if workers > 1:
        chunk = max(1, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for s in range(0, len(jobs), chunk):
                batch = list(pool.map(_mu_target, jobs[s:s + chunk]))
                certs.extend(batch)
                if stop_early and not all(c.certified for c in batch):
                    break
    else:
        for job in jobs:
            cert = _mu_target(job)
            certs.append(cert)
            if stop_early and not cert.certified:
                break
    ok = len(certs) == len(jobs) and all(c.certified for c in certs)
    return ok, certs


# ---------------------------------------------------------------------------
# terminal set


@dataclass
class TerminalSet:
    rows: list
    mu: int
    nu: int
    nu_certificates: list = field(default_factory=list, repr=False)
    mu_certificates: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def contains(self, z, phi_N, tol: float = 0.0) -> bool:
        return member(self.rows, z, phi_N, tol)

    def residuals(self, z, phi_N) -> np.ndarray:
        return np.array([r.residual(z, phi_N) for r in self.rows])

    def to_dict(self) -> dict:
        return {"mu": self.mu, "nu": self.nu, "rows": [r.to_dict() for r in self.rows],
                "nu_certificates": [c.to_dict() for c in self.nu_certificates],
                "mu_certificates": [c.to_dict() for c in self.mu_certificates],
                "meta": self.meta}

    @classmethod
    def from_dict(cls, data: dict, noise_sqrt: Optional[np.ndarray] = None) -> "TerminalSet":
        meta = data.get("meta", {})
        if noise_sqrt is None:
            noise_sqrt = np.kron(np.eye(meta["horizon"]), psd_sqrt(np.asarray(meta["sigma_w"], dtype=float)))
        rows = [TailRow(r["i"], r["j"], r["variant"], np.asarray(r["lin"], dtype=float),
                        None if r["aug"] is None else np.asarray(r["aug"], dtype=float),
                        float(r["rhs"]), float(r["scale"]), noise_sqrt) for r in data["rows"]]
        return cls(rows, int(data["mu"]), int(data["nu"]),
                   [Certificate.from_dict(c) for c in data.get("nu_certificates", [])],
                   [Certificate.from_dict(c) for c in data.get("mu_certificates", [])], meta)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TerminalSet":
        return cls.from_dict(json.loads(text))


def exact_rows(ing: TerminalIngredients, upto: int, variant: str = "exact") -> list:
    return [tail_row(ing, j, i, variant) for i in range(upto + 1) for j in range(ing.constraints.c)]


def algorithm1_terminal_set(ing: TerminalIngredients, nu_max: int = 200, mu_max: int = 200,
                            lmi_tol: float = 1e-8, lmi_form: str = "lifted", solver_tol: float = 1e-9,
                            start_nu: int = 0, start_mu: int = 0, workers: int = 1,
                            progress=None) -> TerminalSet:
    """Two-stage index search for the finitely determined terminal set.

    Stage one increases ``nu`` until the tightened rows ``0..nu`` imply
    tightened row ``nu + 1``. Stage two increases ``mu`` until the exact rows
    ``0..mu`` imply the tightened rows ``mu + 1 .. mu + nu + 1``. Both tests
    are sufficient only (S-procedure), so the search is capped.
    """
    if np.any(ing.margins <= 0.0):
        raise DesignInfeasibleError("margin condition fails; no terminal set can be certified")
    lmi = LmiData(ing, lmi_form)
    t0 = time.perf_counter()
    note = progress or (lambda msg: log.info(msg))
    nu = start_nu
    while True:
        if nu > nu_max:
            raise NonTerminationError(
                f"terminal set search did not terminate: no nu <= {nu_max} certified. The S-procedure "
                "containment test is only sufficient (lossy), so the search may never succeed; try a "
                "different gain K, a looser lmi_tol, or larger caps")
        ok, nu_certs = lmi_containment_nu(lmi, nu, lmi_tol, solver_tol)
        note(f"nu={nu} margin={min(c.margin for c in nu_certs):.3e} certified={ok}")
        if ok:
            break
        nu += 1
    mu = start_mu
    while True:
        if mu > mu_max:
            raise NonTerminationError(
                f"terminal set search did not terminate: no mu <= {mu_max} certified (nu={nu}). The "
                "S-procedure containment test is only sufficient (lossy), so the search may never "
                "succeed; try a different gain K, a looser lmi_tol, or larger caps")
        ok, mu_certs = lmi_containment_mu(lmi, mu, nu, lmi_tol, solver_tol, workers=workers)
        note(f"mu={mu} margin={min(c.margin for c in mu_certs):.3e} certified={ok}")
        if ok:
            break
        mu += 1
    rows = exact_rows(ing, mu)
    meta = {"horizon": ing.horizon, "sigma_w": np.asarray(ing.sigma_w).tolist(), "K": ing.K.tolist(),
            "lmi_tol": lmi_tol, "lmi_form": lmi_form, "solver_tol": solver_tol,
            "elapsed_s": time.perf_counter() - t0}
    return TerminalSet(rows, mu, nu, nu_certs, mu_certs, meta)


# ---------------------------------------------------------------------------
# posterior validation


def sample_members(tset: TerminalSet, z_center, phi_center, count: int, rng: np.random.Generator,
                   z_radius: float = 1.0, phi_radius: float = 0.25, max_draws: int = 10_000_000):
    """Uniform samples of ``S_mu`` inside a box, by rejection.

    The box is ``z_center +- z_radius`` for ``z_N`` and
    ``phi_center +- phi_radius * max|phi_center|`` for the free blocks of
    ``Phi^x_N`` (the last block stays the identity). Returns ``(Z, PHI, rate)``.
    """
    z_center = np.asarray(z_center, dtype=float)
    phi_center = np.asarray(phi_center, dtype=float)
    n = z_center.shape[0]
    free = phi_center.shape[1] - n
    span = phi_radius * max(float(np.abs(phi_center[:, :free]).max(initial=0.0)), 1e-12)
    lin = np.array([r.lin for r in tset.rows])
    rhs = np.array([r.rhs for r in tset.rows])
    scale = np.array([r.scale for r in tset.rows])
    aug2 = np.array([0.0 if r.aug is None else float(r.aug @ r.aug) for r in tset.rows])
    S = tset.rows[0].noise_sqrt
    Zs, Ps, drawn = [], [], 0
    batch = 2048
    while sum(len(z) for z in Zs) < count:
        if drawn >= max_draws:
            raise RuntimeError(f"rejection sampling accepted too few points after {drawn} draws")
        z = z_center + rng.uniform(-z_radius, z_radius, (batch, n))
        phi = np.repeat(phi_center[None], batch, axis=0)
        phi[:, :, :free] += rng.uniform(-span, span, (batch, n, free))
        drawn += batch
        # || S Phi' lin ||^2 for every row and sample
        img = np.einsum("ab,scb,rc->sra", S, phi, lin)
        nrm = np.sqrt(np.einsum("sra,sra->sr", img, img) + aug2[None, :])
        ok = np.all(z @ lin.T + scale[None, :] * nrm <= rhs[None, :], axis=1)
        Zs.append(z[ok])
        Ps.append(phi[ok])
    Z = np.concatenate(Zs)[:count]
    P = np.concatenate(Ps)[:count]
    return Z, P, len(np.concatenate(Zs)) / drawn


def exact_row_slack(ing: TerminalIngredients, Z, PHI, upto: int) -> np.ndarray:
    """Smallest exact-row slack over ``i = 0..upto`` and all constraints, per sample."""
    rows = exact_rows(ing, upto)
    lin = np.array([r.lin for r in rows])
    rhs = np.array([r.rhs for r in rows])
    scale = np.array([r.scale for r in rows])
    aug2 = np.array([float(r.aug @ r.aug) for r in rows])
    S = rows[0].noise_sqrt
    Z, PHI = np.asarray(Z), np.asarray(PHI)
    out = np.empty(Z.shape[0])
    for s0 in range(0, Z.shape[0], 1000):
        img = np.einsum("ab,scb,rc->sra", S, PHI[s0:s0 + 1000], lin)
        nrm = np.sqrt(np.einsum("sra,sra->sr", img, img) + aug2[None, :])
        slack = rhs[None, :] - Z[s0:s0 + 1000] @ lin.T - scale[None, :] * nrm
        out[s0:s0 + 1000] = slack.min(axis=1)
    return out


def tail_satisfaction(ing: TerminalIngredients, Z, PHI, rollouts: int, steps: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Empirical ``Pr[G_K x_{N+i} <= b]`` for ``i = 0..steps`` under ``u = K x``.

    Rollout ``r`` starts from member ``r mod len(Z)``: ``x_N = z + Phi^x_N w``
    with fresh disturbances ``w_0..w_{N-1}``. Returns a ``(steps + 1, c)`` array.
    """
    Z = np.asarray(Z)
    PHI = np.asarray(PHI)
    n = ing.n
    N = ing.horizon
    root = psd_sqrt(ing.sigma_w)
    pick = np.arange(rollouts) % Z.shape[0]
    w = rng.standard_normal((rollouts, N * n)) @ np.kron(np.eye(N), root).T
    x = Z[pick] + np.einsum("rab,rb->ra", PHI[pick], w)
    b = ing.constraints.b
    out = np.zeros((steps + 1, ing.constraints.c))
    for i in range(steps + 1):
        out[i] = np.mean(x @ ing.G_K.T <= b[None, :], axis=0)
        x = x @ ing.A_K.T + rng.standard_normal((rollouts, n)) @ root.T
    return out


# ---------------------------------------------------------------------------
# cache


def cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "slp_smpc"


def cache_key(sys: LinearGaussianSystem, cons: ConstraintSpec, K, horizon: int, lmi_tol: float,
              lmi_form: str) -> str:
    payload = {
        "A": sys.A.tolist(), "B": sys.B.tolist(), "sigma_w": sys.sigma_w.tolist(),
        "G": cons.G.tolist(), "H": cons.H.tolist(), "b": cons.b.tolist(), "p": cons.p.tolist(),
        "L": cons.L.tolist(), "C": cons.C.tolist(), "D": cons.D.tolist(),
        "K": np.asarray(K, dtype=float).tolist(), "N": int(horizon), "lmi_tol": float(lmi_tol),
        "lmi_form": lmi_form, "version": 1,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def load_cached(key: str, directory=None) -> Optional[TerminalSet]:
    path = Path(directory or cache_dir()) / f"terminal_set_{key}.json"
    if not path.exists():
        return None
    return TerminalSet.from_json(path.read_text())


def store_cached(tset: TerminalSet, key: str, directory=None) -> Path:
    d = Path(directory or cache_dir())
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"terminal_set_{key}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(tset.to_json())
    tmp.replace(path)
    return path


def terminal_set_for(cfg: ScenarioConfig, ing: TerminalIngredients, use_cache: bool = True,
                     workers: int = 1, progress=None) -> TerminalSet:
    """Terminal set for a scenario, read from or written to the cache."""
    ts = cfg.terminal
    key = cache_key(cfg.system, cfg.constraints, ing.K, cfg.horizon, ts.lmi_tol, ts.lmi_form)
    if use_cache:
        hit = load_cached(key)
        if hit is not None:
            hit.meta["cache"] = "hit"
            return hit
    tset = algorithm1_terminal_set(ing, ts.nu_max, ts.mu_max, ts.lmi_tol, ts.lmi_form,
                                   workers=workers, progress=progress)
    tset.meta["cache_key"] = key
    if use_cache:
        store_cached(tset, key)
    tset.meta["cache"] = "miss"
    return tset


# ---------------------------------------------------------------------------
# estimator


class TerminalDesigner(BaseEstimator):
    """Offline design as an estimator: ``fit(scenario)`` computes the ingredients and set.

    Parameters mirror the scenario's terminal settings; ``K=None`` keeps the
    scenario's gain, ``K="synthesize"`` runs the gain synthesis program.
    """

    def __init__(self, K=None, eps=None, lmi_tol=None, lmi_form=None, nu_max=None, mu_max=None,
                 use_cache=True, workers=1, progress=None):
        self.K = K
        self.eps = eps
        self.lmi_tol = lmi_tol
        self.lmi_form = lmi_form
        self.nu_max = nu_max
        self.mu_max = mu_max
        self.use_cache = use_cache
        self.workers = workers
        self.progress = progress

    def fit(self, scenario: ScenarioConfig, y=None):
        ts = scenario.terminal
        K = self.K if self.K is not None else ts.K
        self.gain_report_ = None
        if K is None or (isinstance(K, str) and K == "synthesize"):
            K, self.gain_report_ = synthesize_terminal_gain(
                scenario.system, scenario.constraints, self.eps if self.eps is not None else scenario.eps())
        K = np.atleast_2d(np.asarray(K, dtype=float))
        changes = {k: v for k, v in (("lmi_tol", self.lmi_tol), ("lmi_form", self.lmi_form),
                                      ("nu_max", self.nu_max), ("mu_max", self.mu_max)) if v is not None}
        changes["K"] = tuple(map(tuple, K.tolist()))
        scenario = scenario.replace(terminal=dataclasses.replace(ts, **changes))
        self.scenario_ = scenario
        self.ingredients_ = design_ingredients(scenario.system, scenario.constraints, scenario.cost,
                                               K, scenario.horizon)
        self.terminal_set_ = terminal_set_for(scenario, self.ingredients_, self.use_cache, self.workers,
                                              self.progress)
        self.mu_ = self.terminal_set_.mu
        self.nu_ = self.terminal_set_.nu
        return self

    def predict(self, X):
        """Membership of ``(z, Phi^x_N)`` pairs in the terminal set."""
        return np.array([self.terminal_set_.contains(z, phi) for z, phi in X])
