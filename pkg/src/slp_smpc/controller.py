"""Online programs: the initial SOCP, reconditioning, and the receding-horizon step.

Decision vector layout (see :class:`Layout`): nominal states ``z_0..z_N``,
nominal inputs ``v_0..v_{N-1}``, state response blocks ``Phi^x_{k,t}`` for
``2 <= k <= N, 1 <= t < k`` and input response blocks ``Phi^u_{k,t}`` for
``1 <= k <= N-1, 1 <= t <= k``. The diagonal blocks ``Phi^x_{k,k} = I`` are
constants and never become variables.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import conic
from .linalg import psd_sqrt
from .model import ScenarioConfig
from .slp import NominalTrajectory, Policy, SystemResponse, response_from_feedback
from .terminal import TerminalIngredients, TerminalSet, tail_row

log = logging.getLogger(__name__)

CASES = ("C1", "C2", "C3", "C4")
DEGENERACY_TOL = 1e-12
METHODS = ("rc", "rc-mod", "policy17")
CANDIDATE_TOL = 1e-6
# (tolerance multiplier, eliminate equalities, solver options). Pinned
# terminal pairs leave the k > 0 programs dual degenerate, which sometimes
# stalls the default interior-point settings; equivalent formulations and
# damped steps are tried before the single 10x tolerance relaxation.
SOLVE_LADDER = (
    (1.0, False, None),
    (1.0, False, {"equilibrate_enable": False}),
    (1.0, False, {"max_step_fraction": 0.9}),
    (1.0, True, {"equilibrate_enable": False}),
    (10.0, False, {"max_step_fraction": 0.9}),
)


class ControllerFault(RuntimeError):
    """The online program failed where theory says it cannot; carries diagnostics."""

    def __init__(self, message, k=None, report=None, candidate=None, program=None):
        super().__init__(message)
        self.k = k
        self.report = report
        self.candidate = candidate
        self.program = program


class InitialInfeasibleError(RuntimeError):
    """The k = 0 program has no solution for the given initial state."""


# ---------------------------------------------------------------------------
# variable layout


class Layout:
    def __init__(self, n: int, m: int, N: int):
        self.n, self.m, self.N = n, m, N
        off = 0
        self.z0 = off
        off += (N + 1) * n
        self.v0 = off
        off += N * m
        self.px = {}
        for k in range(2, N + 1):
            for t in range(1, k):
                self.px[(k, t)] = off
                off += n * n
        self.pu = {}
        for k in range(1, N):
            for t in range(1, k + 1):
                self.pu[(k, t)] = off
                off += m * n
        self.size = off
        self._cache = {}

    def z(self, i: int) -> np.ndarray:
        return np.arange(self.z0 + i * self.n, self.z0 + (i + 1) * self.n)

    def v(self, i: int) -> np.ndarray:
        return np.arange(self.v0 + i * self.m, self.v0 + (i + 1) * self.m)

    def phi_x(self, k: int, t: int) -> Optional[np.ndarray]:
        """Row-major index matrix of block ``Phi^x_{k,t}`` (None for the identity diagonal)."""
        if t == k:
            return None
        s = self.px[(k, t)]
        return np.arange(s, s + self.n * self.n).reshape(self.n, self.n)

    def phi_u(self, k: int, t: int) -> np.ndarray:
        s = self.pu[(k, t)]
        return np.arange(s, s + self.m * self.n).reshape(self.m, self.n)

    def x_row_index(self, k: int) -> np.ndarray:
        """Variable indices of ``Phi^x_k`` (``n x k n``); -1 marks the identity block."""
        key = ("x", k)
        if key not in self._cache:
            out = np.full((self.n, k * self.n), -1, dtype=np.int64)
            for t in range(1, k):
                out[:, (t - 1) * self.n:t * self.n] = self.phi_x(k, t)
            self._cache[key] = out
        return self._cache[key]

    def u_row_index(self, k: int) -> np.ndarray:
        key = ("u", k)
        if key not in self._cache:
            self._cache[key] = np.hstack([self.phi_u(k, t) for t in range(1, k + 1)])
        return self._cache[key]

    def names(self) -> list:
        out = [""] * self.size
        for i in range(self.N + 1):
            for r, idx in enumerate(self.z(i)):
                out[idx] = f"z[{i}][{r}]"
        for i in range(self.N):
            for r, idx in enumerate(self.v(i)):
                out[idx] = f"v[{i}][{r}]"
        for (k, t) in self.px:
            for (r, c), idx in np.ndenumerate(self.phi_x(k, t)):
                out[idx] = f"Phix[{k},{t}][{r},{c}]"
        for (k, t) in self.pu:
            for (r, c), idx in np.ndenumerate(self.phi_u(k, t)):
                out[idx] = f"Phiu[{k},{t}][{r},{c}]"
        return out

    def pack(self, z, v, phi_x_rows, phi_u_rows) -> np.ndarray:
        """Vector for a tuple given as nominal arrays and response row blocks."""
        x = np.zeros(self.size)
        n = self.n
        z = np.asarray(z)
        v = np.asarray(v)
        for i in range(self.N + 1):
            x[self.z(i)] = z[i]
        for i in range(self.N):
            x[self.v(i)] = v[i]
        for (k, t) in self.px:
            x[self.phi_x(k, t)] = phi_x_rows[k - 1][:, (t - 1) * n:t * n]
        for (k, t) in self.pu:
            x[self.phi_u(k, t)] = phi_u_rows[k - 1][:, (t - 1) * n:t * n]
        return x

    def unpack(self, x, K, system=None) -> Policy:
        """Policy stored in ``x``.

        With ``system`` the nominal states and state responses are recomputed
        from ``z_0``, the inputs and the input responses, so the result obeys
        the dynamics and the response recursion to rounding error. Solver
        residuals would otherwise accumulate through the shifted candidates
        and make the pinned terminal rows of later programs inconsistent.
        """
        n, m, N = self.n, self.m, self.N
        z = np.stack([x[self.z(i)] for i in range(N + 1)])
        v = np.stack([x[self.v(i)] for i in range(N)]) if N else np.zeros((0, m))
        rows_u = [np.hstack([x[self.phi_u(k, t)] for t in range(1, k + 1)]) for k in range(1, N)]
        if system is not None:
            for i in range(N):
                z[i + 1] = system.A @ z[i] + system.B @ v[i]
            resp = response_from_feedback(system, rows_u)
            return Policy(NominalTrajectory(z, v), resp, K)
        rows_x = []
        for k in range(1, N + 1):
            blocks = [np.eye(n) if t == k else x[self.phi_x(k, t)] for t in range(1, k + 1)]
            rows_x.append(np.hstack(blocks))
        return Policy(NominalTrajectory(z, v), SystemResponse(rows_x, rows_u), K)


class _Rows:
    """Accumulates sparse affine rows ``sum coef * x[idx] + const``."""

    def __init__(self, nvars: int):
        self.nvars = nvars
        self.r, self.c, self.d = [], [], []
        self.g = []

    def new(self, const: float = 0.0) -> int:
        self.g.append(float(const))
        return len(self.g) - 1

    def add(self, row: int, idx, coef) -> None:
        idx = np.asarray(idx)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).ravel()
        idx = idx.ravel()
        keep = coef != 0.0
        self.r.extend([row] * int(keep.sum()))
        self.c.extend(idx[keep].tolist())
        self.d.extend(coef[keep].tolist())

    def add_const(self, row: int, value: float) -> None:
        self.g[row] += float(value)

    def build(self):
        F = sp.csr_matrix((self.d, (self.r, self.c)), shape=(len(self.g), self.nvars))
        return F, np.array(self.g)


# ---------------------------------------------------------------------------
# program assembly helpers


def response_image(lay: Layout, k: int, g: np.ndarray, h: Optional[np.ndarray] = None,
                   S: Optional[np.ndarray] = None):
    """Affine map ``x -> (I_k kron S) (Phi^x_k' g + Phi^u_k' h)`` as dense ``(F, c)`` with ``k n`` rows."""
    n = lay.n
    kn = k * n
    F = np.zeros((kn, lay.size))
    const = np.zeros(kn)
    if k == 0:
        return F, const
    idx = lay.x_row_index(k)
    var = idx >= 0
    cols = np.broadcast_to(np.arange(kn), idx.shape)
    coef = np.broadcast_to(np.asarray(g, dtype=float)[:, None], idx.shape)
    np.add.at(F, (cols[var], idx[var]), coef[var])
    const[(k - 1) * n:] = g
    if h is not None and np.any(h) and k < lay.N:
        iu = lay.u_row_index(k)
        np.add.at(F, (np.broadcast_to(np.arange(kn), iu.shape), iu),
                  np.broadcast_to(np.asarray(h, dtype=float)[:, None], iu.shape))
    if S is not None:
        F = np.einsum("rc,kcs->krs", S, F.reshape(k, n, lay.size)).reshape(kn, lay.size)
        const = (const.reshape(k, n) @ S.T).ravel()
    return F, const


def _nominal_row(lay: Layout, i: int, g, h, rhs: float):
    """Affine row ``rhs - g.z_i - h.v_i`` (dense)."""
    F = np.zeros((1, lay.size))
    F[0, lay.z(i)] = -np.asarray(g, dtype=float)
    if h is not None and i < lay.N:
        F[0, lay.v(i)] = -np.asarray(h, dtype=float)
    return F, np.array([float(rhs)])


def horizon_soc_rows(lay: Layout, i: int, g: np.ndarray, h: np.ndarray, b: float, scale: float,
                     S: np.ndarray):
    """SOC block ``(b - g.z_i - h.v_i, scale * Sigma^{1/2} [Phi^x_i' Phi^u_i'] [g; h])``.

    For ``i = 0`` (or a zero scale) the block has only the ``t`` row.
    """
    F0, g0 = _nominal_row(lay, i, g, h, b)
    if scale == 0.0 or i == 0:
        return F0, g0
    F1, c1 = response_image(lay, i, g, h, S)
    return np.vstack([F0, scale * F1]), np.concatenate([g0, scale * c1])


def soc_row_horizon(lay: Layout, i: int, j: int, cons, S: np.ndarray, scale: float):
    """Tightened chance row for step ``i`` and constraint ``j``; ``(F, g, kind)``.

    ``scale`` multiplies the standard-deviation term; negative scales are
    rejected (callers use the matched-variance form instead).
    """
    if scale < 0.0:
        raise ValueError("negative SOC scale; use the matched-variance constraint instead")
    F, g = horizon_soc_rows(lay, i, cons.G[j], cons.H[j], float(cons.b[j]), scale, S)
    kind = "nonneg" if F.shape[0] == 1 else "soc"
    return F, g, kind


def _image_equalities(lay: Layout, i: int, g: np.ndarray, h: Optional[np.ndarray], target: np.ndarray):
    """Rows for ``g' Phi^x_i + h' Phi^u_i - target = 0`` (``target`` has ``i n`` entries)."""
    F, c = response_image(lay, i, g, h)
    return F, c - np.asarray(target, dtype=float)


def _range_basis(S: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the range of a symmetric PSD square root."""
    vals, vecs = np.linalg.eigh(S)
    keep = vals > DEGENERACY_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    return vecs[:, keep]


def _zero_variance_rows(F: np.ndarray, c: np.ndarray, S_full: np.ndarray):
    """Restrict image equalities ``F x + c = 0`` to the directions the noise excites.

    With a singular noise covariance a nonzero image can still carry zero
    variance; pinning the whole image would then cut off the shifted candidate.
    """
    U = _range_basis(S_full)
    return U.T @ F, U.T @ c


def tail_soc(lay: Layout, row, scale: float):
    """SOC block for a tail row on ``(z_N, Phi^x_N)`` with the given scale."""
    F0, g0 = _nominal_row(lay, lay.N, row.lin, None, row.rhs)
    if scale == 0.0:
        return F0, g0
    F1, c1 = response_image(lay, lay.N, row.lin, None, row.noise_sqrt[:lay.n, :lay.n])
    parts_F, parts_g = [F0, scale * F1], [g0, scale * c1]
    if row.aug is not None:
        parts_F.append(np.zeros((row.aug.shape[0], lay.size)))
        parts_g.append(scale * row.aug)
    return np.vstack(parts_F), np.concatenate(parts_g)


def _dynamics(lay: Layout, A, B, x0):
    rows = _Rows(lay.size)
    n = lay.n
    for r in range(n):
        e = rows.new(-x0[r])
        rows.add(e, lay.z(0)[r], 1.0)
    for i in range(lay.N):
        zi, zn, vi = lay.z(i), lay.z(i + 1), lay.v(i)
        for r in range(n):
            e = rows.new()
            rows.add(e, zn[r], -1.0)
            rows.add(e, zi, A[r])
            rows.add(e, vi, B[r])
    return rows.build()


def _slp(lay: Layout, A, B):
    """``Phi^x_{k+1,t} = A Phi^x_{k,t} + B Phi^u_{k,t}`` for ``t <= k``."""
    rows = _Rows(lay.size)
    n = lay.n
    for k in range(1, lay.N):
        for t in range(1, k + 1):
            nxt = lay.phi_x(k + 1, t)
            cur = lay.phi_x(k, t)
            pu = lay.phi_u(k, t)
            for r in range(n):
                for c in range(n):
                    e = rows.new()
                    rows.add(e, nxt[r, c], -1.0)
                    if cur is None:
                        rows.add_const(e, A[r, c])
                    else:
                        rows.add(e, cur[:, c], A[r])
                    rows.add(e, pu[:, c], B[r])
    return rows.build()


def _objective(lay: Layout, cfg: ScenarioConfig, ing: TerminalIngredients):
    """Factor form of the expected cost (stage costs, trace terms, terminal cost)."""
    cost = cfg.cost
    n, m, N = lay.n, lay.m, lay.N
    S = psd_sqrt(cfg.system.sigma_w)
    Qh, Rh, Ph = psd_sqrt(cost.Q), psd_sqrt(cost.R), psd_sqrt(ing.P)
    rows = _Rows(lay.size)
    q = np.zeros(lay.size)
    for i in range(N):
        for r in range(n):
            if np.any(Qh[r]):
                e = rows.new()
                rows.add(e, lay.z(i), Qh[r])
        for r in range(m):
            if np.any(Rh[r]):
                e = rows.new()
                rows.add(e, lay.v(i), Rh[r])
        q[lay.z(i)] += cost.q
        q[lay.v(i)] += cost.r
    for r in range(n):
        if np.any(Ph[r]):
            e = rows.new()
            rows.add(e, lay.z(N), Ph[r])
    q[lay.z(N)] += ing.p_f

    def trace_rows(k, t, M, which):
        # entries of M @ Phi_{k,t} @ S: (a, c) -> sum_b M[a, b] sum_d Phi[b, d] S[d, c]
        for a in range(M.shape[0]):
            if not np.any(M[a]):
                continue
            for c in range(n):
                e = rows.new()
                if which == "x":
                    idx = lay.phi_x(k, t)
                    coef = np.outer(M[a], S[:, c])
                    if idx is None:
                        rows.add_const(e, float(M[a] @ S[:, c]))
                    else:
                        rows.add(e, idx, coef)
                else:
                    rows.add(e, lay.phi_u(k, t), np.outer(M[a], S[:, c]))

    for k in range(1, N):
        for t in range(1, k + 1):
            trace_rows(k, t, Qh, "x")
            trace_rows(k, t, Rh, "u")
    for t in range(1, N + 1):
        trace_rows(N, t, Ph, "x")
    W, w0 = rows.build()
    return W, w0, q


@dataclass
class Skeleton:
    """Parts shared by every program of one scenario (layout, equalities, objective)."""

    layout: Layout
    names: list
    dynamics: tuple     # (F, g) with a zero initial state
    slp: Optional[tuple]
    objective: tuple    # (W, w0, q)

    def dynamics_for(self, x0) -> tuple:
        F, g = self.dynamics
        g = g.copy()
        g[:self.layout.n] = -np.asarray(x0, dtype=float)
        return F, g


def skeleton(cfg: ScenarioConfig, ing: TerminalIngredients) -> Skeleton:
    sys_ = cfg.system
    lay = Layout(sys_.n, sys_.m, cfg.horizon)
    slp = _slp(lay, sys_.A, sys_.B) if lay.N > 1 else None
    return Skeleton(lay, lay.names(), _dynamics(lay, sys_.A, sys_.B, np.zeros(sys_.n)), slp,
                    _objective(lay, cfg, ing))


# ---------------------------------------------------------------------------
# programs


def _start(sk: Skeleton, x0):
    prog = conic.ConicProgram(sk.layout.size, sk.names)
    prog.add_equality(*sk.dynamics_for(x0), name="dynamics")
    if sk.slp is not None:
        prog.add_equality(*sk.slp, name="slp")
    return prog


def build_initial_socp(cfg: ScenarioConfig, ing: TerminalIngredients, tset: Optional[TerminalSet],
                       x0=None, sk: Optional[Skeleton] = None) -> tuple:
    """The k = 0 program; returns ``(program, layout)``."""
    sys_, cons = cfg.system, cfg.constraints
    sk = skeleton(cfg, ing) if sk is None else sk
    lay = sk.layout
    x0 = cfg.x0 if x0 is None else np.asarray(x0, dtype=float)
    prog = _start(sk, x0)
    S = psd_sqrt(sys_.sigma_w)
    sq = np.sqrt(cons.p_tilde)
    for i in range(lay.N):
        for j in range(cons.c):
            F, g, kind = soc_row_horizon(lay, i, j, cons, S, float(sq[j]))
            prog.add(kind, F, g, name=f"chance[{i},{j}]")
    if tset is not None:
        for row in tset.rows:
            F, g = tail_soc(lay, row, row.scale)
            prog.add_soc(F, g, name=f"terminal[{row.i},{row.j}]")
    W, w0, q = sk.objective
    prog.set_objective(W=W, q=q, w0=w0)
    return prog.seal(), lay


@dataclass
class ReconditioningContext:
    hat_z: np.ndarray           # (N + 1, n)
    hat_v: np.ndarray           # (N, m)
    hat_phi_x: list             # row blocks 1..N (Phi-hat^x_i, shape n x i n)
    hat_phi_u: list             # row blocks 1..N-1 (m x i n)
    alpha: np.ndarray = None    # (N, c); NaN where degenerate
    cases: list = None          # N x c labels
    tail_alpha: Optional[np.ndarray] = None  # (mu_hat + 1, c)
    tail_cases: Optional[list] = None

    def candidate(self, lay: Layout) -> np.ndarray:
        return lay.pack(self.hat_z, self.hat_v, self.hat_phi_x, self.hat_phi_u)

    def case_histogram(self) -> dict:
        cnt = Counter(c for row in (self.cases or []) for c in row)
        return {c: cnt.get(c, 0) for c in CASES}


def recondition_shift(prev: Policy, w_prev, ing: TerminalIngredients) -> ReconditioningContext:
    """Shift the previous optimum by one step and condition it on ``w_prev``."""
    if prev is None:
        raise ValueError("reconditioning needs a previous optimum")
    N, n = prev.N, prev.n
    w = np.asarray(w_prev, dtype=float).reshape(n)
    K = ing.K
    resp = prev.response
    z, v = prev.nominal.z, prev.nominal.v
    # K-extension of the previous plan at step N
    v_ext = np.vstack([v, (K @ z[N])[None, :]])
    rows_u = list(resp.phi_u[:N - 1]) + [K @ resp.phi_x[N - 1]]
    hat_z = np.zeros((N + 1, n))
    hat_v = np.zeros((N, prev.m))
    for i in range(N):
        hat_z[i] = z[i + 1] + resp.block_x(i + 1, 1) @ w
        hat_v[i] = v_ext[i + 1] + rows_u[i][:, :n] @ w
    hat_x = [resp.phi_x[i][:, n:] for i in range(1, N)]        # Phi-hat^x_i for i = 1..N-1
    hat_u = [rows_u[i][:, n:] for i in range(1, N)]             # Phi-hat^u_i for i = 1..N-1
    A_K = ing.A_K
    hat_z[N] = A_K @ z[N] + A_K @ resp.block_x(N, 1) @ w
    last = hat_x[-1] if hat_x else np.zeros((n, 0))
    hat_x.append(np.hstack([A_K @ last, np.eye(n)]))
    return ReconditioningContext(hat_z, hat_v, hat_x, hat_u[:N - 1])


def _hat_image(ctx: ReconditioningContext, i: int, g, h) -> np.ndarray:
    """``g' Phi-hat^x_i + h' Phi-hat^u_i`` as a flat ``i n`` vector."""
    if i == 0:
        return np.zeros(0)
    out = g @ ctx.hat_phi_x[i - 1]
    if h is not None and i - 1 < len(ctx.hat_phi_u):
        out = out + h @ ctx.hat_phi_u[i - 1]
    return out


def compute_alpha(ctx: ReconditioningContext, cons, sigma_w_sqrt: np.ndarray, i: int, j: int):
    """``(alpha, degenerate, prev_satisfied)`` for horizon step ``i`` and constraint ``j``."""
    g, h, b = cons.G[j], cons.H[j], float(cons.b[j])
    mean = float(g @ ctx.hat_z[i] + (h @ ctx.hat_v[i] if i < len(ctx.hat_v) else 0.0))
    img = _hat_image(ctx, i, g, h)
    n = sigma_w_sqrt.shape[0]
    data_scale = 1.0 + sum(np.abs(M).max(initial=0.0) for M in ctx.hat_phi_x[:i]) if i else 1.0
    if i == 0 or np.linalg.norm(img) <= DEGENERACY_TOL * data_scale:
        return math.nan, True, mean <= b
    std = np.linalg.norm((img.reshape(i, n) @ sigma_w_sqrt).ravel())
    if std <= DEGENERACY_TOL * data_scale:
        return math.nan, True, mean <= b
    return (b - mean) / std, False, mean <= b


def classify_constraint(alpha: float, degenerate: bool, prev_satisfied: bool) -> str:
    if degenerate:
        return "C1" if prev_satisfied else "C2"
    return "C3" if alpha >= 0.0 else "C4"


def tail_rows_for(ing: TerminalIngredients, mu_hat: int) -> list:
    """Exact tail rows ``[i][j]`` for ``i = 0..mu_hat``."""
    return [[tail_row(ing, j, i, "exact") for j in range(ing.constraints.c)] for i in range(mu_hat + 1)]


def tail_alpha(ctx: ReconditioningContext, row):
    """Scale for a tail row evaluated on the hat terminal pair; ``(alpha, degenerate, satisfied)``."""
    phi_N = ctx.hat_phi_x[-1]
    s = row.psi_image(phi_N)
    if row.aug is not None:
        s = np.concatenate([s, row.aug])
    nrm = float(np.linalg.norm(s))
    mean = float(row.lin @ ctx.hat_z[-1])
    if nrm <= DEGENERACY_TOL * (1.0 + np.abs(phi_N).max()):
        return math.nan, True, mean <= row.rhs
    return (row.rhs - mean) / nrm, False, mean <= row.rhs


def build_rhc_socp(x_k, ctx: ReconditioningContext, cfg: ScenarioConfig, ing: TerminalIngredients,
                   variant: str = "rc", mu_hat: Optional[int] = None, tail_rows=None,
                   sk: Optional[Skeleton] = None):
    """The k > 0 program with case-dependent rows; fills ``ctx.alpha``/``ctx.cases``."""
    if variant not in ("rc", "rc-mod"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "rc-mod" and mu_hat is None:
        raise ValueError("the rc-mod variant needs mu_hat")
    sys_, cons = cfg.system, cfg.constraints
    sk = skeleton(cfg, ing) if sk is None else sk
    lay = sk.layout
    N = lay.N
    prog = _start(sk, x_k)
    S = psd_sqrt(sys_.sigma_w)
    alpha = np.full((N, cons.c), math.nan)
    cases = []
    for i in range(N):
        row_cases = []
        for j in range(cons.c):
            a, deg, sat = compute_alpha(ctx, cons, S, i, j)
            case = classify_constraint(a, deg, sat)
            alpha[i, j] = a
            row_cases.append(case)
            g, h = cons.G[j], cons.H[j]
            tag = f"{case}[{i},{j}]"
            if case == "C1":
                prog.add_nonneg(*_nominal_row(lay, i, g, h, float(cons.b[j])), name=tag)
                if i > 0:
                    F, c = _zero_variance_rows(*_image_equalities(lay, i, g, h, np.zeros(i * lay.n)),
                                               np.kron(np.eye(i), S))
                    if F.shape[0]:
                        prog.add_equality(F, c, name=tag)
            elif case == "C3":
                F, gg, kind = soc_row_horizon(lay, i, j, cons, S, float(a))
                prog.add(kind, F, gg, name=tag)
            elif case == "C4":
                hat_mean = float(g @ ctx.hat_z[i] + h @ ctx.hat_v[i])
                prog.add_nonneg(*_nominal_row(lay, i, g, h, hat_mean), name=tag)
                prog.add_equality(*_image_equalities(lay, i, g, h, _hat_image(ctx, i, g, h)), name=tag)
        cases.append(row_cases)
    ctx.alpha, ctx.cases = alpha, cases
    if variant == "rc":
        # pin the terminal pair to the hat candidate
        rows = _Rows(lay.size)
        for r, idx in enumerate(lay.z(N)):
            e = rows.new(-ctx.hat_z[N][r])
            rows.add(e, idx, 1.0)
        prog.add_equality(*rows.build(), name="terminal_pin_z")
        target = ctx.hat_phi_x[N - 1]
        rows = _Rows(lay.size)
        for t in range(1, N):
            idx = lay.phi_x(N, t)
            blk = target[:, (t - 1) * lay.n:t * lay.n]
            for (r, c), vi in np.ndenumerate(idx):
                e = rows.new(-blk[r, c])
                rows.add(e, vi, 1.0)
        if rows.g:
            prog.add_equality(*rows.build(), name="terminal_pin_phi")
    else:
        if tail_rows is None or len(tail_rows) < mu_hat + 1:
            tail_rows = tail_rows_for(ing, mu_hat)
        t_alpha = np.full((mu_hat + 1, cons.c), math.nan)
        t_cases = []
        for i in range(mu_hat + 1):
            crow = []
            for j in range(cons.c):
                row = tail_rows[i][j]
                a, deg, sat = tail_alpha(ctx, row)
                t_alpha[i, j] = a
                case = classify_constraint(a, deg, sat)
                crow.append(case)
                tag = f"tail-{case}[{i},{j}]"
                if case == "C3":
                    prog.add_soc(*tail_soc(lay, row, float(a)), name=tag)
                elif case == "C1":
                    prog.add_nonneg(*_nominal_row(lay, N, row.lin, None, row.rhs), name=tag)
                    F, c = _zero_variance_rows(*_image_equalities(lay, N, row.lin, None, np.zeros(N * lay.n)),
                                               row.noise_sqrt)
                    if F.shape[0]:
                        prog.add_equality(F, c, name=tag)
                elif case == "C4":
                    rhs = float(row.lin @ ctx.hat_z[N])
                    prog.add_nonneg(*_nominal_row(lay, N, row.lin, None, rhs), name=tag)
                    target = row.lin @ ctx.hat_phi_x[N - 1]
                    prog.add_equality(*_image_equalities(lay, N, row.lin, None, target), name=tag)
            t_cases.append(crow)
        ctx.tail_alpha, ctx.tail_cases = t_alpha, t_cases
    W, w0, q = sk.objective
    prog.set_objective(W=W, q=q, w0=w0)
    return prog.seal(), lay


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ControllerState:
    cfg: ScenarioConfig
    ing: TerminalIngredients
    tset: Optional[TerminalSet]
    variant: str = "rc"
    mu_hat: Optional[int] = None
    k: int = 0
    prev: Optional[Policy] = None
    prev_objective: float = math.nan
    last_x: Optional[np.ndarray] = None
    last_u: Optional[np.ndarray] = None
    last_w: Optional[np.ndarray] = None
    initial_solution: Optional[tuple] = None   # shared (policy, objective, report) for x0
    check_candidate: bool = True
    diagnostics: list = field(default_factory=list)
    tail_rows: Optional[list] = None
    skeleton: Optional[Skeleton] = None

    @property
    def mode(self) -> str:
        return "initial" if self.k == 0 else "receding"


def solve_initial(cfg: ScenarioConfig, ing: TerminalIngredients, tset: Optional[TerminalSet], x0=None):
    """Solve the k = 0 program; returns ``(policy, objective, report)``."""
    prog, lay = build_initial_socp(cfg, ing, tset, x0)
    rep = conic.solve(prog, tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
    if rep.status == "infeasible":
        raise InitialInfeasibleError("the initial program is infeasible for this initial state")
    if rep.status != "optimal":
        raise ControllerFault(f"initial program failed ({rep.solver_status})", 0, rep, None, prog)
    pol = lay.unpack(rep.x, ing.K, cfg.system)
    pol = Policy(pol.nominal, pol.response, pol.K, rep.objective)
    return pol, rep.objective, rep


def controller_step(state: ControllerState, x_k):
    """Input for the measured state; advances the controller by one step."""
    x_k = np.asarray(x_k, dtype=float).reshape(-1)
    cfg = state.cfg
    tol = cfg.solver.tol
    diag = {"k": state.k}
    t0 = time.perf_counter()
    if state.k == 0:
        if state.initial_solution is not None and np.array_equal(x_k, cfg.x0):
            pol, obj, rep = state.initial_solution
        else:
            pol, obj, rep = solve_initial(cfg, state.ing, state.tset, x_k)
        diag.update({"cases": {c: 0 for c in CASES}, "alpha_min": None, "alpha_max": None})
    else:
        w = x_k - cfg.system.A @ state.last_x - cfg.system.B @ state.last_u
        state.last_w = w
        ctx = recondition_shift(state.prev, w, state.ing)
        if state.variant == "rc-mod" and state.tail_rows is None:
            state.tail_rows = tail_rows_for(state.ing, state.mu_hat)
        if state.skeleton is None:
            state.skeleton = skeleton(cfg, state.ing)
        prog, lay = build_rhc_socp(x_k, ctx, cfg, state.ing, state.variant, state.mu_hat, state.tail_rows,
                                   state.skeleton)
        cand = ctx.candidate(lay)
        if state.check_candidate:
            ok = conic.check_feasible(prog, cand, CANDIDATE_TOL)
            diag["candidate_feasible"] = bool(ok)
            diag["candidate_violation"] = conic.worst_violation(prog, cand)[0]
        rep, attempt = None, 0
        for attempt, (scale, reduce, options) in enumerate(SOLVE_LADDER):
            rep = conic.solve(prog, tol=scale * tol, max_iter=cfg.solver.max_iter, reduce_equalities=reduce,
                              options=options)
            if rep.status == "optimal":
                break
        diag["attempts"] = attempt + 1
        if rep.status != "optimal":
            raise ControllerFault(f"receding-horizon program failed at k={state.k} ({rep.status}, "
                                  f"{rep.solver_status}) although the shifted candidate is available",
                                  state.k, rep, cand, prog)
        pol = lay.unpack(rep.x, state.ing.K, cfg.system)
        obj = rep.objective
        pol = Policy(pol.nominal, pol.response, pol.K, obj)
        finite = ctx.alpha[np.isfinite(ctx.alpha)]
        diag.update({"cases": ctx.case_histogram(),
                     "alpha_min": float(finite.min()) if finite.size else None,
                     "alpha_max": float(finite.max()) if finite.size else None,
                     "alpha": ctx.alpha.tolist()})
        if ctx.tail_cases is not None:
            diag["tail_cases"] = dict(Counter(c for r in ctx.tail_cases for c in r))
    u = pol.nominal.v[0].copy()
    diag.update({"objective": obj, "status": rep.status, "solve_time": rep.solve_time,
                 "wall_time": time.perf_counter() - t0})
    state.prev, state.prev_objective = pol, obj
    state.last_x, state.last_u = x_k, u
    state.k += 1
    state.diagnostics.append(diag)
    return u, diag


def dual_mode_policy(cfg: ScenarioConfig, ing: TerminalIngredients, tset: Optional[TerminalSet]) -> Policy:
    """The k = 0 plan, applied open loop with its disturbance feedback."""
    pol, _, _ = solve_initial(cfg, ing, tset)
    return pol


def diagnostics_jsonl(diags, path) -> None:
    keep = ("k", "objective", "cases", "alpha_min", "alpha_max", "solve_time", "status")
    with open(path, "w", encoding="utf-8") as fh:
        for d in diags:
            fh.write(json.dumps({k: d.get(k) for k in keep}) + "\n")


# ---------------------------------------------------------------------------
# estimator


class SMPCController(BaseEstimator):
    """Receding-horizon controller with an estimator-style interface.

    ``fit(scenario)`` runs (or loads) the offline design; ``predict(X)``
    evaluates the k = 0 control law ``u_0 = v*_0`` for each initial state row.
    For closed-loop use, :meth:`reset` and :meth:`step`.
    """

    def __init__(self, method="rc", mu_hat=None, use_cache=True, workers=1):
        self.method = method
        self.mu_hat = mu_hat
        self.use_cache = use_cache
        self.workers = workers

    def fit(self, scenario: ScenarioConfig, y=None):
        from .terminal import TerminalDesigner
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        designer = TerminalDesigner(use_cache=self.use_cache, workers=self.workers).fit(scenario)
        scenario = designer.scenario_
        self.scenario_ = scenario
        self.ingredients_ = designer.ingredients_
        self.terminal_set_ = designer.terminal_set_
        mu_hat = self.mu_hat if self.mu_hat is not None else scenario.terminal.mu_hat
        self.mu_hat_ = self.terminal_set_.mu if mu_hat is None else int(mu_hat)
        self.initial_ = solve_initial(scenario, self.ingredients_, self.terminal_set_)
        self.policy_ = self.initial_[0]
        return self

    def predict(self, X):
        check_is_fitted(self, "initial_")
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.scenario_.n:
            raise ValueError(f"expected {self.scenario_.n} state columns, got {X.shape[1]}")
        out = []
        for x in X:
            pol, _, _ = solve_initial(self.scenario_, self.ingredients_, self.terminal_set_, x)
            out.append(pol.nominal.v[0])
        return np.array(out)

    def new_state(self) -> ControllerState:
        check_is_fitted(self, "initial_")
        variant = "rc" if self.method == "policy17" else self.method
        return ControllerState(self.scenario_, self.ingredients_, self.terminal_set_, variant, self.mu_hat_,
                               initial_solution=self.initial_)

    def reset(self):
        self.state_ = self.new_state()
        return self

    def step(self, x):
        if self.method == "policy17":
            raise ValueError("the dual-mode policy has no per-step program; use evaluate_policy")
        u, _ = controller_step(self.state_, x)
        return u
