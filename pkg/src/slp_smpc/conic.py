"""Conic program container and the Clarabel adapter.

A program is a list of affine cone memberships ``F x + g in K`` over a single
decision vector ``x``, with the objective ``||W x + w0||^2 + q.x + const``. Cones:

* ``zero``    ``F x + g = 0``
* ``nonneg``  ``F x + g >= 0``
* ``soc``     ``(F x + g)[0] >= ||(F x + g)[1:]||``
* ``psd``     ``F x + g`` is the scaled upper-triangle vector of a PSD matrix

The scaled triangle ordering (column-major upper triangle, off-diagonal
entries times sqrt(2)) is the one Clarabel expects, so blocks pass through
unchanged.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

import clarabel

KINDS = ("zero", "nonneg", "soc", "psd")
DEFAULT_TOL = 1e-8
DEFAULT_CHECK_TOL = 1e-6
_SQRT2 = math.sqrt(2.0)


class SealedProgramError(RuntimeError):
    pass


def svec_size(d: int) -> int:
    return d * (d + 1) // 2


def svec_indices(d: int):
    """Row/column indices of the scaled triangle, in Clarabel order."""
    rows, cols = [], []
    for j in range(d):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def svec(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    r, c = svec_indices(M.shape[0])
    scale = np.where(r == c, 1.0, _SQRT2)
    return M[r, c] * scale


def smat(v: np.ndarray, d: int) -> np.ndarray:
    r, c = svec_indices(d)
    scale = np.where(r == c, 1.0, 1.0 / _SQRT2)
    M = np.zeros((d, d))
    M[r, c] = np.asarray(v) * scale
    M[c, r] = M[r, c]
    return M


@dataclass(frozen=True)
class ConeBlock:
    kind: str
    F: sp.csr_matrix
    g: np.ndarray
    name: str = ""
    psd_dim: int = 0

    @property
    def size(self) -> int:
        return self.F.shape[0]

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.F @ x + self.g

    def violation(self, x: np.ndarray) -> float:
        """Distance-like measure; 0 means member of the cone."""
        s = self.value(x)
        if self.kind == "zero":
            return float(np.abs(s).max(initial=0.0))
        if self.kind == "nonneg":
            return float(max(0.0, -s.min(initial=0.0)))
        if self.kind == "soc":
            return float(max(0.0, np.linalg.norm(s[1:]) - s[0]))
        lam = np.linalg.eigvalsh(smat(s, self.psd_dim))
        return float(max(0.0, -lam[0]))


class ConicProgram:
    """Builder for a conic program; call :meth:`seal` before solving."""

    def __init__(self, n_vars: int, names: Optional[list] = None):
        if n_vars < 0:
            raise ValueError("variable count must be non-negative")
        self.n_vars = int(n_vars)
        self.names = list(names) if names is not None else [f"x{i}" for i in range(n_vars)]
        if len(self.names) != self.n_vars:
            raise ValueError("name table length differs from the variable count")
        self.blocks: list[ConeBlock] = []
        self.W = sp.csr_matrix((0, self.n_vars))
        self.w0 = np.zeros(0)
        self.q = np.zeros(self.n_vars)
        self.const = 0.0
        self._sealed = False

    # -- building -------------------------------------------------------
    def _check_open(self):
        if self._sealed:
            raise SealedProgramError("program is sealed")

    def _affine(self, F, g, rows_hint=None):
        F = sp.csr_matrix(F, dtype=float) if not sp.issparse(F) else F.tocsr().astype(float)
        F.eliminate_zeros()
        if F.ndim != 2 or F.shape[1] != self.n_vars:
            raise ValueError(f"affine map has {F.shape[1]} columns, program has {self.n_vars} variables")
        g = np.zeros(F.shape[0]) if g is None else np.asarray(g, dtype=float).reshape(-1)
        if g.shape[0] != F.shape[0]:
            raise ValueError(f"offset length {g.shape[0]} != row count {F.shape[0]}")
        return F, g

    def add(self, kind: str, F, g=None, name: str = "") -> int:
        self._check_open()
        if kind not in KINDS or kind == "psd":
            raise ValueError(f"use add_psd for PSD blocks; unknown kind {kind!r}" if kind != "psd"
                             else "use add_psd for PSD blocks")
        F, g = self._affine(F, g)
        if kind == "soc" and F.shape[0] < 1:
            raise ValueError("an SOC block needs at least the t row")
        if F.shape[0] == 0:
            return -1
        self.blocks.append(ConeBlock(kind, F, g, name))
        return len(self.blocks) - 1

    def add_equality(self, F, g=None, name=""):
        return self.add("zero", F, g, name)

    def add_nonneg(self, F, g=None, name=""):
        return self.add("nonneg", F, g, name)

    def add_soc(self, F, g=None, name=""):
        return self.add("soc", F, g, name)

    def add_psd(self, M0, terms, name: str = "") -> int:
        """Require ``M0 + sum_k x[idx_k] * M_k`` PSD; ``terms`` is a list of ``(idx, M_k)``."""
        self._check_open()
        M0 = np.asarray(M0, dtype=float)
        d = M0.shape[0]
        if M0.shape != (d, d):
            raise ValueError("PSD offset must be square")
        cols, data = [], []
        for idx, Mk in terms:
            Mk = np.asarray(Mk, dtype=float)
            if Mk.shape != (d, d):
                raise ValueError(f"PSD coefficient for variable {idx} has shape {Mk.shape}")
            if not 0 <= idx < self.n_vars:
                raise ValueError(f"variable index {idx} out of range")
            cols.append(idx)
            data.append(svec(0.5 * (Mk + Mk.T)))
        ns = svec_size(d)
        if cols:
            dense = np.column_stack(data)
            F = sp.csr_matrix((dense.ravel(), (np.repeat(np.arange(ns), len(cols)),
                                               np.tile(cols, ns))), shape=(ns, self.n_vars))
            # explicit zeros would hide the sparsity pattern from chordal decomposition
            F.eliminate_zeros()
        else:
            F = sp.csr_matrix((ns, self.n_vars))
        self.blocks.append(ConeBlock("psd", F, svec(0.5 * (M0 + M0.T)), name, d))
        return len(self.blocks) - 1

    def set_objective(self, W=None, q=None, const: float = 0.0, w0=None):
        """Objective ``||W x + w0||^2 + q.x + const``."""
        self._check_open()
        if W is not None:
            W = sp.csr_matrix(W, dtype=float)
            if W.shape[1] != self.n_vars:
                raise ValueError("objective factor has the wrong column count")
            self.W = W
            self.w0 = np.zeros(W.shape[0]) if w0 is None else np.asarray(w0, dtype=float).reshape(-1)
            if self.w0.shape[0] != W.shape[0]:
                raise ValueError("objective offset length differs from the factor row count")
        if q is not None:
            q = np.asarray(q, dtype=float).reshape(-1)
            if q.shape[0] != self.n_vars:
                raise ValueError("linear objective has the wrong length")
            self.q = q
        self.const = float(const)

    def seal(self) -> "ConicProgram":
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    # -- evaluation -----------------------------------------------------
    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        r = self.W @ x + self.w0
        return float(r @ r + self.q @ x + self.const)

    def cone_counts(self) -> dict:
        out = {k: 0 for k in KINDS}
        for b in self.blocks:
            out[b.kind] += 1
        return out

    def epigraph_form(self) -> "ConicProgram":
        """Equivalent program with a linear objective (extra last variable ``t``)."""
        n = self.n_vars
        prog = ConicProgram(n + 1, self.names + ["__epigraph_t"])
        pad = lambda F: sp.hstack([F, sp.csr_matrix((F.shape[0], 1))]).tocsr()
        for b in self.blocks:
            prog.blocks.append(ConeBlock(b.kind, pad(b.F), b.g.copy(), b.name, b.psd_dim))
        q = np.append(self.q, 0.0)
        if self.W.shape[0]:
            # ||W x||^2 <= t  <=>  ||(2 W x, t - 1)|| <= t + 1
            e = sp.csr_matrix(([1.0], ([0], [n])), shape=(1, n + 1))
            rows = sp.vstack([e, pad(2.0 * self.W), e]).tocsr()
            g = np.concatenate([[1.0], 2.0 * self.w0, [-1.0]])
            prog.blocks.append(ConeBlock("soc", rows, g, "__epigraph"))
            q[n] = 1.0
        prog.set_objective(q=q, const=self.const)
        return prog.seal()


@dataclass
class SolveReport:
    status: str  # optimal | infeasible | numerical-failure
    x: Optional[np.ndarray]
    objective: float
    iterations: int
    residuals: dict = field(default_factory=dict)
    solve_time: float = 0.0
    solver_status: str = ""
    certificate: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def eliminate_equalities(prog: ConicProgram, rtol: float = 1e-9):
    """Substitute ``x = x_p + Z y`` where ``Z`` spans the null space of the equality rows.

    Returns ``(reduced program, x_p, Z)``, or ``None`` when the equality rows
    are inconsistent. Pinned terminal pairs make many equality rows
    redundant; the reduced program has no equalities and a strict interior
    in the remaining directions, which interior-point methods handle far
    better than a rank-deficient equality block.
    """
    eq = [b for b in prog.blocks if b.kind == "zero"]
    if not eq:
        return prog, np.zeros(prog.n_vars), None
    F = sp.vstack([b.F for b in eq]).toarray()
    g = np.concatenate([b.g for b in eq])
    xp, *_ = np.linalg.lstsq(F, -g, rcond=None)
    if np.abs(F @ xp + g).max(initial=0.0) > rtol * (1.0 + np.abs(g).max(initial=0.0)):
        return None
    Z = scipy.linalg.null_space(F)
    red = ConicProgram(Z.shape[1])
    for b in prog.blocks:
        if b.kind == "zero":
            continue
        red.blocks.append(ConeBlock(b.kind, _sparse(b.F @ Z), b.g + b.F @ xp, b.name, b.psd_dim))
    if prog.W.shape[0]:
        red.set_objective(W=_sparse(prog.W @ Z), q=Z.T @ prog.q, const=prog.const + float(prog.q @ xp),
                          w0=prog.w0 + prog.W @ xp)
    else:
        red.set_objective(q=Z.T @ prog.q, const=prog.const + float(prog.q @ xp))
    return red.seal(), xp, Z


def _sparse(M) -> sp.csr_matrix:
    M = sp.csr_matrix(M)
    M.data[np.abs(M.data) < 1e-14 * max(np.abs(M.data).max(initial=0.0), 1.0)] = 0.0
    M.eliminate_zeros()
    return M


def _clarabel_data(prog: ConicProgram):
    A_parts, b_parts, cones = [], [], []
    for b in prog.blocks:
        A_parts.append(-b.F)
        b_parts.append(b.g)
        if b.kind == "zero":
            cone = clarabel.ZeroConeT(b.size)
        elif b.kind == "nonneg":
            cone = clarabel.NonnegativeConeT(b.size)
        elif b.kind == "soc":
            cone = clarabel.SecondOrderConeT(b.size)
        else:
            cone = clarabel.PSDTriangleConeT(b.psd_dim)
        cones.append(cone)
    if A_parts:
        A = sp.vstack(A_parts).tocsc()
        bvec = np.concatenate(b_parts)
    else:
        A = sp.csc_matrix((0, prog.n_vars))
        bvec = np.zeros(0)
    if prog.W.shape[0]:
        # y = W x + w0 as extra variables with objective ||y||^2; forming
        # W'W directly is rank deficient and stalls the interior-point method
        r = prog.W.shape[0]
        A = sp.vstack([sp.hstack([-prog.W, sp.eye(r)]),
                       sp.hstack([A, sp.csc_matrix((A.shape[0], r))])]).tocsc()
        bvec = np.concatenate([prog.w0, bvec])
        cones = [clarabel.ZeroConeT(r)] + cones
        P = sp.block_diag([sp.csc_matrix((prog.n_vars, prog.n_vars)), 2.0 * sp.eye(r)]).tocsc()
        q = np.concatenate([prog.q, np.zeros(r)])
    else:
        P = sp.csc_matrix((prog.n_vars, prog.n_vars))
        q = prog.q
    return P, q, A, bvec, cones


def solve(prog: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200,
          native_quadratic: bool = True, check_tol: float = DEFAULT_CHECK_TOL,
          reduce_equalities: bool = False, options: Optional[dict] = None) -> SolveReport:
    """Solve with Clarabel and map the result onto :class:`SolveReport`.

    ``AlmostSolved`` is accepted only if the returned point passes
    :func:`check_feasible` at ``check_tol``; otherwise it is a numerical failure.
    With ``reduce_equalities`` the equality rows are eliminated first (see
    :func:`eliminate_equalities`) and the answer is mapped back. ``options``
    overrides Clarabel settings by name.
    """
    if not prog.sealed:
        prog = prog.seal()
    if reduce_equalities:
        t0 = time.perf_counter()
        reduced = eliminate_equalities(prog)
        if reduced is None:
            return SolveReport("infeasible", None, math.nan, 0, {"equalities": "inconsistent"},
                               time.perf_counter() - t0, "InconsistentEqualities")
        red, xp, Z = reduced
        if Z is not None:
            rep = solve(red, tol, max_iter, native_quadratic, check_tol, options=options)
            if rep.x is not None:
                x = xp + Z @ rep.x
                rep.x = x
                rep.residuals["primal"] = max((blk.violation(x) for blk in prog.blocks), default=0.0)
                if rep.status == "optimal":
                    rep.objective = prog.objective_value(x)
            rep.solve_time = time.perf_counter() - t0
            return rep
    work = prog if native_quadratic else prog.epigraph_form()
    P, q, A, b, cones = _clarabel_data(work)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = int(max_iter)
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_infeas_abs = tol
    settings.tol_infeas_rel = tol
    settings.max_threads = 1
    for key, value in (options or {}).items():
        if not hasattr(settings, key):
            raise ValueError(f"unknown solver option {key!r}")
        setattr(settings, key, value)
    t0 = time.perf_counter()
    try:
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        sol = solver.solve()
    except Exception as exc:  # the Rust core raises on malformed or degenerate data
        return SolveReport("numerical-failure", None, math.nan, 0,
                           {"error": str(exc)}, time.perf_counter() - t0, "Exception")
    elapsed = time.perf_counter() - t0
    raw = str(sol.status).split(".")[-1]
    x = np.array(sol.x, dtype=float)[:prog.n_vars] if sol.x is not None else None
    residuals = {"solver_primal": float(sol.r_prim), "solver_dual": float(sol.r_dual)}
    if x is not None and x.size == prog.n_vars and np.all(np.isfinite(x)):
        residuals["primal"] = max((blk.violation(x) for blk in prog.blocks), default=0.0)
    status, cert = "numerical-failure", False
    if raw == "Solved":
        status = "optimal"
    elif raw == "AlmostSolved":
        if x is not None and residuals.get("primal", math.inf) <= check_tol:
            status = "optimal"
    elif raw in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status, cert = "infeasible", raw == "PrimalInfeasible"
    obj = prog.objective_value(x) if status == "optimal" else math.nan
    return SolveReport(status, x if status == "optimal" else x, obj, int(sol.iterations),
                       residuals, elapsed, raw, cert)


def check_feasible(prog: ConicProgram, point, tol: float = DEFAULT_CHECK_TOL) -> bool:
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.shape[0] != prog.n_vars:
        raise ValueError(f"point has {x.shape[0]} entries, program has {prog.n_vars} variables")
    return all(b.violation(x) <= tol for b in prog.blocks)


def worst_violation(prog: ConicProgram, point) -> tuple:
    """``(violation, block name)`` of the most violated block."""
    x = np.asarray(point, dtype=float).reshape(-1)
    worst = (0.0, "")
    for b in prog.blocks:
        v = b.violation(x)
        if v > worst[0]:
            worst = (v, b.name)
    return worst


def write_cbf(prog: ConicProgram, path) -> None:
    """Dump the program in the Conic Benchmark Format (version 3).

    Quadratic objectives are written through the epigraph form, since the
    format only carries linear objectives.
    """
    work = prog.epigraph_form() if prog.W.shape[0] else prog
    lines = ["VER", "3", "", "OBJSENSE", "MIN", "", "VAR", f"{work.n_vars} 1", f"F {work.n_vars}", ""]
    scalar = [b for b in work.blocks if b.kind != "psd"]
    psd = [b for b in work.blocks if b.kind == "psd"]
    tag = {"zero": "L=", "nonneg": "L+", "soc": "Q"}
    if psd:
        lines += ["PSDCON", str(len(psd))] + [str(b.psd_dim) for b in psd] + [""]
    if scalar:
        total = sum(b.size for b in scalar)
        lines += ["CON", f"{total} {len(scalar)}"] + [f"{tag[b.kind]} {b.size}" for b in scalar] + [""]
    obj = [(j, v) for j, v in enumerate(work.q) if v != 0.0]
    if obj:
        lines += ["OBJACOORD", str(len(obj))] + [f"{j} {v!r}" for j, v in obj] + [""]
    if work.const:
        lines += ["OBJBCOORD", repr(work.const), ""]
    if scalar:
        F = sp.vstack([b.F for b in scalar]).tocoo()
        g = np.concatenate([b.g for b in scalar])
        ent = [(i, j, v) for i, j, v in zip(F.row, F.col, F.data) if v != 0.0]
        lines += ["ACOORD", str(len(ent))] + [f"{i} {j} {v!r}" for i, j, v in ent] + [""]
        gb = [(i, v) for i, v in enumerate(g) if v != 0.0]
        if gb:
            lines += ["BCOORD", str(len(gb))] + [f"{i} {v!r}" for i, v in gb] + [""]
    if psd:
        hent, dent = [], []
        for k, b in enumerate(psd):
            r, c = svec_indices(b.psd_dim)
            unscale = np.where(r == c, 1.0, 1.0 / _SQRT2)
            F = b.F.tocoo()
            for s, j, v in zip(F.row, F.col, F.data):
                if v != 0.0:
                    # lower-triangle (row >= col) convention
                    hent.append(f"{k} {j} {c[s]} {r[s]} {v * unscale[s]!r}")
            for s, v in enumerate(b.g):
                if v != 0.0:
                    dent.append(f"{k} {c[s]} {r[s]} {v * unscale[s]!r}")
        if hent:
            lines += ["HCOORD", str(len(hent))] + hent + [""]
        if dent:
            lines += ["DCOORD", str(len(dent))] + dent + [""]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
