"""System-level parameterization of disturbance-feedback policies.

Row block ``phi_x[k - 1]`` holds ``[Phi^x_{k,1} ... Phi^x_{k,k}]`` (shape ``n x kn``),
so the predicted state error is ``e_k = sum_i Phi^x_{k,i} w_{i-1}``. The same
layout is used for ``phi_u`` with ``m x kn`` blocks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import psd_sqrt
from .model import LinearGaussianSystem, StageCost, stage_cost_eval

SLP_TOL = 1e-9


@dataclass(frozen=True)
class SystemResponse:
    """Response row blocks for steps ``1..N`` (state) and ``1..N-1`` (input).

    ``phi_u`` may carry an extra row for step N (the terminal-gain extension
    ``K phi_x[N-1]``); it is ignored by the recursion check.
    """

    phi_x: tuple
    phi_u: tuple

    def __post_init__(self):
        phi_x = tuple(np.array(P, dtype=float) for P in self.phi_x)
        phi_u = tuple(np.array(P, dtype=float) for P in self.phi_u)
        if not phi_x:
            raise ValueError("response needs at least one state row block")
        n = phi_x[0].shape[0]
        for k, P in enumerate(phi_x, start=1):
            if P.shape != (n, k * n):
                raise ValueError(f"phi_x row {k} must have shape {(n, k * n)}, got {P.shape}")
        N = len(phi_x)
        if len(phi_u) not in (N - 1, N):
            raise ValueError(f"phi_u must have {N - 1} (or {N}) row blocks, got {len(phi_u)}")
        m = phi_u[0].shape[0] if phi_u else None
        for k, P in enumerate(phi_u, start=1):
            if P.shape != (m, k * n):
                raise ValueError(f"phi_u row {k} must have shape {(m, k * n)}, got {P.shape}")
        for P in phi_x + phi_u:
            P.setflags(write=False)
        object.__setattr__(self, "phi_x", phi_x)
        object.__setattr__(self, "phi_u", phi_u)

    @property
    def N(self) -> int:
        return len(self.phi_x)

    @property
    def n(self) -> int:
        return self.phi_x[0].shape[0]

    def block_x(self, k: int, i: int) -> np.ndarray:
        n = self.n
        return self.phi_x[k - 1][:, (i - 1) * n:i * n]

    def block_u(self, k: int, i: int) -> np.ndarray:
        n = self.n
        return self.phi_u[k - 1][:, (i - 1) * n:i * n]

    def row_x(self, k: int) -> np.ndarray:
        """``Phi^x_k`` with the convention that row 0 is empty."""
        if k == 0:
            return np.zeros((self.n, 0))
        return self.phi_x[k - 1]

    def row_u(self, k: int, m: Optional[int] = None) -> np.ndarray:
        if k == 0:
            return np.zeros((m if m is not None else self.phi_u[0].shape[0], 0))
        return self.phi_u[k - 1]


@dataclass(frozen=True)
class NominalTrajectory:
    z: np.ndarray  # (N + 1, n)
    v: np.ndarray  # (N, m)

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        v = np.array(self.v, dtype=float)
        if z.ndim != 2 or v.ndim != 2 or z.shape[0] != v.shape[0] + 1:
            raise ValueError(f"nominal shapes inconsistent: z {z.shape}, v {v.shape}")
        z.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "v", v)

    def is_consistent(self, sys: LinearGaussianSystem, tol: float = 1e-9) -> bool:
        pred = self.z[:-1] @ sys.A.T + self.v @ sys.B.T
        return bool(np.abs(pred - self.z[1:]).max(initial=0.0) <= tol * (1.0 + np.abs(self.z).max()))


@dataclass(frozen=True)
class Policy:
    """Affine disturbance feedback for N steps, then ``u = K x``."""

    nominal: NominalTrajectory
    response: SystemResponse
    K: np.ndarray = field(repr=False)
    objective: Optional[float] = None

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        K.setflags(write=False)
        object.__setattr__(self, "K", K)
        if self.nominal.z.shape[0] != self.response.N + 1:
            raise ValueError("nominal trajectory and response horizons differ")
        if K.shape != (self.nominal.v.shape[1], self.nominal.z.shape[1]):
            raise ValueError(f"K has shape {K.shape}, expected {(self.m, self.n)}")

    @property
    def N(self) -> int:
        return self.response.N

    @property
    def n(self) -> int:
        return self.nominal.z.shape[1]

    @property
    def m(self) -> int:
        return self.nominal.v.shape[1]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "z": self.nominal.z.tolist(),
            "v": self.nominal.v.tolist(),
            "phi_x": [P.tolist() for P in self.response.phi_x],
            "phi_u": [P.tolist() for P in self.response.phi_u],
            "K": self.K.tolist(),
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        m = len(data["v"][0])
        n = len(data["z"][0])
        phi_u = [np.array(P, dtype=float).reshape(m, -1) for P in data["phi_u"]]
        return cls(NominalTrajectory(data["z"], data["v"]),
                   SystemResponse([np.array(P, dtype=float).reshape(n, -1) for P in data["phi_x"]],
                                  phi_u),
                   data["K"], data.get("objective"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        return cls.from_dict(json.loads(text))


def validate_slp(resp: SystemResponse, sys: LinearGaussianSystem, tol: float = SLP_TOL) -> bool:
    """Check ``Phi^x_1 = I`` and ``Phi^x_{k+1} = [A Phi^x_k + B Phi^u_k, I]``."""
    n, m = sys.n, sys.m
    if resp.n != n:
        raise ValueError(f"response state dimension {resp.n} != system dimension {n}")
    if resp.phi_u and resp.phi_u[0].shape[0] != m:
        raise ValueError("response input dimension does not match the system")
    eye = np.eye(n)
    if np.abs(resp.phi_x[0] - eye).max() > tol:
        return False
    for k in range(1, resp.N):
        expected = np.hstack([sys.A @ resp.phi_x[k - 1] + sys.B @ resp.phi_u[k - 1], eye])
        if np.abs(resp.phi_x[k] - expected).max() > tol * (1.0 + np.abs(expected).max()):
            return False
    return True


def response_from_feedback(sys: LinearGaussianSystem, phi_u: Sequence[np.ndarray]) -> SystemResponse:
    """Complete the state rows implied by given input rows (length N - 1)."""
    n = sys.n
    rows = [np.eye(n)]
    for k in range(1, len(phi_u) + 1):
        rows.append(np.hstack([sys.A @ rows[-1] + sys.B @ phi_u[k - 1], np.eye(n)]))
    return SystemResponse(rows, list(phi_u))


def stacked_noise_sqrt(sigma_w: np.ndarray, i: int) -> np.ndarray:
    """``(I_i kron sigma_w)^{1/2}``."""
    return np.kron(np.eye(i), psd_sqrt(sigma_w))


def joint_moments(policy: Policy, sys: LinearGaussianSystem, i: int):
    """Mean and covariance factor of ``(x_i, u_i)`` under the policy.

    Returns ``(mean, F)`` with ``Var = F @ F.T``; ``F`` has ``i * n`` columns.
    """
    N = policy.N
    if not 0 <= i <= N - 1:
        raise IndexError(f"step index {i} outside 0..{N - 1}")
    mean = np.concatenate([policy.nominal.z[i], policy.nominal.v[i]])
    n, m = policy.n, policy.m
    if i == 0:
        return mean, np.zeros((n + m, 0))
    stacked = np.vstack([policy.response.row_x(i), policy.response.row_u(i)])
    return mean, stacked @ stacked_noise_sqrt(sys.sigma_w, i)


def evaluate_policy(policy: Policy, disturbances, k: int, x=None) -> np.ndarray:
    """Input applied at time ``k`` given ``w_0 .. w_{k-1}`` (and ``x_k`` for ``k >= N``)."""
    if k < 0:
        raise ValueError("time index must be non-negative")
    if k >= policy.N:
        if x is None:
            raise ValueError(f"state x_{k} is required beyond the horizon")
        return policy.K @ np.asarray(x, dtype=float).reshape(-1)
    w = np.asarray(disturbances, dtype=float).reshape(-1, policy.n) if k else np.zeros((0, policy.n))
    if w.shape[0] < k:
        raise ValueError(f"need {k} past disturbances, got {w.shape[0]}")
    u = policy.nominal.v[k].copy()
    if k:
        u += policy.response.row_u(k) @ w[:k].reshape(-1)
    return u


def expected_cost(policy: Policy, cost: StageCost, terminal, sigma_w: np.ndarray) -> float:
    """Objective value of the policy: nominal cost plus covariance trace terms.

    ``terminal`` supplies ``P`` and ``p_f`` (a ``TerminalIngredients`` or any
    object with those attributes).
    """
    N = policy.N
    z, v = policy.nominal.z, policy.nominal.v
    if z.shape[1] != cost.Q.shape[0] or v.shape[1] != cost.R.shape[0]:
        raise ValueError("policy and cost dimensions differ")
    J = sum(stage_cost_eval(cost, z[i], v[i]) for i in range(N))
    for i in range(1, N):
        S = np.kron(np.eye(i), sigma_w)
        Px, Pu = policy.response.row_x(i), policy.response.row_u(i)
        J += float(np.trace(cost.Q @ Px @ S @ Px.T) + np.trace(cost.R @ Pu @ S @ Pu.T))
    P, p_f = np.asarray(terminal.P), np.asarray(terminal.p_f)
    zN = z[N]
    PxN = policy.response.row_x(N)
    J += float(zN @ P @ zN + p_f @ zN)
    J += float(np.trace(P @ PxN @ np.kron(np.eye(N), sigma_w) @ PxN.T))
    return J
