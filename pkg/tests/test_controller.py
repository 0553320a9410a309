import math
import warnings

import numpy as np
import pytest
import scipy.optimize
from sklearn.exceptions import NotFittedError

from slp_smpc import conic
from slp_smpc.controller import (CASES, ControllerFault, ControllerState, InitialInfeasibleError, Layout,
                                 ReconditioningContext, SMPCController, build_initial_socp, build_rhc_socp,
                                 classify_constraint, compute_alpha, controller_step, recondition_shift,
                                 soc_row_horizon, solve_initial, tail_rows_for)
from slp_smpc.linalg import psd_sqrt
from slp_smpc.model import ConstraintSpec, LinearGaussianSystem
from slp_smpc.simulate import Design
from slp_smpc.slp import Policy, evaluate_policy, expected_cost, validate_slp

from conftest import toy_scenario

# k = 0 optimum of the bundled scenario with the default terminal set (mu = 56).
HVAC_J0 = -18.8356


def _scalar_cons(b=1.0, p=0.8413447460685429):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ConstraintSpec([[1.0]], [[0.0]], [b], [p])


# -- single rows ------------------------------------------------------------

def test_row_at_step_zero_is_half_space():
    lay = Layout(1, 1, 3)
    F, g, kind = soc_row_horizon(lay, 0, 0, _scalar_cons(), np.eye(1), 1.0)
    assert kind == "nonneg" and F.shape[0] == 1
    x = np.zeros(lay.size)
    x[lay.z(0)] = 0.7
    assert (F @ x + g)[0] == pytest.approx(0.3)


def test_negative_scale_rejected():
    with pytest.raises(ValueError, match="negative"):
        soc_row_horizon(Layout(1, 1, 3), 1, 0, _scalar_cons(), np.eye(1), -0.1)


def test_scalar_boundary_one_sigma():
    """p = Phi(1) gives sqrt(pt) = 1, so the row is z <= b - |phi| sigma_w."""
    cons = _scalar_cons(b=1.0)
    assert math.sqrt(cons.p_tilde[0]) == pytest.approx(1.0, abs=1e-12)
    sigma = 0.3
    lay = Layout(1, 1, 2)
    F, g, kind = soc_row_horizon(lay, 1, 0, cons, np.array([[sigma]]), math.sqrt(cons.p_tilde[0]))
    assert kind == "soc"
    for phi_u in (0.0, 0.5, -2.0):
        x = np.zeros(lay.size)
        x[lay.phi_u(1, 1)] = phi_u            # Phi^x_{1,1} = I is fixed, so the image is 1 * sigma
        x[lay.z(1)] = 1.0 - sigma             # exactly on the boundary
        s = F @ x + g
        assert s[0] == pytest.approx(np.linalg.norm(s[1:]), abs=1e-12)
        x[lay.z(1)] += 1e-6
        s = F @ x + g
        assert s[0] < np.linalg.norm(s[1:])


# -- initial program ----------------------------------------------------------

def test_hvac_initial_program(hvac_design):
    d = hvac_design
    pol, obj, rep = solve_initial(d.cfg, d.ing, d.tset)
    assert rep.status == "optimal"
    assert obj == pytest.approx(HVAC_J0, abs=1e-3)
    # the expected closed-loop cost of the dual-mode policy is within Monte Carlo reach of -18.85
    assert abs(obj - (-18.85)) <= 0.2
    assert validate_slp(pol.response, d.cfg.system)
    assert pol.nominal.is_consistent(d.cfg.system)
    assert obj == pytest.approx(expected_cost(pol, d.cfg.cost, d.ing, d.cfg.system.sigma_w), abs=1e-6)
    assert d.tset.contains(pol.nominal.z[-1], pol.response.phi_x[-1], tol=1e-6)


def test_initial_program_size(hvac_design):
    d = hvac_design
    prog, lay = build_initial_socp(d.cfg, d.ing, d.tset)
    n, m, N = 3, 1, 6
    # nominal variables plus the strictly causal response blocks
    expected = (N + 1) * n + N * m + n * n * N * (N - 1) // 2 + m * n * N * (N - 1) // 2
    assert prog.n_vars == lay.size == expected
    assert prog.n_vars <= N * N * n * (n + m)
    counts = prog.cone_counts()
    assert counts["soc"] >= len(d.tset.rows)


def _nominal_oracle(cfg, ing, tset):
    """Deterministic MPC with the terminal rows, solved by SLSQP over the inputs."""
    A, B = cfg.system.A, cfg.system.B
    N, cons, cost = cfg.horizon, cfg.constraints, cfg.cost

    def traj(v):
        v = v.reshape(N, cfg.m)
        z = [cfg.x0]
        for i in range(N):
            z.append(A @ z[-1] + B @ v[i])
        return np.array(z), v

    def J(v):
        z, v = traj(v)
        s = sum(z[i] @ cost.Q @ z[i] + cost.q @ z[i] + v[i] @ cost.R @ v[i] + cost.r @ v[i] for i in range(N))
        return s + z[N] @ ing.P @ z[N] + ing.p_f @ z[N]

    def ineq(v):
        z, v = traj(v)
        rows = [cons.b - cons.G @ z[i] - cons.H @ v[i] for i in range(N)]
        rows.append(np.array([r.rhs - r.lin @ z[N] for r in tset.rows]))
        return np.concatenate(rows)

    res = scipy.optimize.minimize(J, np.zeros(N * cfg.m), constraints=[{"type": "ineq", "fun": ineq}],
                                  method="SLSQP", options={"ftol": 1e-13, "maxiter": 500})
    assert res.success
    return res.fun


def test_vanishing_noise_matches_deterministic_mpc():
    cfg = toy_scenario(b=(0.85, 0.4), x0=(0.8, -0.5), sigma=1e-14)
    d = Design.for_scenario(cfg, use_cache=False)
    _, obj, _ = solve_initial(d.cfg, d.ing, d.tset)
    assert obj == pytest.approx(_nominal_oracle(d.cfg, d.ing, d.tset), abs=1e-4)


def test_initial_infeasible(toy_design):
    d = toy_design
    with pytest.raises(InitialInfeasibleError):
        solve_initial(d.cfg, d.ing, d.tset, x0=[5.0, 0.0])


# -- reconditioning -------------------------------------------------------------

def test_shift_with_zero_disturbance(toy_design):
    d = toy_design
    pol, _, _ = solve_initial(d.cfg, d.ing, d.tset)
    ctx = recondition_shift(pol, np.zeros(2), d.ing)
    N, n = pol.N, 2
    np.testing.assert_allclose(ctx.hat_z[:N], pol.nominal.z[1:])
    np.testing.assert_allclose(ctx.hat_v[:N - 1], pol.nominal.v[1:])
    np.testing.assert_allclose(ctx.hat_v[N - 1], d.ing.K @ pol.nominal.z[N])
    for i in range(1, N):
        np.testing.assert_allclose(ctx.hat_phi_x[i - 1], pol.response.phi_x[i][:, n:])
    for i in range(1, N - 1):
        np.testing.assert_allclose(ctx.hat_phi_u[i - 1], pol.response.phi_u[i][:, n:])
    np.testing.assert_allclose(ctx.hat_z[N], d.ing.A_K @ pol.nominal.z[N])
    np.testing.assert_allclose(ctx.hat_phi_x[N - 1], np.hstack([d.ing.A_K @ ctx.hat_phi_x[N - 2], np.eye(n)]))


def test_shift_needs_previous(toy_design):
    with pytest.raises(ValueError):
        recondition_shift(None, np.zeros(2), toy_design.ing)


def test_hat_moments_are_conditional_moments(toy_design):
    """Monte Carlo check: the hat tuple describes (x_{i+1}, u_{i+1}) given w_0."""
    d = toy_design
    pol, _, _ = solve_initial(d.cfg, d.ing, d.tset)
    w0 = np.array([0.15, -0.1])
    ctx = recondition_shift(pol, w0, d.ing)
    root = psd_sqrt(d.cfg.system.sigma_w)
    rng = np.random.default_rng(0)
    R = 400000
    i = 2                         # predicted step i + 1 = 3 of the previous plan (= N)
    rest = rng.standard_normal((R, i, 2)) @ root.T
    w = np.concatenate([np.broadcast_to(w0, (R, 1, 2)), rest], axis=1).reshape(R, -1)
    x = pol.nominal.z[i + 1] + w @ pol.response.phi_x[i].T
    S = np.kron(np.eye(i), d.cfg.system.sigma_w)
    cov = ctx.hat_phi_x[i - 1] @ S @ ctx.hat_phi_x[i - 1].T
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(x.mean(axis=0) - ctx.hat_z[i]) <= 4 * sd / np.sqrt(R))
    # standard error of a sample covariance entry: sqrt((s_ii s_jj + s_ij^2) / R)
    se = np.sqrt((np.outer(sd, sd) ** 2 + cov ** 2) / R)
    assert np.all(np.abs(np.cov(x.T) - cov) <= 4 * se)
    u = np.array([evaluate_policy(pol, wr.reshape(-1, 2), 2) for wr in w[:2000]])
    np.testing.assert_allclose(u.mean(axis=0), ctx.hat_v[1], atol=0.05)


def test_alpha_cases(toy_design):
    d = toy_design
    cons = d.cfg.constraints
    pol, _, _ = solve_initial(d.cfg, d.ing, d.tset)
    ctx = recondition_shift(pol, np.zeros(2), d.ing)
    root = psd_sqrt(d.cfg.system.sigma_w)
    a, deg, ok = compute_alpha(ctx, cons, root, 0, 0)
    assert deg and math.isnan(a)
    assert classify_constraint(a, deg, ok) == ("C1" if ok else "C2")
    # place the hat mean on the k = 0 boundary: alpha equals sqrt(pt)
    g = cons.G[0]
    img = g @ ctx.hat_phi_x[0]
    std = np.linalg.norm((img.reshape(1, 2) @ root).ravel())
    target = cons.b[0] - math.sqrt(cons.p_tilde[0]) * std
    ctx.hat_z[1] = ctx.hat_z[1] + (target - g @ ctx.hat_z[1]) * g / (g @ g)
    a, deg, ok = compute_alpha(ctx, cons, root, 1, 0)
    assert not deg
    assert a == pytest.approx(math.sqrt(cons.p_tilde[0]), rel=1e-10)
    assert classify_constraint(a, deg, ok) == "C3"
    # overshoot b: negative alpha
    ctx.hat_z[1] = ctx.hat_z[1] + 0.5 * g
    a, deg, ok = compute_alpha(ctx, cons, root, 1, 0)
    assert a < 0 and not ok
    assert classify_constraint(a, deg, ok) == "C4"


@pytest.mark.parametrize("alpha,deg,ok,label", [
    (math.nan, True, True, "C1"), (math.nan, True, False, "C2"),
    (0.4, False, True, "C3"), (0.0, False, True, "C3"), (-0.3, False, False, "C4"),
])
def test_classify(alpha, deg, ok, label):
    assert classify_constraint(alpha, deg, ok) == label


def _run(d, variant, steps, seed=0, disturb=True):
    cfg = d.cfg
    st = ControllerState(cfg, d.ing, d.tset, variant, d.mu_hat)
    rng = np.random.default_rng(seed)
    root = psd_sqrt(cfg.system.sigma_w)
    x = cfg.x0.copy()
    ws, diags = [], []
    for k in range(steps):
        u, diag = controller_step(st, x)
        diags.append(diag)
        w = root @ rng.standard_normal(2 if cfg.n == 2 else cfg.n) if disturb else np.zeros(cfg.n)
        ws.append(w)
        x_next = cfg.system.A @ x + cfg.system.B @ u + w
        if k > 0:
            np.testing.assert_allclose(st.last_w, ws[-2], atol=1e-10)
        x = x_next
    return st, diags


@pytest.mark.parametrize("variant", ["rc", "rc-mod"])
def test_candidate_feasible_every_step_toy(toy_design, variant):
    st, diags = _run(toy_design, variant, 8, seed=1)
    assert all(dg["candidate_feasible"] for dg in diags[1:])
    assert all(dg["candidate_violation"] <= 1e-5 for dg in diags[1:])
    assert st.k == 8 and st.mode == "receding"
    for dg in diags[1:]:
        assert set(dg["cases"]) == set(CASES)
        assert sum(dg["cases"].values()) == toy_design.cfg.horizon * toy_design.cfg.c


@pytest.mark.parametrize("variant", ["rc", "rc-mod"])
def test_candidate_feasible_hvac(hvac_design, variant):
    st, diags = _run(hvac_design, variant, 4, seed=2)
    assert all(dg["candidate_feasible"] for dg in diags[1:])


def test_rc_resolve_reproduces_shifted_cost():
    cfg = toy_scenario(b=(50.0, 50.0))
    d = Design.for_scenario(cfg, use_cache=False)
    st = ControllerState(cfg, d.ing, d.tset, "rc", d.mu_hat)
    u0, _ = controller_step(st, cfg.x0)
    x1 = cfg.system.A @ cfg.x0 + cfg.system.B @ u0
    ctx = recondition_shift(st.prev, np.zeros(2), d.ing)
    prog, lay = build_rhc_socp(x1, ctx, cfg, d.ing, "rc")
    _, diag = controller_step(st, x1)
    assert diag["objective"] == pytest.approx(prog.objective_value(ctx.candidate(lay)), abs=1e-7)


def test_rc_mod_needs_mu_hat(toy_design):
    d = toy_design
    pol, _, _ = solve_initial(d.cfg, d.ing, d.tset)
    ctx = recondition_shift(pol, np.zeros(2), d.ing)
    with pytest.raises(ValueError):
        build_rhc_socp(d.cfg.x0, ctx, d.cfg, d.ing, "rc-mod", None)
    with pytest.raises(ValueError):
        build_rhc_socp(d.cfg.x0, ctx, d.cfg, d.ing, "other")
    rows = tail_rows_for(d.ing, 2)
    assert len(rows) == 3 and len(rows[0]) == d.cfg.c


def test_fault_carries_candidate():
    exc = ControllerFault("boom", 3, None, np.ones(2), None)
    assert exc.k == 3
    np.testing.assert_array_equal(exc.candidate, np.ones(2))


# -- estimator --------------------------------------------------------------------

def test_estimator_interface(toy, isolated_cache):
    est = SMPCController(method="rc-mod")
    assert est.get_params() == {"method": "rc-mod", "mu_hat": None, "use_cache": True, "workers": 1}
    with pytest.raises(NotFittedError):
        est.predict([[0.0, 0.0]])
    est.fit(toy)
    assert est.mu_hat_ == est.terminal_set_.mu
    U = est.predict([toy.x0, [0.1, 0.1]])
    assert U.shape == (2, 1)
    np.testing.assert_allclose(U[0], est.policy_.nominal.v[0], atol=1e-7)
    with pytest.raises(ValueError):
        est.predict([[0.0, 0.0, 0.0]])
    est.reset()
    u = est.step(toy.x0)
    np.testing.assert_allclose(u, U[0], atol=1e-7)
    u1 = est.step(toy.system.A @ toy.x0 + toy.system.B @ u)
    assert u1.shape == (1,)
    with pytest.raises(ValueError):
        SMPCController(method="nope").fit(toy)


def test_policy_from_initial_solution_is_serializable(toy_design):
    pol, _, _ = solve_initial(toy_design.cfg, toy_design.ing, toy_design.tset)
    back = Policy.from_json(pol.to_json())
    np.testing.assert_allclose(back.nominal.v, pol.nominal.v)
    assert back.objective == pytest.approx(pol.objective)
