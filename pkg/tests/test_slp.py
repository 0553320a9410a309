import numpy as np
import pytest

from slp_smpc.model import LinearGaussianSystem, StageCost
from slp_smpc.slp import (NominalTrajectory, Policy, SystemResponse, evaluate_policy, expected_cost,
                          joint_moments, response_from_feedback, validate_slp)


def _system(n=2, m=1, seed=0):
    rng = np.random.default_rng(seed)
    A = 0.5 * rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    W = rng.standard_normal((n, n))
    return LinearGaussianSystem(A, B, 0.1 * W @ W.T + 0.01 * np.eye(n))


def _random_policy(sys_, N, seed=1):
    rng = np.random.default_rng(seed)
    n, m = sys_.n, sys_.m
    phi_u = [rng.standard_normal((m, k * n)) for k in range(1, N)]
    resp = response_from_feedback(sys_, phi_u)
    z = [rng.standard_normal(n)]
    v = rng.standard_normal((N, m))
    for i in range(N):
        z.append(sys_.A @ z[-1] + sys_.B @ v[i])
    return Policy(NominalTrajectory(np.array(z), v), resp, np.zeros((m, n)))


def test_response_recursion():
    sys_ = _system()
    pol = _random_policy(sys_, 5)
    assert validate_slp(pol.response, sys_)
    np.testing.assert_array_equal(pol.response.phi_x[0], np.eye(2))
    # every row ends with the identity block
    for k in range(1, 6):
        np.testing.assert_array_equal(pol.response.block_x(k, k), np.eye(2))


def test_perturbed_response_fails_validation():
    sys_ = _system()
    resp = _random_policy(sys_, 4).response
    bad = [P.copy() for P in resp.phi_x]
    bad[2][0, 0] += 1e-6
    assert not validate_slp(SystemResponse(bad, resp.phi_u), sys_)


def test_shape_checks():
    with pytest.raises(ValueError):
        SystemResponse([np.eye(2), np.zeros((2, 3))], [np.zeros((1, 2))])
    with pytest.raises(ValueError):
        SystemResponse([np.eye(2), np.zeros((2, 4))], [])


def test_policy_reproduces_closed_loop_simulation():
    """States generated by the policy equal the rollout of x+ = A x + B u + w."""
    sys_ = _system(3, 2, seed=4)
    N = 5
    pol = _random_policy(sys_, N, seed=5)
    rng = np.random.default_rng(6)
    w = rng.standard_normal((N, 3))
    x = pol.nominal.z[0].copy()
    for k in range(N):
        u = evaluate_policy(pol, w[:k], k)
        pred = pol.nominal.z[k] + (pol.response.row_x(k) @ w[:k].reshape(-1) if k else 0.0)
        np.testing.assert_allclose(x, pred, atol=1e-10)
        x = sys_.A @ x + sys_.B @ u + w[k]
    np.testing.assert_allclose(x, pol.nominal.z[N] + pol.response.row_x(N) @ w.reshape(-1), atol=1e-10)


def test_evaluate_beyond_horizon_uses_gain():
    sys_ = _system()
    pol = Policy(_random_policy(sys_, 3).nominal, _random_policy(sys_, 3).response, [[1.0, -2.0]])
    np.testing.assert_allclose(evaluate_policy(pol, None, 3, [1.0, 1.0]), [-1.0])
    with pytest.raises(ValueError):
        evaluate_policy(pol, None, 4)
    with pytest.raises(ValueError):
        evaluate_policy(pol, np.zeros((1, 2)), 2)


def test_joint_moments_against_monte_carlo():
    sys_ = _system(2, 1, seed=8)
    pol = _random_policy(sys_, 4, seed=9)
    i = 3
    mean, F = joint_moments(pol, sys_, i)
    rng = np.random.default_rng(10)
    L = np.linalg.cholesky(sys_.sigma_w)
    w = rng.standard_normal((200000, i, 2)) @ L.T
    flat = w.reshape(200000, -1)
    xs = pol.nominal.z[i] + flat @ pol.response.row_x(i).T
    us = pol.nominal.v[i] + flat @ pol.response.row_u(i).T
    samples = np.hstack([xs, us])
    np.testing.assert_allclose(samples.mean(axis=0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(samples.T), F @ F.T, rtol=0.03, atol=2e-3)
    m0, F0 = joint_moments(pol, sys_, 0)
    assert F0.shape == (3, 0)
    with pytest.raises(IndexError):
        joint_moments(pol, sys_, 4)


def test_expected_cost_against_monte_carlo():
    sys_ = _system(2, 1, seed=11)
    pol = _random_policy(sys_, 3, seed=12)
    cost = StageCost(np.diag([1.0, 0.5]), [[2.0]], q=[0.3, -0.1], r=[1.0])

    class Term:
        P = np.diag([2.0, 1.0])
        p_f = np.array([0.1, 0.2])

    J = expected_cost(pol, cost, Term, sys_.sigma_w)
    rng = np.random.default_rng(13)
    L = np.linalg.cholesky(sys_.sigma_w)
    R = 100000
    w = rng.standard_normal((R, 3, 2)) @ L.T
    total = np.zeros(R)
    for k in range(3):
        flat = w[:, :k].reshape(R, -1)
        x = pol.nominal.z[k] + (flat @ pol.response.row_x(k).T if k else 0.0)
        u = pol.nominal.v[k] + (flat @ pol.response.row_u(k).T if k else 0.0)
        x = np.broadcast_to(x, (R, 2))
        u = np.broadcast_to(u, (R, 1))
        total += np.einsum("ri,ij,rj->r", x, cost.Q, x) + x @ cost.q + 2.0 * u[:, 0] ** 2 + u[:, 0]
    xN = pol.nominal.z[3] + w.reshape(R, -1) @ pol.response.row_x(3).T
    total += np.einsum("ri,ij,rj->r", xN, Term.P, xN) + xN @ Term.p_f
    se = total.std() / np.sqrt(R)
    assert abs(total.mean() - J) < 4 * se


def test_policy_json_roundtrip():
    sys_ = _system()
    pol = _random_policy(sys_, 4)
    back = Policy.from_json(pol.to_json())
    for a, b in zip(pol.response.phi_x + pol.response.phi_u, back.response.phi_x + back.response.phi_u):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.nominal.z, pol.nominal.z)


def test_nominal_consistency():
    sys_ = _system()
    pol = _random_policy(sys_, 3)
    assert pol.nominal.is_consistent(sys_)
    z = pol.nominal.z.copy()
    z[2] += 1e-3
    assert not NominalTrajectory(z, pol.nominal.v).is_consistent(sys_)
