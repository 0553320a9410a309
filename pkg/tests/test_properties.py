"""Randomized properties of the small numerical building blocks."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from slp_smpc.controller import Layout, horizon_soc_rows
from slp_smpc.linalg import (chi_squared_cdf, chi_squared_quantile, kron_vec_identity_check, normal_quantile,
                             psd_sqrt, unvec, vec)
from slp_smpc.model import LinearGaussianSystem
from slp_smpc.slp import NominalTrajectory, Policy, SystemResponse, response_from_feedback, validate_slp

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_vec_unvec_roundtrip(r, c, data):
    M = data.draw(arrays(float, (r, c), elements=finite))
    assert np.array_equal(unvec(vec(M), r, c), M)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_kron_vec_identity(a, b, c, d, data):
    A = data.draw(arrays(float, (a, b), elements=finite))
    B = data.draw(arrays(float, (b, c), elements=finite))
    C = data.draw(arrays(float, (c, d), elements=finite))
    assert kron_vec_identity_check(A, B, C, tol=1e-8)


@given(st.floats(0.0, 0.999999), st.floats(0.0, 0.999999))
def test_chi_squared_quantile_monotone_and_inverse(q1, q2):
    lo, hi = sorted((q1, q2))
    assert chi_squared_quantile(lo) <= chi_squared_quantile(hi)
    assert chi_squared_cdf(chi_squared_quantile(hi)) == pytest.approx(hi, abs=1e-10)


@given(st.floats(1e-6, 1 - 1e-6))
def test_normal_quantile_symmetry(u):
    assert normal_quantile(u) == pytest.approx(-normal_quantile(1.0 - u), abs=1e-8)


@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_psd_sqrt_squares_back(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, max(1, n - 1)))
    S = X @ X.T
    R = psd_sqrt(S)
    assert np.allclose(R, R.T) and np.allclose(R @ R, S, atol=1e-8 * (1 + np.abs(S).max()))


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_feedback_rows_satisfy_the_response_recursion(n, m, N, seed):
    rng = np.random.default_rng(seed)
    sys_ = LinearGaussianSystem(rng.normal(size=(n, n)), rng.normal(size=(n, m)), np.eye(n))
    phi_u = [rng.normal(size=(m, k * n)) for k in range(1, N)]
    resp = response_from_feedback(sys_, phi_u)
    assert validate_slp(resp, sys_)
    # perturbing one free block breaks it
    if N > 1:
        broken = [P.copy() for P in resp.phi_x]
        broken[-1][0, 0] += 1e-3
        assert not validate_slp(SystemResponse(broken, phi_u), sys_)


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_pack_unpack_roundtrip(n, m, N, seed):
    rng = np.random.default_rng(seed)
    sys_ = LinearGaussianSystem(0.5 * rng.normal(size=(n, n)), rng.normal(size=(n, m)), np.eye(n))
    resp = response_from_feedback(sys_, [rng.normal(size=(m, k * n)) for k in range(1, N)])
    v = rng.normal(size=(N, m))
    z = [rng.normal(size=n)]
    for i in range(N):
        z.append(sys_.A @ z[-1] + sys_.B @ v[i])
    pol = Policy(NominalTrajectory(np.array(z), v), resp, np.zeros((m, n)))
    lay = Layout(n, m, N)
    x = lay.pack(pol.nominal.z, pol.nominal.v, resp.phi_x, resp.phi_u)
    back = lay.unpack(x, pol.K, sys_)
    assert np.allclose(back.nominal.z, pol.nominal.z)
    for P, Q in zip(back.response.phi_x, resp.phi_x):
        assert np.allclose(P, Q)


@settings(max_examples=25)
@given(st.integers(2, 4), st.integers(0, 2**31 - 1), st.floats(0.55, 0.99))
def test_chance_row_norm_matches_standard_deviation(n, seed, p):
    """The SOC row's norm part is the quantile times the standard deviation of g'x + h'u."""
    rng = np.random.default_rng(seed)
    m, N = 1, 3
    X = rng.normal(size=(n, n))
    sys_ = LinearGaussianSystem(0.5 * rng.normal(size=(n, n)), rng.normal(size=(n, m)), X @ X.T + 0.1 * np.eye(n))
    resp = response_from_feedback(sys_, [rng.normal(size=(m, k * n)) for k in range(1, N)])
    lay = Layout(n, m, N)
    x = lay.pack(np.zeros((N + 1, n)), np.zeros((N, m)), resp.phi_x, resp.phi_u)
    g, h = rng.normal(size=n), rng.normal(size=m)
    i = 2
    q = math.sqrt(chi_squared_quantile(2 * p - 1))
    F, c = horizon_soc_rows(lay, i, g, h, 1.0, q, psd_sqrt(sys_.sigma_w))
    s = F[1:] @ x + c[1:]
    cov = np.kron(np.eye(i), sys_.sigma_w)
    row = g @ resp.row_x(i) + h @ resp.row_u(i)
    assert np.linalg.norm(s) == pytest.approx(q * math.sqrt(row @ cov @ row), rel=1e-9)
