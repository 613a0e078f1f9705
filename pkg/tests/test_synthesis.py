import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qihmpc.model import LinearizedModel, linearize, make_cstr
from qihmpc.synthesis import (CSTR_WEIGHTS, SynthesisError, Tuning, Weights, solve_care,
                              solve_lyapunov, stabilizing_gain, synthesize,
                              synthesize_arbitrary, synthesize_chen_allgower, synthesize_lqr)

import oracles


@pytest.fixture(scope="module")
def lin():
    return linearize(make_cstr())


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_lyapunov_identity():
    np.testing.assert_allclose(solve_lyapunov(-np.eye(2), np.eye(2)), 0.5 * np.eye(2), atol=1e-15)


def test_lyapunov_against_integral_oracle():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    P = solve_lyapunov(A, np.eye(2))
    assert _rel(P, oracles.lyapunov_integral(A, np.eye(2))) <= 1e-10
    # and the brute-force quadrature agrees loosely
    assert _rel(P, oracles.lyapunov_quadrature(A, np.eye(2))) <= 1e-4


def test_lyapunov_residual():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    Q = np.array([[2.0, 0.3], [0.3, 1.0]])
    P = solve_lyapunov(A, Q)
    assert np.linalg.norm(A.T @ P + P @ A + Q) <= 1e-10 * np.linalg.norm(Q)


def test_lyapunov_rejects_unstable():
    with pytest.raises(SynthesisError, match="offending eigenvalues"):
        solve_lyapunov(np.diag([-1.0, 0.5]), np.eye(2))


def test_lyapunov_rejects_indefinite_q():
    with pytest.raises(SynthesisError):
        solve_lyapunov(-np.eye(2), np.diag([1.0, -1.0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_lyapunov_oracle_property(seed, n):
    rng = np.random.default_rng(seed)
    A = oracles.random_hurwitz(rng, n)
    Q = oracles.random_spd(rng, n)
    P = solve_lyapunov(A, Q)
    assert _rel(P, oracles.lyapunov_integral(A, Q)) <= 1e-8
    assert np.linalg.eigvalsh(P).min() > 0


def test_scalar_care_hand_formula():
    P, K = solve_care([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert K[0, 0] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(0.2, 3), st.floats(0.1, 10), st.floats(0.1, 10))
def test_scalar_care_property(a, b, q, r):
    P, K = solve_care([[a]], [[b]], [[q]], [[r]])
    p, k = oracles.scalar_care(a, b, q, r)
    assert P[0, 0] == pytest.approx(p, rel=1e-10)
    assert K[0, 0] == pytest.approx(k, rel=1e-10)


def test_care_residual_and_gain(lin):
    Q, R = CSTR_WEIGHTS.W_x, CSTR_WEIGHTS.W_u
    P, K = solve_care(lin.A, lin.B, Q, R)
    res = lin.A.T @ P + P @ lin.A - P @ lin.B @ np.linalg.solve(R, lin.B.T) @ P + Q
    assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(Q)
    assert _rel(K, np.linalg.solve(R, lin.B.T @ P)) <= 1e-10
    assert np.linalg.eigvals(lin.A - lin.B @ K).real.max() < 0


def test_care_matches_scipy(lin):
    from scipy.linalg import solve_continuous_are
    Q, R = CSTR_WEIGHTS.W_x, CSTR_WEIGHTS.W_u
    P, _ = solve_care(lin.A, lin.B, Q, R)
    assert _rel(P, solve_continuous_are(lin.A, lin.B, Q, R)) <= 1e-9


def test_kleinman_monotone(lin):
    _, _, info = solve_care(lin.A, lin.B, CSTR_WEIGHTS.W_x, CSTR_WEIGHTS.W_u, full_output=True)
    hist = info["history"]
    assert len(hist) >= 2
    for P0, P1 in zip(hist, hist[1:]):
        assert np.linalg.eigvalsh(P0 - P1).min() >= -1e-10 * np.linalg.norm(P0)


def test_care_bad_initial_gain(lin):
    with pytest.raises(SynthesisError, match="not stabilizing"):
        solve_care(lin.A, lin.B, np.eye(2), np.eye(2), K0=np.zeros((2, 2)))


def test_stabilizing_gain(lin):
    K = stabilizing_gain(lin.A, lin.B)
    assert np.linalg.eigvals(lin.A - lin.B @ K).real.max() < 0


def test_stabilizing_gain_uncontrollable():
    A = np.diag([1.0, -1.0])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(SynthesisError):
        stabilizing_gain(A, B)


def test_weights_validated():
    with pytest.raises(SynthesisError):
        Weights(np.diag([1.0, -1.0]), np.eye(2))


def _check_result(s):
    assert np.abs(s.P - s.P.T).max() <= 1e-12 * np.abs(s.P).max()
    assert np.linalg.eigvalsh(s.P).min() > 0
    assert s.residual() <= 1e-9


@pytest.mark.parametrize("tuning", [
    Tuning("ca", kappa=0.1059),
    Tuning("ac", rho_x=50.0, rho_u=0.0),
    Tuning("ac", rho_x=50.0, rho_u=20.0),
    Tuning("lqr", rho_x=50.0, rho_u=1500.0),
])
def test_result_invariants(lin, tuning):
    _check_result(synthesize(lin, CSTR_WEIGHTS, tuning))


def test_ca_shifted_matrix_hurwitz(lin):
    s = synthesize_chen_allgower(lin, CSTR_WEIGHTS, 0.1059)
    assert np.linalg.eigvals(s.A_K + 0.1059 * np.eye(2)).real.max() < 0
    np.testing.assert_allclose(s.Delta_Q, 2 * 0.1059 * s.P)


def test_ca_gain_close_to_reference(lin):
    s = synthesize_chen_allgower(lin, CSTR_WEIGHTS, 0.1059)
    K_ref = np.array([[-1.6118, -10.7187], [-2.1094, 10.5029]])
    assert np.abs(s.K - K_ref).max() / np.abs(K_ref).max() < 0.02


def test_ca_kappa_out_of_range(lin):
    with pytest.raises(SynthesisError, match=r"admissible interval \(0, "):
        synthesize_chen_allgower(lin, CSTR_WEIGHTS, 5.0)


def test_ca_small_kappa_limit(lin):
    s = synthesize_chen_allgower(lin, CSTR_WEIGHTS, 1e-9)
    P0 = solve_lyapunov(s.A_K, s.Q_star)
    assert _rel(s.P, P0) <= 1e-6


def test_ac_small_rho_limit(lin):
    s = synthesize_arbitrary(lin, CSTR_WEIGHTS, 1e-9, 0.0)
    assert _rel(s.P, solve_lyapunov(s.A_K, s.Q_star)) <= 1e-6


def test_ac_rejects_destabilizing_override(lin):
    with pytest.raises(SynthesisError, match="not stabilizing"):
        synthesize_arbitrary(lin, CSTR_WEIGHTS, 1.0, 0.0, K_override=np.zeros((2, 2)))


def test_ac_defining_equation(lin):
    s = synthesize_arbitrary(lin, CSTR_WEIGHTS, 50.0, 20.0)
    R = s.A_K.T @ s.P + s.P @ s.A_K + s.Q_star + s.Delta_Q
    assert np.linalg.norm(R) <= 1e-9 * np.linalg.norm(s.P)


def test_lqr_reference_values(lin):
    s = synthesize_lqr(lin, CSTR_WEIGHTS, 50.0, 1500.0)
    K_ref = np.array([[-1.2963, -10.4475], [1.1335, 11.3084]])
    P_ref = 1e5 * np.array([[0.1877, 1.0578], [1.0578, 8.5254]])
    assert np.max(np.abs(s.K - K_ref) / np.abs(K_ref)) < 0.02
    assert np.max(np.abs(s.P - P_ref) / np.abs(P_ref)) < 0.02
    assert np.linalg.eigvals(s.A_K).real.max() < 0


def test_lqr_unit_inflation_rejected(lin):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(SynthesisError):
            synthesize_lqr(lin, CSTR_WEIGHTS, 1.0, 1.0)


def test_lqr_non_strict_warns(lin):
    with pytest.warns(UserWarning):
        synthesize_lqr(lin, CSTR_WEIGHTS, 50.0, 1.0)


def test_lqr_min_eigenvalue_monotone_in_rho_u(lin):
    lam = [np.linalg.eigvalsh(synthesize_lqr(lin, CSTR_WEIGHTS, 50.0, r).P).min()
           for r in (1.1, 10.0, 100.0, 1500.0)]
    assert all(b >= a for a, b in zip(lam, lam[1:]))


def test_transposed_form_solves_other_equation(lin):
    s = synthesize_arbitrary(lin, CSTR_WEIGHTS, 50.0, 20.0, lyapunov_form="transposed")
    R = s.A_K @ s.P + s.P @ s.A_K.T + s.Q_star + s.Delta_Q
    assert np.linalg.norm(R) <= 1e-9 * np.linalg.norm(s.P)
    assert s.residual() <= 1e-9


def test_linear_test_system():
    lin = LinearizedModel(np.array([[0.1, 1.0], [0.0, -0.5]]), np.eye(2))
    _check_result(synthesize(lin, CSTR_WEIGHTS, Tuning("lqr", rho_x=2.0, rho_u=2.0)))


@pytest.mark.parametrize("a", [-7.8e-202, -1e-9, 0.0])
def test_care_near_marginal_plant(a):
    P, K = solve_care([[a]], [[1.0]], [[1.0]], [[1.0]])
    p, _ = oracles.scalar_care(a, 1.0, 1.0, 1.0)
    assert P[0, 0] == pytest.approx(p, rel=1e-10)
