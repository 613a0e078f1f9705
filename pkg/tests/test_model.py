import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qihmpc.model import (CstrParams, DivergenceError, ModelError, NonlinearModel, get_model,
                          integrate, linearize, make_cstr, make_linear_test, rk4_rollout)

import oracles


@pytest.fixture(scope="module")
def cstr():
    return make_cstr()


def test_equilibrium_is_exact(cstr):
    assert np.abs(cstr(np.zeros(2), np.zeros(2))).max() <= 1e-12


def test_printed_operating_point_is_nearly_steady():
    # the tabulated steady state, evaluated in the raw equations, is off by < 1e-4
    r = oracles.cstr_rhs_hand(np.array([0.6416, 0.5387]), np.array([0.5833, 0.5]))
    assert np.abs(r).max() < 1e-4


def test_rhs_against_hand_substitution(cstr):
    # u2 at its upper bound doubles the dilution denominator
    X, U = np.array([0.6416, 0.5387]), np.array([0.5833, 1.0])
    hand = (1 - 0.6416) / (40 * 1.0) - 300 * 0.6416 * np.exp(-5 / 0.5387)
    residual = oracles.cstr_rhs_hand(X, np.array([0.5833, 0.5]))
    got = cstr(np.zeros(2), np.array([0.0, 0.5]))
    assert got[0] == pytest.approx(hand - residual[0], abs=1e-14)


def test_shifted_field_matches_hand_rhs(cstr):
    rng = np.random.default_rng(3)
    off = oracles.cstr_rhs_hand(np.array([0.6416, 0.5387]), np.array([0.5833, 0.5]))
    for _ in range(20):
        x = rng.uniform(-0.1, 0.1, 2)
        u = rng.uniform(-0.3, 0.3, 2)
        want = oracles.cstr_rhs_hand(x + [0.6416, 0.5387], u + [0.5833, 0.5]) - off
        np.testing.assert_allclose(cstr(x, u), want, rtol=1e-12, atol=1e-14)


def test_input_box_contains_origin(cstr):
    lo, hi = cstr.input_box
    assert np.all(lo < 0) and np.all(hi > 0)
    np.testing.assert_allclose(lo, [-0.4167, -0.4750])
    np.testing.assert_allclose(hi, [0.4167, 0.5])


def test_clip(cstr):
    np.testing.assert_allclose(cstr.clip([1.0, -1.0]), [0.4167, -0.475])


def test_batched_evaluation_matches_pointwise(cstr):
    X = np.array([[0.01, -0.02, 0.0], [0.03, 0.0, -0.01]])
    U = np.array([[0.1, 0.0, -0.2], [0.0, 0.2, 0.1]])
    batch = cstr(X, U)
    for j in range(3):
        np.testing.assert_allclose(batch[:, j], cstr(X[:, j], U[:, j]), rtol=1e-14)


@pytest.mark.parametrize("bad", [{"k_0": 0.0}, {"E_a": -1.0}, {"U_s": (0.5833, 0.0)}])
def test_invalid_parameters_rejected(bad):
    with pytest.raises(ModelError):
        get_model("cstr2", bad)


def test_unknown_model_and_key():
    with pytest.raises(ModelError, match="unknown model"):
        get_model("tank")
    with pytest.raises(ModelError, match="unknown CSTR parameter"):
        get_model("cstr2", {"zz": 1})


def test_box_must_contain_origin():
    with pytest.raises(ModelError):
        make_linear_test(u_lower=[0.1, -1.0], u_upper=[1.0, 1.0])


def test_nonzero_equilibrium_rejected():
    with pytest.raises(ModelError):
        NonlinearModel("bad", 1, 1, lambda x, u: x + 1.0, np.array([-1.0]), np.array([1.0]),
                       np.zeros(1), np.zeros(1))


def test_linearize_cstr_four_decimals(cstr):
    lin = linearize(cstr)
    A_ref = np.array([[-0.0779, -0.3088], [0.0279, 0.1905]])
    # A22 differs from the tabulated 0.1905 by 8e-5; see test_acceptance for B21
    assert np.abs(lin.A - A_ref).max() < 1e-4
    ev = np.sort(lin.eigenvalues().real)
    np.testing.assert_allclose(ev, [-0.0406, 0.1532], atol=1e-4)


def test_linearize_linear_model_exact():
    A0 = np.array([[0.1, 1.0], [0.0, -0.5]])
    B0 = np.array([[1.0, 0.5], [0.0, 2.0]])
    lin = linearize(make_linear_test(A0, B0))
    np.testing.assert_allclose(lin.A, A0, atol=1e-9)
    np.testing.assert_allclose(lin.B, B0, atol=1e-9)


def test_linearize_reports_coordinate():
    def f(x, u):
        return np.where(x[1] > 0, np.inf, 0.0) * np.ones_like(x) + 0 * u.sum()

    m = NonlinearModel("spiky", 2, 1, f, np.array([-1.0]), np.array([1.0]), np.zeros(2), np.zeros(1))
    with pytest.raises(ModelError, match="x2"):
        linearize(m)


def test_finite_difference_second_order(cstr):
    # central differences: error ~ h^2, so the change from h to h/2 shrinks ~4x
    hs = [1e-2, 5e-3, 2.5e-3]
    Js = [np.hstack([linearize(cstr, h).A, linearize(cstr, h).B]) for h in hs]
    d1 = np.abs(Js[0] - Js[1]).max()
    d2 = np.abs(Js[1] - Js[2]).max()
    assert 4.0 * 0.9 <= d1 / d2 <= 4.0 * 1.1


def test_integrate_exponential():
    f = lambda x, u: -x  # noqa: E731
    t, X = integrate(f, [1.0], np.zeros((1, 1)), (0.0, 1.0), substeps=20)
    assert X[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert t[-1] == 1.0 and X.shape == (21, 1)


def test_rk4_order():
    f = lambda x, u: -x  # noqa: E731
    errs = []
    for n in (10, 20):
        _, X = integrate(f, [1.0], np.zeros((1, 1)), (0.0, 1.0), substeps=n)
        errs.append(abs(X[-1, 0] - np.exp(-1)))
    assert 14 <= errs[0] / errs[1] <= 18
    # agrees with the independent RK4
    assert errs[0] == pytest.approx(oracles.rk4_decay_error(10), rel=1e-9)


def test_equilibrium_invariance(cstr):
    _, X = integrate(cstr, np.zeros(2), np.zeros((10, 2)), (0.0, 10.0))
    assert np.abs(X).max() <= 1e-8


def test_open_loop_unstable(cstr):
    x0 = np.array([0.01, 0.0])
    _, X = integrate(cstr, x0, np.zeros((20, 2)), (0.0, 20.0))
    from scipy.linalg import expm
    lin = linearize(cstr)
    lin_pred = expm(lin.A * 20) @ x0
    assert np.linalg.norm(X[-1]) > np.linalg.norm(x0)
    assert np.linalg.norm(lin_pred) > np.linalg.norm(x0)


def test_shift_of_origin_equivalence(cstr):
    p = CstrParams()
    Xs, Us = np.array(p.X_s), np.array(p.U_s)
    x0 = np.array([0.02, -0.01])
    U = np.array([[0.1, -0.05], [0.0, 0.1], [-0.2, 0.0]])
    _, Xdev = integrate(cstr, x0, U, (0.0, 3.0))
    f_abs = lambda X, u_abs: cstr.f.absolute(X, u_abs)  # noqa: E731
    _, Xabs = integrate(f_abs, x0 + Xs, U + Us, (0.0, 3.0))
    np.testing.assert_allclose(Xabs - Xs, Xdev, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_carries_time():
    f = lambda x, u: x ** 3  # noqa: E731
    with pytest.raises(DivergenceError) as info:
        integrate(f, [10.0], np.zeros((1, 1)), (0.0, 5.0), substeps=50)
    assert 0 < info.value.t <= 5.0


def test_rollout_matches_integrate(cstr):
    x0 = np.array([0.02, -0.01])
    U = np.array([[0.1, -0.05], [0.0, 0.1]])
    _, X = integrate(cstr, x0, U, (0.0, 2.0))
    xT = rk4_rollout(cstr.f, x0, U[:, :, None], 1.0, 10)
    np.testing.assert_allclose(xT[:, 0], X[-1], rtol=1e-13)


def test_rollout_cost_trapezoid():
    # x' = 0, u constant: cost is exactly (x'Wx + u'Wu u) * T
    f = lambda x, u: 0.0 * x  # noqa: E731
    W = np.eye(1)
    _, J = rk4_rollout(f, np.array([2.0]), np.full((3, 1, 1), 0.5), 1.0, 10, W, W)
    assert J[0] == pytest.approx(3 * (4.0 + 0.25))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_deviation_field_consistent_with_absolute(x1, x2, u1, u2):
    m = make_cstr()
    p = CstrParams()
    x, u = np.array([x1, x2]), np.array([u1, u2])
    np.testing.assert_allclose(m(x, u), m.f.absolute(x + p.X_s, u + p.U_s), rtol=1e-12, atol=1e-15)
