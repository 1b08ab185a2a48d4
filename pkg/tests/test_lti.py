import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robtune.controller import Controller
from robtune.lti import (
    DimensionError,
    FrequencyGrid,
    GeneralizedPlant,
    SingularResolventError,
    StateSpace,
    UnstableSystemError,
    append,
    feedback,
    frequency_response,
    freqresp,
    hinf_norm,
    lft_lower,
    max_singular_value,
    parallel,
    series,
    spectral_abscissa,
)

LAG = StateSpace([[-1.0]], [[1.0]], [[1.0]], [[0.0]])


def first_order(k, p):
    """k / (s + p)"""
    return StateSpace([[-p]], [[1.0]], [[k]], [[0.0]])


# --- frequency response -------------------------------------------------------

def test_static_gain_response():
    r = frequency_response(StateSpace.gain([[2.0]]), 1.0)
    assert r.shape == (1, 1)
    assert r[0, 0] == 2 + 0j


def test_first_order_lag_at_unit_frequency():
    r = frequency_response(LAG, 1.0)[0, 0]
    assert r == pytest.approx(0.5 - 0.5j, abs=1e-15)
    assert abs(r) == pytest.approx(0.70711, abs=1e-5)


def test_first_order_lag_dc_gain():
    assert frequency_response(LAG, 0.0)[0, 0] == pytest.approx(1.0 + 0j)


def test_response_on_imaginary_axis_pole_raises():
    integrator = StateSpace([[0.0]], [[1.0]], [[1.0]], [[0.0]])
    with pytest.raises(SingularResolventError):
        frequency_response(integrator, 0.0)


def test_negative_frequency_rejected():
    with pytest.raises(ValueError):
        frequency_response(LAG, -1.0)


def test_inconsistent_realization_rejected():
    with pytest.raises(DimensionError):
        StateSpace(np.eye(2), np.ones((3, 1)), np.ones((1, 2)), [[0.0]])


# --- singular values and abscissa ---------------------------------------------

def test_sigma_diagonal():
    assert max_singular_value([[3, 0], [0, 4]]) == pytest.approx(4.0)


def test_sigma_nilpotent():
    assert max_singular_value([[0, 2], [0, 0]]) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-5, 5)))
def test_sigma_matches_eigen_oracle(parts):
    m = parts[0] + 1j * parts[1]
    lam = np.linalg.eigvalsh(m.conj().T @ m).max()
    assert max_singular_value(m) == pytest.approx(np.sqrt(max(lam, 0.0)), abs=1e-10)


@pytest.mark.parametrize("m, expected", [
    ([[-1, 0], [0, -2]], -1.0),
    ([[0, 1], [-2, -3]], -1.0),
    ([[0, 1], [-1, 0]], 0.0),
])
def test_spectral_abscissa(m, expected):
    assert spectral_abscissa(m) == pytest.approx(expected, abs=1e-12)


def test_abscissa_of_empty_matrix():
    assert spectral_abscissa(np.zeros((0, 0))) == -np.inf


# --- H-infinity norm ------------------------------------------------------------

def test_hinf_first_order_lag_peaks_at_low_end():
    grid = FrequencyGrid.logspace(1e-3, 1e3, 600)
    val, om = hinf_norm(LAG, grid)
    assert val == pytest.approx(1.0, abs=1e-6)
    assert om == pytest.approx(grid.omegas[0], rel=0.1)


def test_hinf_static_gain():
    val, _ = hinf_norm(StateSpace.gain([[0.5]]))
    assert val == 0.5


def test_hinf_series_dc():
    sys = series(first_order(10.0, 1.0), first_order(1.0, 10.0))
    val, _ = hinf_norm(sys)
    assert val == pytest.approx(1.0, abs=1e-5)


def test_hinf_resonant_peak_is_refined():
    # lightly damped pair: peak 1 / (2 zeta sqrt(1 - zeta^2)) near wn
    zeta, wn = 0.05, 3.0
    sys = StateSpace([[0, 1], [-wn**2, -2 * zeta * wn]], [[0], [wn**2]], [[1, 0]], [[0]])
    val, om = hinf_norm(sys, FrequencyGrid.logspace(1e-2, 1e2, 100))
    exact = 1 / (2 * zeta * np.sqrt(1 - zeta**2))
    assert val == pytest.approx(exact, rel=1e-6)
    assert om == pytest.approx(wn * np.sqrt(1 - 2 * zeta**2), rel=1e-4)


def test_hinf_unstable_raises():
    with pytest.raises(UnstableSystemError):
        hinf_norm(StateSpace([[1.0]], [[1.0]], [[1.0]], [[0.0]]))


# --- interconnections -----------------------------------------------------------

def test_series_of_gains():
    sys = series(StateSpace.gain([[2.0]]), StateSpace.gain([[3.0]]))
    assert sys.nstates == 0
    assert sys.d[0, 0] == 6.0


def test_parallel_dc_sum():
    sys = parallel(LAG, LAG)
    assert frequency_response(sys, 0.0)[0, 0].real == pytest.approx(2.0)


def test_negative_feedback_dc():
    sys = feedback(LAG, StateSpace.gain([[1.0]]))
    assert frequency_response(sys, 0.0)[0, 0].real == pytest.approx(0.5)


def test_append_is_block_diagonal():
    sys = append(LAG, StateSpace.gain([[2.0]]))
    r = frequency_response(sys, 1.0)
    assert r[0, 0] == pytest.approx(0.5 - 0.5j)
    assert r[1, 1] == 2.0
    assert r[0, 1] == 0 and r[1, 0] == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.01, 100))
def test_series_response_is_product(k1, p1, p2, om):
    s1, s2 = first_order(k1, p1), first_order(1.0, p2)
    lhs = frequency_response(series(s1, s2), om)[0, 0]
    rhs = frequency_response(s1, om)[0, 0] * frequency_response(s2, om)[0, 0]
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-14)


# --- lower LFT ------------------------------------------------------------------

def _passthrough_plant(n):
    z = np.zeros((0, 0))
    return GeneralizedPlant(z, np.zeros((0, n)), np.zeros((0, n)), np.zeros((n, 0)),
                            np.zeros((n, 0)), np.zeros((n, n)), np.eye(n), np.eye(n))


def test_lft_identity_passthrough():
    dk = np.array([[1.0, 2.0], [3.0, 4.0]])
    t = lft_lower(_passthrough_plant(2), Controller.static(dk))
    assert t.nstates == 0
    np.testing.assert_array_equal(t.d, dk)


def test_lft_zero_controller_returns_open_loop_channel():
    rng = np.random.default_rng(3)
    p = GeneralizedPlant(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=(3, 1)),
                         rng.normal(size=(2, 3)), rng.normal(size=(1, 3)), rng.normal(size=(2, 2)),
                         rng.normal(size=(2, 1)), rng.normal(size=(1, 2)))
    t = lft_lower(p, Controller.static([[0.0]]))
    np.testing.assert_array_equal(t.a, p.a)
    np.testing.assert_array_equal(t.d, p.d11)


def test_lft_scalar_uncertainty_channel():
    # G = 1/(s+1), W1 = 0.5, W2 = 1, K = 1: T = -0.5 / (s + 2)
    from robtune.stability import build_uncertainty_plant

    p = build_uncertainty_plant(LAG, StateSpace.gain([[0.5]]), StateSpace.gain([[1.0]]))
    t = lft_lower(p, Controller.static([[1.0]]))
    for om in (0.0, 0.3, 2.0, 40.0):
        assert frequency_response(t, om)[0, 0] == pytest.approx(-0.5 / (1j * om + 2), abs=1e-14)
    val, _ = hinf_norm(t)
    assert val == pytest.approx(0.25, abs=1e-6)  # sup at w -> 0, grid starts at 1e-3


def test_lft_dimension_mismatch():
    with pytest.raises(DimensionError):
        lft_lower(_passthrough_plant(2), Controller.static(np.eye(3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lft_matches_frequency_domain_formula(seed):
    # F_L(P, K) = P11 + P12 K (I - P22 K)^-1 P21 with P22 = C2 (sI - A)^-1 B2
    rng = np.random.default_rng(seed)
    n, nk = 3, 2
    a = rng.normal(size=(n, n)) - 3 * np.eye(n)
    p = GeneralizedPlant(a, rng.normal(size=(n, 1)), rng.normal(size=(n, 1)),
                         rng.normal(size=(1, n)), rng.normal(size=(1, n)), [[0.3]], [[0.7]],
                         [[0.2]])
    k = Controller(rng.normal(size=(nk, nk)) - 2 * np.eye(nk), rng.normal(size=(nk, 1)),
                   rng.normal(size=(1, nk)), rng.normal(size=(1, 1)), {})
    om = 0.7
    s = 1j * om
    res = np.linalg.inv(s * np.eye(n) - a)
    p11 = p.c1 @ res @ p.b1 + p.d11
    p12 = p.c1 @ res @ p.b2 + p.d12
    p21 = p.c2 @ res @ p.b1 + p.d21
    p22 = p.c2 @ res @ p.b2
    kw = frequency_response(k.to_statespace(), om)
    expected = p11 + p12 @ kw @ np.linalg.inv(np.eye(1) - p22 @ kw) @ p21
    got = freqresp(lft_lower(p, k), [om], check=False)[0]
    np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-12)


def test_statespace_json_roundtrip():
    sys = series(LAG, first_order(2.0, 3.0))
    back = StateSpace.from_json(sys.to_json())
    for name in "abcd":
        np.testing.assert_array_equal(getattr(back, name), getattr(sys, name))


def test_grid_must_increase():
    with pytest.raises(ValueError):
        FrequencyGrid([1.0, 1.0, 2.0])
    assert len(FrequencyGrid.logspace(1, 10, 5).densified(3)) == 15
