import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, settings, strategies as st

from robtune.scenario import (
    TABLE_II,
    InfeasibleScenarioError,
    MinimumEnergySteering,
    Scenario,
    accel_profile_times,
    controllability_gramian,
    feedforward_steering,
    feedforward_traction,
    lateral_reference,
    longitudinal_reference,
    make_reference,
    quintic_blend,
    reduced_lateral_system,
    time_grid,
)
from robtune.vehicle import VehicleParams, linearize

P = VehicleParams()
G = linearize(P)
SC = {s.name: s for s in TABLE_II}


# --- lateral 3-4-5 profile --------------------------------------------------------

def test_blend_endpoints_and_derivatives():
    assert quintic_blend(0.0) == 0.0
    assert quintic_blend(1.0) == 1.0
    # derivatives of 10t^3 - 15t^4 + 6t^5 vanish at both ends
    d1 = np.polyder(np.poly1d([6, -15, 10, 0, 0, 0]))
    d2 = np.polyder(d1)
    for t in (0.0, 1.0):
        assert abs(d1(t)) < 1e-12 and abs(d2(t)) < 1e-12


def test_lateral_midpoint_and_end():
    sc = SC["1"]
    y = lateral_reference(sc, 0.02, 8.0)
    t = time_grid(0.02, 8.0)
    assert y[np.argmin(abs(t - 2.0))] == pytest.approx(sc.yf / 2, abs=1e-12)
    assert y[np.argmin(abs(t - 4.0))] == pytest.approx(3.7, abs=1e-12)
    assert np.all(y[t >= 4.0] == 3.7)


def test_lateral_finite_differences_vanish_at_ends():
    sc = SC["1"]
    ts = 1e-3
    y = lateral_reference(sc, ts, sc.tf2)
    assert abs((y[1] - y[0]) / ts) < 1e-4
    assert abs((y[-1] - y[-2]) / ts) < 1e-4
    assert abs((y[2] - 2 * y[1] + y[0]) / ts**2) < 1e-1


# --- longitudinal profile ------------------------------------------------------------

@pytest.mark.parametrize("sc", TABLE_II, ids=lambda s: s.name)
def test_terminal_speed_is_exact(sc):
    v, a = longitudinal_reference(sc, 0.02, 8.0)
    t = time_grid(0.02, 8.0)
    assert np.all(v[t >= sc.tf1 - 1e-12] == sc.xpf)
    assert v[0] == 25.0 and a[0] == 0.0


def test_scenario_1_reaches_30_at_3s():
    v, _ = longitudinal_reference(SC["1"], 0.02, 3.0)
    assert v[-1] == 30.0


def test_scenario_2_plateau():
    _, a = longitudinal_reference(SC["2"], 0.001, 3.5)
    assert a.max() == pytest.approx(0.5)
    assert np.sum(np.isclose(a, 0.5)) > 100


@pytest.mark.parametrize("sc", TABLE_II, ids=lambda s: s.name)
def test_acceleration_integrates_to_speed_gain(sc):
    ramp, dur = accel_profile_times(sc)
    assert dur <= sc.tf1 + 1e-12
    t = np.linspace(0, sc.tf1, 200001)
    _, a = longitudinal_reference(sc, t[1] - t[0], len(t) - 1)
    assert scipy.integrate.trapezoid(a, t) == pytest.approx(sc.xpf - 25.0, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(1.0, 8.0), st.floats(0.2, 4.0))
def test_speed_is_monotone_and_consistent(dv, tf1, amax):
    sc = Scenario(25.0 + dv, tf1, amax, 1.0, 4.0)
    if amax * tf1 <= sc.xpf - 25.0:
        with pytest.raises(InfeasibleScenarioError):
            accel_profile_times(sc)
        return
    v, a = longitudinal_reference(sc, 0.01, tf1 + 1.0)
    ramp, dur = accel_profile_times(sc)
    assert dur <= tf1 + 1e-12
    assert np.all(np.diff(v) >= -1e-12)
    assert v[-1] == sc.xpf
    if ramp < 1e-3:
        return  # near-step pulse, not resolvable by quadrature
    # speed is the integral of acceleration
    t = np.linspace(0, tf1, 100001)
    _, a_fine = longitudinal_reference(sc, t[1] - t[0], len(t) - 1)
    assert scipy.integrate.trapezoid(a_fine, t) == pytest.approx(sc.xpf - 25.0, abs=1e-6)
    assert np.all(a >= 0) and a.max() <= amax + 1e-12


# --- traction feedforward --------------------------------------------------------------

def test_traction_at_cruise():
    frx, ffx = feedforward_traction(P, 25.0, 0.0)
    assert frx + ffx == pytest.approx(220.5)
    assert ffx == pytest.approx(73.5)
    assert frx == pytest.approx(147.0)


def test_traction_while_accelerating():
    frx, ffx = feedforward_traction(P, 25.0, 2.0)
    assert frx + ffx == pytest.approx(4220.5)


def test_traction_split_rule():
    # F = 300 from a pure mass term: m a = 300
    frx, ffx = feedforward_traction(VehicleParams(rho=1e-300), 0.0, 300.0 / P.m)
    assert (float(ffx), float(frx)) == pytest.approx((100.0, 200.0))


# --- reduced lateral model and steering ---------------------------------------------------

def test_reduced_lateral_structure():
    ar, br = reduced_lateral_system(G)
    assert ar.shape == (5, 5) and br.shape == (5, 1)
    assert ar[4, 4] == -8.0
    np.testing.assert_array_equal(br[:, 0], [0, 0, 0, 0, 8.0])


def test_scalar_gramian_closed_form():
    wc = controllability_gramian([[-1.0]], [[1.0]], 4.0)
    assert wc[0, 0] == pytest.approx((1 - np.exp(-8)) / 2, rel=1e-13)
    assert wc[0, 0] == pytest.approx(0.499832, abs=1e-6)


def test_gramian_matches_quadrature_for_reduced_model():
    ar, br = reduced_lateral_system(G)
    tf = 4.0
    f = lambda s: scipy.linalg.expm(ar * s) @ br @ br.T @ scipy.linalg.expm(ar.T * s)
    quad, _ = scipy.integrate.quad_vec(f, 0, tf, epsabs=1e-13, epsrel=1e-12)
    np.testing.assert_allclose(controllability_gramian(ar, br, tf), quad, rtol=1e-9, atol=1e-12)


def test_zero_lateral_target_gives_zero_steering():
    ar, br = reduced_lateral_system(G)
    sc = Scenario(30.0, 3.0, 2.0, 0.0, 4.0)
    assert np.all(feedforward_steering(ar, br, sc, 0.02, 8.0) == 0)


@pytest.mark.parametrize("sc", TABLE_II, ids=lambda s: s.name)
def test_steering_reaches_target(sc):
    ar, br = reduced_lateral_system(G)
    steer = MinimumEnergySteering(ar, br, sc.tf2, np.r_[0, 0, 0, sc.yf, 0])

    def rhs(t, x):
        return ar @ x + br[:, 0] * steer(t)[0]

    sol = scipy.integrate.solve_ivp(rhs, (0, sc.tf2), np.zeros(5), method="DOP853", rtol=1e-11,
                                    atol=1e-12)
    xf = sol.y[:, -1]
    assert abs(xf[3] - sc.yf) <= 1e-3 * sc.yf
    np.testing.assert_allclose(xf, [0, 0, 0, sc.yf, 0], atol=1e-6)


def test_sampled_steering_matches_closed_form():
    ar, br = reduced_lateral_system(G)
    sc = SC["3"]
    u = feedforward_steering(ar, br, sc, 0.02, 8.0)
    t = time_grid(0.02, 8.0)
    steer = MinimumEnergySteering(ar, br, sc.tf2, np.r_[0, 0, 0, sc.yf, 0])
    inside = t <= sc.tf2
    np.testing.assert_allclose(u[inside], steer(t[inside]), rtol=1e-9, atol=1e-12)
    assert np.all(u[~inside] == 0)


def test_uncontrollable_pair_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        MinimumEnergySteering(np.diag([-1.0, -2.0]), [[1.0], [0.0]], 1.0, [1.0, 1.0])


def test_make_reference_shapes_and_columns():
    ref = make_reference(SC["1"], P, G, 0.02, 8.0)
    assert ref.xd.shape == (401, 6) and ref.ubar.shape == (401, 3)
    assert ref.steps == 400
    assert ref.xd[-1, 0] == 30.0 and ref.xd[-1, 4] == 3.7
    assert ref.truncated(10).steps == 10
    header = ref.to_csv().split("\n")[0]
    assert header.startswith("t,xd0") and header.endswith("ubar2")


def test_integer_horizon_is_step_count():
    assert len(time_grid(0.02, 7)) == 8
    assert len(time_grid(0.02, 7.0)) == 351
