import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robtune.lti import FrequencyGrid, StateSpace, freqresp, is_stable
from robtune.uncertainty import (
    CoverFitError,
    RankDeficientResponseError,
    UncertaintyWeight,
    balance_input_scaling,
    bound_csv,
    check_cover,
    fit_cover,
    relative_error_samples,
    relative_errors,
    verify_cover,
)
from robtune.vehicle import TABLE_I_RANGES, VehicleParams, linearize, sample_plants

GRID = FrequencyGrid.logspace(1e-3, 1e3, 200)
G = StateSpace([[-1.0]], [[1.0]], [[1.0]], [[0.0]])


def scaled(g, c):
    return StateSpace(g.a, g.b, c * g.c, c * g.d)


def test_scaled_scalar_plant():
    b = relative_error_samples(G, [scaled(G, 1.2)], GRID)
    np.testing.assert_allclose(b, 0.2, rtol=1e-12)


def test_nominal_only_gives_zero_bound():
    assert np.all(relative_error_samples(G, [G], GRID) == 0)


def test_bound_is_pointwise_max():
    b = relative_error_samples(G, [scaled(G, 0.9), scaled(G, 1.3)], GRID)
    np.testing.assert_allclose(b, 0.3, rtol=1e-12)


def test_rank_deficient_response():
    g = StateSpace([[-1.0]], [[1.0, 1.0]], [[1.0]], [[0.0, 0.0]])
    with pytest.raises(RankDeficientResponseError):
        relative_errors(g, [g], GRID, require_full_rank=True)
    # default: truncated pseudoinverse
    assert np.all(relative_error_samples(g, [g], GRID) == 0)


def test_input_scaling_conjugates_errors():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(3, 4, 2, 2))
    d = np.array([1.0, 10.0])
    from robtune.uncertainty import scaled_bound

    direct = np.linalg.norm(np.linalg.inv(np.diag(d)) @ e @ np.diag(d), 2, axis=(2, 3)).max(axis=0)
    np.testing.assert_allclose(scaled_bound(e, d), direct)


def test_balance_input_scaling_never_worse_than_identity():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(5, 10, 3, 3))
    e[..., 2, :2] *= 1e3  # input 3 error leaks strongly into the others
    d, peak = balance_input_scaling(e)
    from robtune.uncertainty import scaled_bound

    assert peak <= scaled_bound(e, None).max() + 1e-12
    assert d[0] == d[1] == 1.0


# --- cover fitting --------------------------------------------------------------------

def test_constant_cover():
    w = fit_cover(np.full(50, 0.2), GRID.omegas[:50], order=0, margin=0.05)
    assert w.order == 0
    assert w.gain == pytest.approx(0.21, rel=1e-9)


def test_zero_bound_gives_zero_weight():
    w = fit_cover(np.zeros(10), GRID.omegas[:10], order=2)
    assert w.gain == 0.0
    assert np.all(w.magnitude(GRID.omegas) == 0)


def test_rising_bound_first_order_cover():
    om = GRID.omegas
    b = 0.1 + 0.7 * om**2 / (om**2 + 1.0)
    w = fit_cover(b, om, order=1, margin=0.0)
    assert w.order == 1
    assert check_cover(w, b, om).ok
    z, p = w.sections[0]
    assert z > 0 and p > 0 and is_stable(w.w)
    # a tight cover, not a huge constant
    assert np.max(w.magnitude(om) / b) < 1.5


def test_magnitude_matches_state_space():
    w = UncertaintyWeight(0.3, ((2.0, 20.0), (0.1, 0.5)))
    om = GRID.omegas
    np.testing.assert_allclose(w.magnitude(om), np.abs(freqresp(w.w, om)[:, 0, 0]), rtol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.0, 0.5), st.integers(0, 2))
def test_cover_dominates_bound(z, p, margin, order):
    om = GRID.omegas
    b = 0.2 * np.sqrt((om**2 + z**2) / (om**2 + p**2)) * (1 + 0.1 * np.sin(3 * np.log(om)))
    try:
        w = fit_cover(b, om, order=order, margin=margin)
    except CoverFitError:
        assert order == 0  # only a constant can overshoot by > 100x here
        return
    assert np.all(w.magnitude(om) >= (1 + margin) * b * (1 - 1e-12))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_margin_scales_cover_uniformly(m1, m2):
    om = GRID.omegas
    b = 0.1 + om / (om + 3.0)
    w1 = fit_cover(b, om, order=2, margin=m1)
    w2 = fit_cover(b, om, order=2, margin=m2)
    assert w1.sections == w2.sections
    np.testing.assert_allclose(w2.magnitude(om) / w1.magnitude(om), (1 + m2) / (1 + m1), rtol=1e-9)


def test_invalid_order():
    with pytest.raises(ValueError):
        fit_cover(np.ones(3), [1.0, 2.0, 3.0], order=3)


def test_weight_serialization_roundtrip():
    w = UncertaintyWeight(0.3, ((2.0, 20.0),), np.array([1.0, 1.0, 1e-4]), 0.05)
    back = UncertaintyWeight.from_json(w.to_json())
    assert back.gain == w.gain and back.sections == w.sections and back.margin == w.margin
    np.testing.assert_array_equal(back.input_scaling, w.input_scaling)
    # w1 carries D, w2 its inverse
    np.testing.assert_allclose(np.diag(back.w2.d), [1.0, 1.0, 1e4])
    np.testing.assert_allclose(np.diag(back.w1.d), 0.3 * np.array([1.0, 1.0, 1e-4]))


def test_vehicle_cover_margin_zero_holds_on_grid():
    p = VehicleParams()
    g = linearize(p)
    plants = sample_plants(p, TABLE_I_RANGES, n=30, seed=0)
    grid = FrequencyGrid.logspace(1e-3, 1e3, 600)
    b = relative_error_samples(g, plants, grid)
    w = fit_cover(b, grid.omegas, order=2, margin=0.0)
    res = check_cover(w, b, grid.omegas)
    assert res.ok and res.n_points == 600
    assert res.worst_ratio <= 1.0


def test_verify_cover_warns_on_violation():
    plants = [scaled(G, 1.5)]
    w = UncertaintyWeight(0.4)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = verify_cover(w, G, plants, GRID)
    assert not res.ok and res.worst_ratio == pytest.approx(1.25)
    assert any("cover violated" in str(r.message) for r in rec)


def test_bound_csv_columns():
    text = bound_csv([1.0, 2.0], [0.1, 0.2], UncertaintyWeight(0.5))
    lines = text.strip().split("\n")
    assert lines[0] == "omega,bound,fitted_magnitude"
    assert lines[1] == "1.0,0.1,0.5"
