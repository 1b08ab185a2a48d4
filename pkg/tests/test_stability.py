import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_fd, random_controller, random_stable_plant, rel_err
from robtune.controller import Controller
from robtune.lti import FrequencyGrid, StateSpace, freqresp, hinf_norm, lft_lower, spectral_abscissa
from robtune.stability import (
    NonzeroFeedthroughError,
    build_additive_plant,
    build_uncertainty_plant,
    certify,
    channel_norm_gradient,
    internal_stability_matrices,
    nominal_penalty_gradient,
    nominal_stability_penalty,
    robust_stability_penalty,
    robust_stability_report,
    stability_penalty_gradients,
)
from robtune.trainer import performance_norm_penalty

LAG = StateSpace([[-1.0]], [[1.0]], [[1.0]], [[0.0]])
GRID = FrequencyGrid.logspace(1e-3, 1e3, 300)


def gain(v):
    return StateSpace.gain(np.atleast_2d(v))


# --- internal stability ---------------------------------------------------------

def test_static_controller_blocks_collapse():
    ms = internal_stability_matrices(LAG, Controller.static([[0.5]]))
    np.testing.assert_allclose(ms[1], [[-1.5]])
    np.testing.assert_allclose(ms[2], [[-1.5]])
    assert ms[0].shape == (2, 2) and ms[3].shape == (1, 1)


def test_zero_controller_gives_plant_matrix():
    rng = np.random.default_rng(0)
    g = random_stable_plant(rng, 3)
    ms = internal_stability_matrices(g, Controller.static([[0.0]]))
    np.testing.assert_array_equal(ms[1], g.a)


def test_feedthrough_plant_rejected():
    g = StateSpace([[-1.0]], [[1.0]], [[1.0]], [[0.5]])
    with pytest.raises(NonzeroFeedthroughError, match="Dg = 0"):
        internal_stability_matrices(g, Controller.static([[1.0]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matrices_agree_with_closed_loop_lft(seed):
    # The block displays keep Ag in M1 and Ak in M4 as isolated diagonal
    # blocks, so "all stable" is closed-loop stability plus stable Ag and Ak.
    rng = np.random.default_rng(seed)
    ng, nk = int(rng.integers(1, 4)), int(rng.integers(0, 3))
    g = StateSpace(rng.normal(size=(ng, ng)), rng.normal(size=(ng, 1)), rng.normal(size=(1, ng)),
                   [[0.0]])
    k = Controller(rng.normal(size=(nk, nk)), rng.normal(size=(nk, 1)), rng.normal(size=(1, nk)),
                   rng.normal(size=(1, 1)), {})
    all_neg = all(spectral_abscissa(m) < 0 for m in internal_stability_matrices(g, k))
    closed = lft_lower(build_additive_plant(g, gain(1.0)), k)
    expected = (spectral_abscissa(closed.a) < 0 and spectral_abscissa(g.a) < 0
                and spectral_abscissa(k.ak) < 0)
    assert all_neg == expected


def test_m2_is_the_closed_loop_matrix():
    rng = np.random.default_rng(5)
    g = random_stable_plant(rng, 3)
    k = random_controller(rng, 2)
    closed = lft_lower(build_additive_plant(g, gain(1.0)), k)
    m2 = internal_stability_matrices(g, k)[1]
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(m2)),
                               np.sort_complex(np.linalg.eigvals(closed.a)), atol=1e-10)


# --- penalty values -----------------------------------------------------------------

def _diag(vals):
    return [np.array([[v]]) for v in vals]


@pytest.mark.parametrize("vals, expected", [
    ((-1, -2, -0.5, 0.3), 0.3),
    ((0.1, 0.2, 0.3, 0.4), 1.0),
    ((-1, -1, -1, -1), 0.0),
    ((0.0, -1, 0.0, -2), 0.0),
])
def test_nominal_penalty_formula(vals, expected):
    assert nominal_stability_penalty(_diag(vals)) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_nominal_penalty_zero_iff_nonpositive(vals):
    c = nominal_stability_penalty(_diag(vals))
    assert c >= 0
    assert (c == 0) == all(v <= 0 for v in vals)


def test_uncertainty_channel_scalar_case():
    p = build_uncertainty_plant(LAG, gain(0.5), gain(1.0))
    c_rob, peak, _ = robust_stability_penalty(lft_lower(p, Controller.static([[1.0]])), GRID)
    assert peak == pytest.approx(0.25, abs=1e-6)
    assert c_rob == 1.0


def test_zero_weight_gives_zero_channel():
    p = build_uncertainty_plant(LAG, gain(0.0), gain(1.0))
    t = lft_lower(p, Controller.static([[1.0]]))
    assert np.all(freqresp(t, GRID.omegas) == 0)
    assert robust_stability_penalty(t, GRID)[0] == 1.0


def test_additive_channel_high_frequency_limit():
    # T = -K (1 + G K)^-1 Wa -> |K| = 1 as w -> inf
    p = build_additive_plant(LAG, gain(1.0))
    t = lft_lower(p, Controller.static([[1.0]]))
    val, om = hinf_norm(t, GRID)
    w = GRID.omegas[-1]
    assert val == pytest.approx(abs((1j * w + 1) / (1j * w + 2)), rel=1e-12)
    assert val == pytest.approx(1.0, abs=1e-5)
    assert om == w


def test_static_channel_penalty():
    assert robust_stability_penalty(gain(1.4), GRID)[0] == pytest.approx(1.4)
    assert robust_stability_penalty(gain(0.0), GRID)[0] == 1.0


def test_uncertainty_channel_matches_closed_form_mimo():
    # T = -W2 K (I + G K)^-1 G W1 at one frequency
    rng = np.random.default_rng(9)
    g = random_stable_plant(rng, 3, 2, 2)
    k = random_controller(rng, 2, 2, 2)
    w1 = StateSpace([[-2.0]], [[1.0]], [[1.5]], [[0.3]])
    from robtune.lti import append

    w1 = append(w1, w1)
    w2 = gain(np.diag([1.0, 0.5]))
    t = lft_lower(build_uncertainty_plant(g, w1, w2), k)
    om = 1.3
    gw = freqresp(g, [om])[0]
    kw = freqresp(k.to_statespace(), [om])[0]
    w1w = freqresp(w1, [om])[0]
    expected = -w2.d @ kw @ np.linalg.solve(np.eye(2) + gw @ kw, gw @ w1w)
    np.testing.assert_allclose(freqresp(t, [om])[0], expected, rtol=1e-10, atol=1e-12)


# --- gradients ------------------------------------------------------------------------

def _unstable_instance(seed):
    """Random loop whose nominal penalty is active."""
    rng = np.random.default_rng(seed)
    while True:
        ng, nk = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        g = random_stable_plant(rng, ng)
        k = random_controller(rng, nk, scale=2.0)
        if nominal_penalty_gradient(g, k)[0] > 0.05:
            return g, k


def test_nominal_penalty_gradient_matches_fd():
    for seed in range(20):
        g, k = _unstable_instance(seed)
        c_s, grad, flags = nominal_penalty_gradient(g, k)
        assert not flags
        fd = central_fd(lambda ph: nominal_stability_penalty(internal_stability_matrices(g, k.with_phi(ph))),
                        k.phi)
        assert rel_err(grad, fd) < 1e-5, seed


def _robust_instance(seed):
    """Nominally stable loop with sigma_peak > 1."""
    rng = np.random.default_rng(1000 + seed)
    while True:
        ng, nk = int(rng.integers(1, 7)), int(rng.integers(0, 5))
        g = random_stable_plant(rng, ng)
        k = random_controller(rng, nk)
        if nominal_penalty_gradient(g, k)[0] > 0:
            continue
        w1 = StateSpace([[-5.0]], [[1.0]], [[-4.0 * 3]], [[3.0]])  # 3 (s + 1) / (s + 5)
        pred = build_uncertainty_plant(g, w1, gain(1.0))
        t = lft_lower(pred, k)
        if spectral_abscissa(t.a) < 0 and robust_stability_penalty(t, GRID)[1] > 1.05:
            return g, k, w1, pred


def test_sigma_peak_gradient_matches_fd_at_peak():
    # envelope theorem: d peak / d phi = d sigma(T(j w*)) / d phi at fixed w*
    for seed in range(20):
        g, k, w1, pred = _robust_instance(seed)
        peak, grad, flags = channel_norm_gradient(pred, k, GRID)
        assert not flags
        sig = lambda ph: np.linalg.svd(freqresp(lft_lower(pred, k.with_phi(ph)), [peak.omega],
                                                 check=False)[0], compute_uv=False)[0]
        fd = central_fd(sig, k.phi)
        assert rel_err(grad, fd) < 1e-5, seed


def test_penalty_gradients_match_fd_of_refined_peak():
    for seed in range(5):
        g, k, w1, pred = _robust_instance(seed)
        rep, pg = stability_penalty_gradients(g, w1, gain(1.0), k, GRID)
        assert rep.c_s == 0 and rep.c_rob > 1
        fd = central_fd(lambda ph: robust_stability_report(g, pred, k.with_phi(ph), GRID).c_rob, k.phi)
        assert rel_err(pg.d_crob, fd) < 1e-4, seed
        assert np.all(pg.d_cs == 0)


def test_inactive_penalties_give_zero_gradients():
    g = LAG
    k = Controller.static([[1.0]])
    rep, pg = stability_penalty_gradients(g, gain(0.5), gain(1.0), k, GRID)
    assert rep.c_s == 0 and rep.c_rob == 1.0
    assert np.all(pg.d_cs == 0) and np.all(pg.d_crob == 0)


def test_frozen_entries_are_not_parameters():
    rng = np.random.default_rng(2)
    g, k, w1, pred = _robust_instance(0)
    mask = {b: np.ones(getattr(k, b).shape, bool) for b in ("ak", "bk", "ck", "dk")}
    mask["dk"][:] = False
    km = Controller(k.ak, k.bk, k.ck, k.dk, mask)
    _, pg = stability_penalty_gradients(g, w1, gain(1.0), km, GRID)
    _, pg_full = stability_penalty_gradients(g, w1, gain(1.0), k, GRID)
    assert pg.d_crob.size == k.n_params - k.dk.size
    # the masked gradient is the full gradient restricted to trainable entries
    np.testing.assert_allclose(pg.d_crob, pg_full.d_crob[:pg.d_crob.size], rtol=1e-12)
    del rng


def test_performance_penalty_scalar_case():
    c_t, _ = performance_norm_penalty(LAG, gain(1.0), gain(0.0), Controller.static([[1.0]]), GRID)
    # sup |(s+1)/(s+2)| = 1 as w -> inf; the top grid point is 1e3
    assert c_t == pytest.approx(1.0, abs=1e-5)
    c0, g0 = performance_norm_penalty(LAG, gain(0.0), gain(0.0), Controller.static([[1.0]]), GRID)
    assert c0 == 0.0 and np.all(g0 == 0)


def test_performance_penalty_gradient_matches_fd():
    we = StateSpace([[-0.1]], [[1.0]], [[0.5]], [[0.0]])
    wu = gain(0.2)
    for seed in range(5):
        rng = np.random.default_rng(50 + seed)
        g = random_stable_plant(rng, 2)
        k = random_controller(rng, 1)
        if nominal_stability_penalty(internal_stability_matrices(g, k)) > 0:
            continue
        from robtune.stability import build_performance_plant, channel_peak

        p = build_performance_plant(g, we, wu)
        peak, grad, _ = channel_norm_gradient(p, k, GRID)
        fd = central_fd(lambda ph: channel_peak(lft_lower(p, k.with_phi(ph)), GRID).value, k.phi)
        assert rel_err(grad, fd) < 1e-4


# --- certification ------------------------------------------------------------------

def test_certify_uses_dense_grid():
    p = build_uncertainty_plant(LAG, gain(0.5), gain(1.0))
    ok, rep = certify(LAG, p, Controller.static([[1.0]]), GRID, factor=3)
    assert ok and rep.certified
    assert rep.sigma_peak == pytest.approx(0.25, abs=1e-6)


def test_unstable_controller_is_not_certified():
    p = build_uncertainty_plant(LAG, gain(0.5), gain(1.0))
    ok, rep = certify(LAG, p, Controller.static([[-3.0]]), GRID)
    assert not ok and rep.c_s > 0
    assert rep.to_dict()["c_s"] == rep.c_s
