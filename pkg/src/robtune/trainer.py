"""Penalized controller tuning with Adam and a certified incumbent.

The total cost of a controller is

    J = c_p + xi_s c_s + xi_r c_rob

with the rollout tracking cost ``c_p``, the nominal-stability penalty
``c_s`` and the small-gain penalty ``c_rob = max(1, sigma_peak)``. Tuning
runs a fixed epoch budget per horizon phase and returns the lowest-J
iterate that is nominally stable and robustly certified on a densified
frequency grid.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .controller import Controller
from .gp import LearnedDynamics, ResidualDataset, fit_residual_models
from .lti import DEFAULT_GRID, FrequencyGrid, GeneralizedPlant, StateSpace
from .rollout import RolloutConfig, fit_to_horizon, performance_gradient, simulate_rollout
from .scenario import ReferenceTrajectory, reduced_lateral_system
from .stability import (
    build_performance_plant,
    build_uncertainty_plant,
    certify,
    channel_norm_gradient,
    stability_penalty_gradients,
)

log = logging.getLogger(__name__)


class NoFeasibleIterateError(RuntimeError):
    """No certified iterate was seen; ``log`` holds the full training log."""

    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


class InfeasibleInitError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    xi_s: float = 1e4
    xi_r: float = 1e3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_short: int = 2000
    epochs_long: int = 2000
    horizon_short: float = 8.0
    horizon_long: float = 40.0
    clip: float = 1e3
    seed: int = 0
    ts: float = 0.02
    q_diag: tuple = (1.0, 0.0, 0.0, 0.0, 10.0, 0.0)
    snapshot_every: int = 0
    certify_factor: int = 3

    def __post_init__(self):
        if self.xi_s < 0 or self.xi_r < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs_short < 0 or self.epochs_long < 0:
            raise ValueError("epoch budgets must be nonnegative")

    def rollout_config(self, horizon: float) -> RolloutConfig:
        return RolloutConfig(self.ts, int(round(horizon / self.ts)), tuple(self.q_diag))

    def phases(self) -> list[tuple[int, float]]:
        return [(n, h) for n, h in ((self.epochs_short, self.horizon_short),
                                    (self.epochs_long, self.horizon_long)) if n > 0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(phi, grad, state: AdamState, cfg: TrainerConfig):
    """Bias-corrected Adam descent step; returns ``(phi_new, state_new)``."""
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    mhat = m / (1 - cfg.beta1**t)
    vhat = v / (1 - cfg.beta2**t)
    return phi - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps), AdamState(m, v, t)


@dataclass
class CostBreakdown:
    j: float
    c_p: float
    report: object
    grad_p: np.ndarray
    grad_s: np.ndarray
    grad_r: np.ndarray
    flags: list = field(default_factory=list)


def _cost_terms(f, k: Controller, refs, g_nom, pred: GeneralizedPlant, cfg: TrainerConfig,
                rcfg: RolloutConfig, grid: FrequencyGrid) -> CostBreakdown:
    try:
        c_p, gp_, _ = performance_gradient(f, k, refs, rcfg)
    except Exception as exc:
        raise type(exc)(f"rollout: {exc}") from exc
    try:
        rep, pg = stability_penalty_gradients(g_nom, None, None, k, grid, pred=pred)
    except Exception as exc:
        raise type(exc)(f"stability: {exc}") from exc
    j = c_p + cfg.xi_s * rep.c_s + cfg.xi_r * rep.c_rob
    return CostBreakdown(j, c_p, rep, gp_, pg.d_cs, pg.d_crob, pg.fallbacks)


def total_cost_and_gradient(f, k: Controller, refs, g_nom: StateSpace, w1: StateSpace,
                            w2: StateSpace, cfg: TrainerConfig, horizon: float | None = None,
                            grid: FrequencyGrid = DEFAULT_GRID, pred=None):
    """``(J, dJ/dphi, StabilityReport)`` for the penalized objective."""
    if pred is None:
        pred = build_uncertainty_plant(g_nom, w1, w2)
    rcfg = cfg.rollout_config(cfg.horizon_short if horizon is None else horizon)
    cb = _cost_terms(f, k, refs, g_nom, pred, cfg, rcfg, grid)
    grad = cb.grad_p + cfg.xi_s * cb.grad_s + cfg.xi_r * cb.grad_r
    return cb.j, grad, cb.report


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    COLUMNS = ("epoch", "phase", "horizon", "J", "c_p", "c_s", "c_rob", "sigma_peak",
               "max_abscissa", "grad_norm", "incumbent")

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = self.COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([v if isinstance(v, (int, str, bool)) and not isinstance(v, float)
                        else repr(float(v)) for v in r])
        return buf.getvalue()


def tune_controller(k0: Controller, f, refs, g_nom: StateSpace, w1: StateSpace, w2: StateSpace,
                    cfg: TrainerConfig, grid: FrequencyGrid = DEFAULT_GRID, pred=None):
    """Run the epoch schedule and return ``(k_best, TrainingLog)``.

    Every epoch evaluates J and its gradient at the current iterate, logs
    them, and takes one clipped Adam step. An iterate becomes the incumbent
    when it is certified on the working grid, beats the incumbent's J, and
    passes the densified-grid check. At each new horizon phase the incumbent
    is re-scored at that horizon so J values stay comparable.
    """
    if pred is None:
        pred = build_uncertainty_plant(g_nom, w1, w2)
    refs = list(refs)
    tlog = TrainingLog()
    k = k0
    best = None  # (J, controller)
    epoch = 0
    for phase, (n_epochs, horizon) in enumerate(cfg.phases()):
        rcfg = cfg.rollout_config(horizon)
        prefs = [fit_to_horizon(r, rcfg.horizon_steps) for r in refs]
        if best is not None:
            best = (_cost_terms(f, best[1], prefs, g_nom, pred, cfg, rcfg, grid).j, best[1])
        state = AdamState.zeros(k.n_params)
        for _ in range(n_epochs):
            cb = _cost_terms(f, k, prefs, g_nom, pred, cfg, rcfg, grid)
            grad = cb.grad_p + cfg.xi_s * cb.grad_s + cfg.xi_r * cb.grad_r
            gnorm = float(np.linalg.norm(grad))
            rep = cb.report
            took = False
            if rep.certified and np.isfinite(cb.j) and (best is None or cb.j < best[0]):
                ok, _ = certify(g_nom, pred, k, grid, cfg.certify_factor)
                if ok:
                    best = (cb.j, k)
                    took = True
            tlog.rows.append((epoch, phase, horizon, cb.j, cb.c_p, rep.c_s, rep.c_rob,
                              rep.sigma_peak, rep.max_abscissa, gnorm, int(took)))
            if cfg.snapshot_every and epoch % cfg.snapshot_every == 0:
                tlog.snapshots.append((epoch, k.phi.tolist()))
            if gnorm > cfg.clip:
                grad = grad * (cfg.clip / gnorm)
            if not np.all(np.isfinite(grad)):
                grad = np.zeros_like(grad)
            phi, state = adam_step(k.phi, grad, state, cfg)
            k = k.with_phi(phi)
            epoch += 1
    if best is None:
        raise NoFeasibleIterateError("no certified controller was found during tuning", tlog)
    return best[1], tlog


# --- adaptation -------------------------------------------------------------

@dataclass
class AdaptationResult:
    controller: Controller
    models: list
    log: TrainingLog
    dataset: ResidualDataset
    learned: LearnedDynamics


def collect_dataset(k: Controller, actual_plant, ref: ReferenceTrajectory,
                    rcfg: RolloutConfig) -> ResidualDataset:
    """Closed-loop run of ``k`` on the actual plant, as a residual dataset."""
    tr = simulate_rollout(actual_plant, k, [ref], rcfg).traces[0]
    if tr.diverged:
        raise RuntimeError("data-collection rollout diverged")
    return ResidualDataset.from_trajectory(tr.states, tr.inputs, rcfg.ts)


def adapt_controller(k_t: Controller, actual_plant, refs, g_nom: StateSpace, w1: StateSpace,
                     w2: StateSpace, cfg: TrainerConfig, f_n, collect_ref: ReferenceTrajectory,
                     grid: FrequencyGrid = DEFAULT_GRID, gp_restarts: int = 2,
                     gp_steps: int = 500, pred=None) -> AdaptationResult:
    """Collect data with ``k_t`` on the actual plant, learn ``f_l``, retune on it."""
    rcfg = cfg.rollout_config(cfg.horizon_short)
    ds = collect_dataset(k_t, actual_plant, fit_to_horizon(collect_ref, rcfg.horizon_steps), rcfg)
    models = fit_residual_models(ds, f_n, gp_restarts, cfg.seed, gp_steps)
    f_l = LearnedDynamics(f_n, models)
    k_a, tlog = tune_controller(k_t, f_l, refs, g_nom, w1, w2, cfg, grid, pred)
    return AdaptationResult(k_a, models, tlog, ds, f_l)


# --- optional performance-channel penalty -------------------------------------

def performance_norm_penalty(g_nom: StateSpace, we: StateSpace, wu: StateSpace, k: Controller,
                             grid: FrequencyGrid = DEFAULT_GRID):
    """``(||T_z2w2||, gradient)`` of the weighted sensitivity channel."""
    p = build_performance_plant(g_nom, we, wu)
    peak, grad, _ = channel_norm_gradient(p, k, grid)
    return peak.value, grad


# --- baseline initializer ---------------------------------------------------------

LATERAL_STATES = 4
SPEED = 0
STEER = 2


def _lateral_gain(g_nom: StateSpace, q_lat, r_lat: float) -> np.ndarray:
    """LQR state feedback on the reduced lateral model (``delta_r = -K x_lat``)."""
    ar, br = reduced_lateral_system(g_nom)
    p = scipy.linalg.solve_continuous_are(ar, br, np.diag(q_lat), np.array([[r_lat]]))
    return (br.T @ p / r_lat)[0]


def baseline_controller(g_nom: StateSpace, pred: GeneralizedPlant | None = None, seed: int = 0,
                        speed_kp: float = 2000.0, speed_ki: float = 400.0,
                        q_lat=(0.0, 0.0, 1.0, 1e-2, 0.0), r_lat: float = 1.0,
                        lateral_pole: float = 5.0, output_scale: float = 1e-3,
                        max_tries: int = 200, grid: FrequencyGrid = DEFAULT_GRID) -> Controller:
    """Stabilizing start point with a frozen speed loop and a 4-state lateral part.

    Controller states are ``[speed integrator, 4 lateral states]``. The speed
    error drives both traction forces (2/3 rear, 1/3 front) through a
    mask-frozen PI law. The steering command is an LQR gain on the lateral
    errors plus a 4-state filter ``-lateral_pole I`` on the lateral errors
    with small seeded random input/output gains. Draws are rejected until
    the loop is nominally stable (and, when ``pred`` is given, robustly
    certified).
    """
    rng = np.random.default_rng(seed)
    nk = 1 + LATERAL_STATES
    ne, nu = g_nom.noutputs, g_nom.ninputs
    split = np.array([2.0 / 3.0, 1.0 / 3.0])
    k_lat = _lateral_gain(g_nom, q_lat, r_lat)

    mask = {
        "ak": np.zeros((nk, nk), bool),
        "bk": np.zeros((nk, ne), bool),
        "ck": np.zeros((nu, nk), bool),
        "dk": np.zeros((nu, ne), bool),
    }
    mask["ak"][1:, 1:] = True
    mask["bk"][1:, 1:] = True
    mask["ck"][STEER, 1:] = True
    mask["dk"][STEER, 1:] = True

    from .stability import internal_stability_matrices, nominal_stability_penalty

    for _ in range(max_tries):
        ak = np.zeros((nk, nk))
        ak[1:, 1:] = -lateral_pole * np.eye(LATERAL_STATES)
        bk = np.zeros((nk, ne))
        bk[0, SPEED] = 1.0
        bk[1:, 1:] = output_scale * rng.standard_normal((LATERAL_STATES, ne - 1))
        ck = np.zeros((nu, nk))
        ck[:2, 0] = speed_ki * split
        ck[STEER, 1:] = output_scale * rng.standard_normal(LATERAL_STATES)
        dk = np.zeros((nu, ne))
        dk[:2, SPEED] = speed_kp * split
        dk[STEER, 1:] = k_lat
        k = Controller(ak, bk, ck, dk, mask)
        if nominal_stability_penalty(internal_stability_matrices(g_nom, k)) > 0:
            continue
        if pred is not None and not certify(g_nom, pred, k, grid)[0]:
            continue
        return k
    raise InfeasibleInitError(f"no certified baseline controller in {max_tries} draws")
