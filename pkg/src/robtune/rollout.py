"""Explicit-Euler closed-loop rollouts and their exact parameter gradients.

The loop is full-state feedback around the tracking error ``e = xd - x``::

    u[t]    = Ck xc[t] + Dk e[t] + ubar[t]
    x[t+1]  = x[t] + ts f(x[t], u[t])
    xc[t+1] = (I + ts Ak) xc[t] + ts Bk e[t]

and the cost is ``c_p = sum_t e[t]^T Q e[t]`` over ``t = 0..N``. Gradients
with respect to the trainable controller entries are propagated forward
alongside the state.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .controller import Controller
from .scenario import ReferenceTrajectory

DIVERGENCE_NORM = 1e6
DIVERGED_COST = 1e12
DEFAULT_Q = (1.0, 0.0, 0.0, 0.0, 10.0, 0.0)


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class RolloutConfig:
    ts: float = 0.02
    horizon_steps: int = 400
    q_diag: tuple = DEFAULT_Q

    def __post_init__(self):
        if not self.ts > 0:
            raise ValueError("sample period must be positive")
        if self.horizon_steps < 1:
            raise ValueError("horizon must be at least one step")
        q = tuple(float(v) for v in self.q_diag)
        if any(v < 0 for v in q):
            raise ValueError("state weights must be nonnegative")
        object.__setattr__(self, "q_diag", q)

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.q_diag)


class LinearDynamics:
    """``f(x, u) = A x + B u`` with the same interface as the vehicle model."""

    def __init__(self, a, b):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(self.a.shape[0], -1)

    def __call__(self, x, u):
        return self.a @ np.asarray(x, float) + self.b @ np.asarray(u, float)

    def jacobians(self, x, u):
        return self.a, self.b


def step_closed_loop(f, k: Controller, x, xc, xd, ubar, ts: float):
    """One closed-loop transition; returns ``(x_next, xc_next, u)``."""
    e = xd - x
    u = k.ck @ xc + k.dk @ e + ubar
    x_next = x + ts * np.asarray(f(x, u), dtype=float)
    xc_next = xc + ts * (k.ak @ xc) + ts * (k.bk @ e)
    return x_next, xc_next, u


@dataclass
class RolloutTrace:
    """One scenario's trajectory; ``inputs`` has one row fewer than ``states``."""

    ts: float
    states: np.ndarray
    inputs: np.ndarray
    xd: np.ndarray
    ubar: np.ndarray
    cost: float
    diverged: bool = False
    name: str = ""

    @property
    def errors(self) -> np.ndarray:
        return self.xd[:len(self.states)] - self.states

    def to_csv(self) -> str:
        """Columns ``t, x0..x5, xd0..xd5, u0..u2, ubar0..ubar2``."""
        n, nx = self.states.shape
        nu = self.ubar.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i}" for i in range(nx)] + [f"xd{i}" for i in range(nx)]
                   + [f"u{i}" for i in range(nu)] + [f"ubar{i}" for i in range(nu)])
        u = np.vstack([self.inputs, np.full((n - len(self.inputs), nu), np.nan)])
        for i in range(n):
            vals = [i * self.ts, *self.states[i], *self.xd[i], *u[i], *self.ubar[i]]
            w.writerow([repr(float(v)) for v in vals])
        return buf.getvalue()


@dataclass
class RolloutResult:
    traces: list = field(default_factory=list)

    @property
    def c_p(self) -> float:
        return float(sum(t.cost for t in self.traces))

    @property
    def per_scenario(self) -> list[float]:
        return [t.cost for t in self.traces]

    @property
    def diverged(self) -> bool:
        return any(t.diverged for t in self.traces)


def fit_to_horizon(ref: ReferenceTrajectory, steps: int) -> ReferenceTrajectory:
    """Truncate, or hold the terminal values, so the reference has ``steps + 1`` rows."""
    n = ref.steps
    if n >= steps:
        return ref.truncated(steps)
    pad = steps - n
    xd = np.vstack([ref.xd, np.repeat(ref.xd[-1:], pad, axis=0)])
    ub = np.vstack([ref.ubar, np.repeat(ref.ubar[-1:], pad, axis=0)])
    return ReferenceTrajectory(ref.ts, xd, ub, ref.scenario)


def _check_refs(refs, cfg: RolloutConfig):
    out = []
    for i, r in enumerate(refs):
        if not np.isclose(r.ts, cfg.ts, rtol=0, atol=1e-12):
            raise RolloutError(f"scenario {i}: reference sampled at {r.ts} s, rollout uses {cfg.ts} s")
        out.append(fit_to_horizon(r, cfg.horizon_steps))
    return out


def _name(ref, i):
    return ref.scenario.name if ref.scenario is not None and ref.scenario.name else str(i)


def _run(f, k: Controller, ref: ReferenceTrajectory, cfg: RolloutConfig, with_grad: bool,
         name: str):
    q = cfg.q
    ts = cfg.ts
    steps = ref.steps
    nx = ref.xd.shape[1]
    nk = k.nstates
    x = ref.xd[0].astype(float).copy()
    xc = np.zeros(nk)
    states = [x]
    inputs = []
    e = ref.xd[0] - x
    cost = float(e @ (q * e))
    diverged = False
    if with_grad:
        idx = k.param_index()
        n_p = k.n_params
        sx = np.zeros((nx, n_p))
        sc = np.zeros((nk, n_p))
        grad = np.zeros(n_p)
        a_step = np.eye(nk) + ts * k.ak
    for t in range(steps):
        e = ref.xd[t] - x
        u = k.ck @ xc + k.dk @ e + ref.ubar[t]
        try:
            fx_val = np.asarray(f(x, u), dtype=float)
            if with_grad:
                fx, fu = f.jacobians(x, u)
        except (ValueError, ArithmeticError) as exc:
            raise type(exc)(f"scenario {name}, step {t}: {exc}") from exc
        x_next = x + ts * fx_val
        xc_next = xc + ts * (k.ak @ xc) + ts * (k.bk @ e)
        if with_grad:
            de = -sx
            du = k.ck @ sc + k.dk @ de
            rows, cols, pos = idx["ck"]
            du[rows, pos] += xc[cols]
            rows, cols, pos = idx["dk"]
            du[rows, pos] += e[cols]
            sx_next = sx + ts * (fx @ sx + fu @ du)
            sc_next = a_step @ sc + ts * (k.bk @ de)
            rows, cols, pos = idx["ak"]
            sc_next[rows, pos] += ts * xc[cols]
            rows, cols, pos = idx["bk"]
            sc_next[rows, pos] += ts * e[cols]
        inputs.append(u)
        x, xc = x_next, xc_next
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = True
            states.append(x)
            break
        states.append(x)
        e = ref.xd[t + 1] - x
        cost += float(e @ (q * e))
        if with_grad:
            sx, sc = sx_next, sc_next
            grad += 2.0 * (e * q) @ (-sx)
    if diverged:
        cost = DIVERGED_COST
    trace = RolloutTrace(ts, np.array(states), np.array(inputs).reshape(-1, ref.ubar.shape[1]),
                         ref.xd, ref.ubar, cost, diverged, name)
    return trace, (grad if with_grad else None)


def simulate_rollout(f, k: Controller, refs, cfg: RolloutConfig) -> RolloutResult:
    """Closed-loop traces for every reference, starting at ``xd[0]`` with ``xc = 0``."""
    refs = _check_refs(refs, cfg)
    return RolloutResult([_run(f, k, r, cfg, False, _name(r, i))[0] for i, r in enumerate(refs)])


def performance_gradient(f, k: Controller, refs, cfg: RolloutConfig):
    """``(c_p, dc_p/dphi, RolloutResult)`` by forward sensitivity propagation.

    ``f`` must provide ``jacobians(x, u) -> (df/dx, df/du)``. Per-scenario
    gradients are summed in scenario order.
    """
    refs = _check_refs(refs, cfg)
    traces, grad = [], np.zeros(k.n_params)
    for i, r in enumerate(refs):
        tr, g = _run(f, k, r, cfg, True, _name(r, i))
        traces.append(tr)
        grad = grad + g
    res = RolloutResult(traces)
    return res.c_p, grad, res


def tracking_error_norm(trace: RolloutTrace, state: int = 4, t_end: float | None = 8.0,
                        weighted: bool = True) -> float:
    """``sqrt(sum e^2 ts)`` of one state's tracking error up to ``t_end``.

    With ``weighted=False`` the plain ``sqrt(sum e^2)`` is returned.
    """
    e = trace.errors[:, state]
    if t_end is not None:
        e = e[:int(round(t_end / trace.ts)) + 1]
    s = float(np.sum(e * e))
    return float(np.sqrt(s * trace.ts if weighted else s))
