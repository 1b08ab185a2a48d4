"""Lane-change references and feedforward commands.

A scenario accelerates the vehicle from 25 m/s to ``xpf`` by ``tf1`` while
moving laterally by ``yf`` by ``tf2``. The feedforward command splits the
tractive force needed by the reference speed profile between the axles and
steers with the minimum-energy input of the reduced lateral model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .lti import StateSpace, ctrb
from .vehicle import VehicleParams

XP0 = 25.0


class InfeasibleScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    xpf: float
    tf1: float
    amax: float
    yf: float
    tf2: float
    name: str = ""

    def __post_init__(self):
        if self.xpf < XP0:
            raise ValueError(f"final speed {self.xpf} is below the start speed {XP0}")
        if not (self.tf1 > 0 and self.tf2 > 0):
            raise ValueError("tf1 and tf2 must be positive")


TABLE_II = (
    Scenario(30.0, 3.0, 2.0, 3.7, 4.0, "1"),
    Scenario(26.5, 3.5, 0.5, 3.7, 4.5, "2"),
    Scenario(28.0, 3.5, 1.0, 3.2, 4.5, "3"),
    Scenario(30.0, 5.0, 1.8, 3.8, 4.5, "4"),
)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled reference states ``xd`` and feedforward inputs ``ubar``.

    Both have ``horizon + 1`` rows at times ``k * ts``.
    """

    ts: float
    xd: np.ndarray
    ubar: np.ndarray
    scenario: Scenario | None = None

    @property
    def t(self) -> np.ndarray:
        return self.ts * np.arange(len(self.xd))

    @property
    def steps(self) -> int:
        return len(self.xd) - 1

    def truncated(self, steps: int) -> "ReferenceTrajectory":
        return ReferenceTrajectory(self.ts, self.xd[:steps + 1], self.ubar[:steps + 1], self.scenario)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"xd{i}" for i in range(6)] + [f"ubar{i}" for i in range(3)])
        for t, x, u in zip(self.t, self.xd, self.ubar):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])
        return buf.getvalue()


def time_grid(ts: float, horizon: float | int) -> np.ndarray:
    """``k * ts`` for ``k = 0..N``; an int horizon is a step count."""
    if ts <= 0:
        raise ValueError("sample period must be positive")
    steps = horizon if isinstance(horizon, (int, np.integer)) else int(round(horizon / ts))
    return ts * np.arange(steps + 1)


def quintic_blend(tau):
    """``10 t^3 - 15 t^4 + 6 t^5`` with ``t`` clamped to [0, 1]."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau**3 * (10 - 15 * tau + 6 * tau**2)


def lateral_reference(sc: Scenario, ts: float, horizon) -> np.ndarray:
    return sc.yf * quintic_blend(time_grid(ts, horizon) / sc.tf2)


def accel_profile_times(sc: Scenario) -> tuple[float, float]:
    """``(ramp, duration)`` of the cosine-ramped acceleration pulse.

    The pulse rises to ``amax`` over ``ramp`` seconds, holds, and falls back
    over ``ramp`` seconds. Each ramp contributes ``amax * ramp / 2`` of speed,
    so the speed gain is ``amax * (duration - ramp)``. The ramp is a quarter
    of ``tf1`` unless the window is too short, in which case the pulse fills
    all of ``[0, tf1]``. Small speed changes cap the ramp at ``dv / amax`` so
    the two ramps meet without a hold phase.
    """
    dv = sc.xpf - XP0
    if dv == 0:
        return 0.0, 0.0
    if sc.amax * sc.tf1 <= dv:
        raise InfeasibleScenarioError(
            f"scenario needs amax > {dv / sc.tf1:.6g} m/s^2 to gain {dv} m/s in {sc.tf1} s"
        )
    ramp = min(sc.tf1 / 4, sc.tf1 - dv / sc.amax, dv / sc.amax)
    return ramp, ramp + dv / sc.amax


def _accel_and_speed(sc: Scenario, t: np.ndarray):
    ramp, dur = accel_profile_times(sc)
    t = np.asarray(t, dtype=float)
    a = np.zeros_like(t)
    v = np.full_like(t, XP0)
    if dur == 0.0:
        return a, v
    amax = sc.amax
    w = math.pi / ramp
    up = t < ramp
    flat = (t >= ramp) & (t <= dur - ramp)
    down = (t > dur - ramp) & (t < dur)
    td = t[down] - (dur - ramp)
    a[up] = 0.5 * amax * (1 - np.cos(w * t[up]))
    a[flat] = amax
    a[down] = 0.5 * amax * (1 + np.cos(w * td))

    v[up] = XP0 + 0.5 * amax * (t[up] - np.sin(w * t[up]) / w)
    v_ramp = XP0 + 0.5 * amax * ramp
    v[flat] = v_ramp + amax * (t[flat] - ramp)
    v[down] = v_ramp + amax * (dur - 2 * ramp) + 0.5 * amax * (td + np.sin(w * td) / w)
    v[t >= dur] = sc.xpf
    return a, v


def longitudinal_reference(sc: Scenario, ts: float, horizon) -> tuple[np.ndarray, np.ndarray]:
    """``(speed, acceleration)`` on the sample grid."""
    a, v = _accel_and_speed(sc, time_grid(ts, horizon))
    return v, a


def feedforward_traction(p: VehicleParams, xp, a) -> tuple[np.ndarray, np.ndarray]:
    """``(frx, ffx)``: two thirds of the required force at the rear axle."""
    xp = np.asarray(xp, dtype=float)
    f = p.m * np.asarray(a, dtype=float) + 0.5 * p.rho * xp**2 * p.af * p.cd
    return 2.0 * f / 3.0, f / 3.0


def reduced_lateral_system(g: StateSpace) -> tuple[np.ndarray, np.ndarray]:
    """Lateral block ``(ar, br)``: last five states, steering input."""
    if g.a.shape != (6, 6) or g.b.shape != (6, 3):
        raise ValueError(f"expected the 6-state, 3-input vehicle model, got a{g.a.shape} b{g.b.shape}")
    return g.a[1:, 1:].copy(), g.b[1:, 2:3].copy()


def controllability_gramian(a, b, t: float) -> np.ndarray:
    """``int_0^t e^{A s} B B^T e^{A^T s} ds`` by the block-exponential method.

    The block exponential of ``[[-A, BB^T], [0, A^T]]`` mixes ``e^{-At}`` with
    ``e^{At}``, which cancels catastrophically for fast stable modes over long
    horizons. It is therefore evaluated on ``t / 2**k`` with ``||A|| t / 2**k``
    below one half and doubled back up with
    ``W(2s) = W(s) + e^{As} W(s) e^{A^T s}``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    n = a.shape[0]
    if t == 0:
        return np.zeros((n, n))
    norm = np.linalg.norm(a, 1) * t
    k = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    h = t / 2**k
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = -a
    blk[:n, n:] = b @ b.T
    blk[n:, n:] = a.T
    e = scipy.linalg.expm(blk * h)
    phi = e[n:, n:].T  # e^{A h}
    wc = phi @ e[:n, n:]
    for _ in range(k):
        wc = wc + phi @ wc @ phi.T
        phi = phi @ phi
    return 0.5 * (wc + wc.T)


class MinimumEnergySteering:
    """Open-loop steering ``B^T e^{A^T (tf - t)} Wc(tf)^-1 x_target``."""

    def __init__(self, ar, br, tf: float, target):
        self.ar = np.asarray(ar, dtype=float)
        self.br = np.asarray(br, dtype=float).reshape(self.ar.shape[0], -1)
        self.tf = float(tf)
        if np.linalg.matrix_rank(ctrb(self.ar, self.br)) < self.ar.shape[0]:
            raise np.linalg.LinAlgError("reduced lateral system is not controllable")
        wc = controllability_gramian(self.ar, self.br, self.tf)
        try:
            self.coef = np.linalg.solve(wc, np.asarray(target, dtype=float))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("controllability Gramian is singular") from exc

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros_like(t)
        inside = (t >= 0) & (t <= self.tf)
        for i in np.nonzero(inside)[0]:
            out[i] = (self.br.T @ scipy.linalg.expm(self.ar.T * (self.tf - t[i])) @ self.coef)[0]
        return out


def feedforward_steering(ar, br, sc: Scenario, ts: float, horizon=None) -> np.ndarray:
    """Sampled minimum-energy steering; zero after ``tf2``."""
    if horizon is None:
        horizon = sc.tf2
    t = time_grid(ts, horizon)
    target = np.zeros(ar.shape[0])
    target[3] = sc.yf
    if sc.yf == 0:
        return np.zeros_like(t)
    steer = MinimumEnergySteering(ar, br, sc.tf2, target)
    # march backwards from tf2 with one e^{A^T ts} instead of an expm per sample
    out = np.zeros_like(t)
    at = steer.ar.T
    step = scipy.linalg.expm(at * ts)
    k_last = int(np.nonzero(t <= sc.tf2 + 1e-12)[0][-1])
    v = scipy.linalg.expm(at * (sc.tf2 - t[k_last])) @ steer.coef
    for k in range(k_last, -1, -1):
        out[k] = (steer.br.T @ v)[0]
        v = step @ v
    return out


def make_reference(sc: Scenario, p: VehicleParams, g_nom: StateSpace, ts: float,
                   horizon) -> ReferenceTrajectory:
    """Reference states and feedforward inputs for one scenario."""
    t = time_grid(ts, horizon)
    n = len(t)
    xp, a = longitudinal_reference(sc, ts, n - 1)
    y = lateral_reference(sc, ts, n - 1)
    xd = np.zeros((n, 6))
    xd[:, 0] = xp
    xd[:, 4] = y
    frx, ffx = feedforward_traction(p, xp, a)
    ar, br = reduced_lateral_system(g_nom)
    dr = feedforward_steering(ar, br, sc, ts, n - 1)
    ubar = np.column_stack([frx, ffx, dr])
    return ReferenceTrajectory(ts, xd, ubar, sc)
