"""Bicycle-model vehicle dynamics with a linear tire model.

State ``x = [xp, yp, psip, psi, y_pos, delta]`` (longitudinal and lateral
speed, yaw rate, yaw angle, lateral position, road-wheel steering angle);
input ``u = [frx, ffx, delta_r]`` (rear and front tractive force, steering
command).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .lti import StateSpace

STATE_NAMES = ("xp", "yp", "psip", "psi", "y_pos", "delta")
INPUT_NAMES = ("frx", "ffx", "delta_r")


class DomainError(ValueError):
    """Longitudinal speed must stay positive for the tire model."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 2000.0
    iz: float = 3200.0
    cf: float = 50e3
    cr: float = 50e3
    lf: float = 1.1
    lr: float = 1.7
    cd: float = 0.24
    af: float = 2.4
    rho: float = 1.225
    lambda_s: float = 8.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"vehicle parameter {k} must be strictly positive, got {v}")

    def drag(self, xp: float) -> float:
        return 0.5 * self.rho * xp * xp * self.af * self.cd


@dataclass(frozen=True)
class VehicleState:
    xp: float = 25.0
    yp: float = 0.0
    psip: float = 0.0
    psi: float = 0.0
    y_pos: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if not self.xp > 0:
            raise DomainError(f"longitudinal speed must be positive, got {self.xp}")

    def to_array(self) -> np.ndarray:
        return np.array([self.xp, self.yp, self.psip, self.psi, self.y_pos, self.delta])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*map(float, x))


@dataclass(frozen=True)
class VehicleInput:
    frx: float = 0.0
    ffx: float = 0.0
    delta_r: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.frx, self.ffx, self.delta_r])


def _xu(x, u=None):
    x = x.to_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)
    if u is None:
        return x
    u = u.to_array() if isinstance(u, VehicleInput) else np.asarray(u, dtype=float)
    return x, u


def tire_forces(p: VehicleParams, x) -> tuple[float, float, float, float]:
    """``(ffy, fry, alpha_f, alpha_r)`` from the linear tire model."""
    xp, yp, psip, _, _, delta = _xu(x)
    if not xp > 0:
        raise DomainError(f"longitudinal speed must be positive, got {xp}")
    alpha_f = delta - (psip * p.lf + yp) / xp
    alpha_r = (psip * p.lr - yp) / xp
    return p.cf * alpha_f, p.cr * alpha_r, alpha_f, alpha_r


def slip_angles(p: VehicleParams, x) -> np.ndarray:
    _, _, af, ar = tire_forces(p, x)
    return np.array([af, ar])


def slip_angle_jacobian(p: VehicleParams, x) -> np.ndarray:
    """``d[alpha_f, alpha_r] / dx``, shape (2, 6)."""
    xp, yp, psip, _, _, _ = _xu(x)
    jac = np.zeros((2, 6))
    jac[0] = [(psip * p.lf + yp) / xp**2, -1 / xp, -p.lf / xp, 0, 0, 1]
    jac[1] = [-(psip * p.lr - yp) / xp**2, -1 / xp, p.lr / xp, 0, 0, 0]
    return jac


def bicycle_dynamics(p: VehicleParams, x, u) -> np.ndarray:
    """State derivative of the bicycle model."""
    x, u = _xu(x, u)
    xp, yp, psip, psi, _, delta = x
    frx, ffx, delta_r = u
    ffy, fry, _, _ = tire_forces(p, x)
    sd, cdl = math.sin(delta), math.cos(delta)
    return np.array([
        (frx + ffx * cdl - ffy * sd - p.drag(xp)) / p.m + yp * psip,
        (ffx * sd + fry + ffy * cdl) / p.m - xp * psip,
        (ffx * p.lf * sd - fry * p.lr + ffy * p.lf * cdl) / p.iz,
        psip,
        xp * math.sin(psi) + yp * math.cos(psi),
        p.lambda_s * (delta_r - delta),
    ])


def dynamics_jacobians(p: VehicleParams, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(df/dx, df/du)``."""
    x, u = _xu(x, u)
    xp, yp, psip, psi, _, delta = x
    frx, ffx, delta_r = u
    ffy, fry, _, _ = tire_forces(p, x)
    sd, cdl = math.sin(delta), math.cos(delta)
    dz = slip_angle_jacobian(p, x)
    dffy = p.cf * dz[0]
    dfry = p.cr * dz[1]

    fx = np.zeros((6, 6))
    fx[0] = (-dffy * sd) / p.m
    fx[0, 0] += -p.rho * xp * p.af * p.cd / p.m
    fx[0, 1] += psip
    fx[0, 2] += yp
    fx[0, 5] += (-ffx * sd - ffy * cdl) / p.m

    fx[1] = (dfry + dffy * cdl) / p.m
    fx[1, 0] += -psip
    fx[1, 2] += -xp
    fx[1, 5] += (ffx * cdl - ffy * sd) / p.m

    fx[2] = (-dfry * p.lr + dffy * p.lf * cdl) / p.iz
    fx[2, 5] += (ffx * p.lf * cdl - ffy * p.lf * sd) / p.iz

    fx[3, 2] = 1.0
    fx[4, 0] = math.sin(psi)
    fx[4, 1] = math.cos(psi)
    fx[4, 3] = xp * math.cos(psi) - yp * math.sin(psi)
    fx[5, 5] = -p.lambda_s

    fu = np.zeros((6, 3))
    fu[0, 0] = 1 / p.m
    fu[0, 1] = cdl / p.m
    fu[1, 1] = sd / p.m
    fu[2, 1] = p.lf * sd / p.iz
    fu[5, 2] = p.lambda_s
    return fx, fu


class BicycleModel:
    """Callable dynamics ``f(x, u)`` with analytic Jacobians."""

    def __init__(self, params: VehicleParams | None = None):
        self.params = params or VehicleParams()

    def __call__(self, x, u) -> np.ndarray:
        return bicycle_dynamics(self.params, x, u)

    def jacobians(self, x, u):
        return dynamics_jacobians(self.params, x, u)

    def __repr__(self):
        return f"BicycleModel({self.params!r})"


def linearize(p: VehicleParams, x0=None, u0=None) -> StateSpace:
    """Jacobian linearization with full-state output (``C = I``, ``D = 0``)."""
    x0 = VehicleState() if x0 is None else x0
    u0 = VehicleInput() if u0 is None else u0
    a, b = dynamics_jacobians(p, x0, u0)
    return StateSpace(a, b, np.eye(6), np.zeros((6, 3)))


# --- sampling of perturbed plants ----------------------------------------------

@dataclass(frozen=True)
class UncertaintyRanges:
    """Half-widths (or one-sided offsets) of the sampled box.

    Parameter ranges are symmetric. ``xp_plus`` is one-sided (speed only
    increases) and ``ffx_minus``/``ffx_plus`` bound the front tractive force
    at the linearization point. With ``tire_common_factor`` the front and
    rear stiffness deviations are drawn as one shared relative factor.
    ``state_scale`` shrinks all linearization-point ranges.
    """

    m: float = 200.0
    iz: float = 200.0
    cf: float = 10e3
    cr: float = 10e3
    lambda_s: float = 2.0
    xp_plus: float = 5.0
    yp: float = 1.5
    psip: float = 0.15
    psi: float = 0.15
    delta: float = 0.06
    ffx_minus: float = 100.0
    ffx_plus: float = 2000.0
    tire_common_factor: bool = False
    state_scale: float = 1.0

    def zero(self) -> "UncertaintyRanges":
        return replace(self, m=0.0, iz=0.0, cf=0.0, cr=0.0, lambda_s=0.0, xp_plus=0.0, yp=0.0,
                       psip=0.0, psi=0.0, delta=0.0, ffx_minus=0.0, ffx_plus=0.0)


TABLE_I_RANGES = UncertaintyRanges()

N_SAMPLE_DIMS = 11


def _point_from_unit(nominal: VehicleParams, r: UncertaintyRanges, s: np.ndarray):
    """Map ``s`` in ``[0, 1]^11`` to (params, x0, u0)."""
    c = 2 * s - 1  # [-1, 1]
    params = replace(
        nominal,
        m=nominal.m + c[0] * r.m,
        iz=nominal.iz + c[1] * r.iz,
        cf=nominal.cf + c[2] * r.cf,
        cr=nominal.cr + (c[2] * r.cr if r.tire_common_factor else c[3] * r.cr),
        lambda_s=nominal.lambda_s + c[4] * r.lambda_s,
    )
    k = r.state_scale
    x0 = VehicleState(
        xp=25.0 + s[5] * r.xp_plus * k,
        yp=c[6] * r.yp * k,
        psip=c[7] * r.psip * k,
        psi=c[8] * r.psi * k,
        y_pos=0.0,
        delta=c[9] * r.delta * k,
    )
    u0 = VehicleInput(frx=0.0, ffx=(-r.ffx_minus + s[10] * (r.ffx_minus + r.ffx_plus)) * k)
    return params, x0, u0


def sample_points(nominal: VehicleParams, ranges: UncertaintyRanges, n: int, seed: int,
                  n_corners: int | None = None):
    """Deterministic list of ``(params, x0, u0)`` sampling points.

    The first ``n_corners`` points are distinct vertices of the box (drawn
    without replacement under ``seed``); the rest are uniform in the interior.
    ``n_corners`` defaults to ``n // 6``.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    if n_corners is None:
        n_corners = n // 6
    n_corners = min(n_corners, n, 2 ** N_SAMPLE_DIMS)
    picks = rng.choice(2 ** N_SAMPLE_DIMS, size=n_corners, replace=False) if n_corners else []
    units = [np.array([(int(v) >> j) & 1 for j in range(N_SAMPLE_DIMS)], float) for v in picks]
    units += list(rng.uniform(size=(n - n_corners, N_SAMPLE_DIMS)))
    return [_point_from_unit(nominal, ranges, s) for s in units]


def sample_plants(nominal: VehicleParams, ranges: UncertaintyRanges = TABLE_I_RANGES,
                  n: int = 60, seed: int = 0, n_corners: int | None = None) -> list[StateSpace]:
    """Linearizations at parameter/state values drawn from ``ranges``."""
    return [linearize(p, x0, u0) for p, x0, u0 in sample_points(nominal, ranges, n, seed, n_corners)]


def corner_points(nominal: VehicleParams, ranges: UncertaintyRanges):
    """All ``2**11`` vertices of the sampling box."""
    for bits in itertools.product((0.0, 1.0), repeat=N_SAMPLE_DIMS):
        yield _point_from_unit(nominal, ranges, np.array(bits))


__all__ = [
    "VehicleParams", "VehicleState", "VehicleInput", "DomainError", "BicycleModel",
    "tire_forces", "slip_angles", "slip_angle_jacobian", "bicycle_dynamics",
    "dynamics_jacobians", "linearize", "UncertaintyRanges", "TABLE_I_RANGES",
    "sample_points", "sample_plants", "corner_points", "STATE_NAMES", "INPUT_NAMES",
]
