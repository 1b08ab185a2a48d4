"""Gaussian-process models of the residual vehicle dynamics.

The residual between observed state derivatives and the nominal bicycle
model is learned per row (longitudinal, lateral and yaw acceleration) as a
function of the two slip angles ``z = (alpha_f, alpha_r)``. Only the
posterior mean is used; it enters the learned model
``f_l(x, u) = f_n(x, u) + [g1, g2, g3, 0, 0, 0]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .vehicle import BicycleModel, DomainError, VehicleParams, slip_angle_jacobian, slip_angles

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
RESIDUAL_ROWS = (0, 1, 2)
_LOG_2PI = math.log(2 * math.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpHyperParams:
    """Squared-exponential kernel hyperparameters, stored as logs."""

    log_sigma_f: float
    log_l1: float
    log_l2: float
    log_sigma_eps: float

    @classmethod
    def from_values(cls, sigma_f, l1, l2, sigma_eps) -> "GpHyperParams":
        with np.errstate(divide="ignore"):
            return cls(*(float(np.log(v)) for v in (sigma_f, l1, l2, sigma_eps)))

    @classmethod
    def from_array(cls, theta) -> "GpHyperParams":
        return cls(*map(float, theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.log_sigma_f, self.log_l1, self.log_l2, self.log_sigma_eps])

    @property
    def sigma_f(self) -> float:
        return math.exp(self.log_sigma_f)

    @property
    def lengths(self) -> np.ndarray:
        return np.exp([self.log_l1, self.log_l2])

    @property
    def sigma_eps(self) -> float:
        return math.exp(self.log_sigma_eps) if self.log_sigma_eps > -np.inf else 0.0

    def to_dict(self) -> dict:
        return {"sigma_f": self.sigma_f, "l1": float(self.lengths[0]),
                "l2": float(self.lengths[1]), "sigma_eps": self.sigma_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "GpHyperParams":
        return cls.from_values(d["sigma_f"], d["l1"], d["l2"], d["sigma_eps"])


def gram(z1, z2, hyper: GpHyperParams) -> np.ndarray:
    """Kernel matrix between the rows of ``z1`` and ``z2``."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    diff = (z1[:, None, :] - z2[None, :, :]) / hyper.lengths
    return hyper.sigma_f**2 * np.exp(-0.5 * np.sum(diff**2, axis=-1))


def kernel(z1, z2, hyper: GpHyperParams) -> float:
    """``sigma_f^2 exp(-(z1 - z2)^T L^-1 (z1 - z2) / 2)`` with ``L = diag(l1^2, l2^2)``."""
    return float(gram(z1, z2, hyper)[0, 0])


def _cholesky(k: np.ndarray):
    """Cholesky factor of ``k``, adding diagonal jitter from the ladder if needed."""
    eye = np.eye(len(k))
    for jitter in JITTER_LADDER:
        try:
            return scipy.linalg.cho_factor(k + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(
        f"kernel matrix is not positive definite even with jitter {JITTER_LADDER[-1]:g}"
    )


def _covariance(features, hyper: GpHyperParams):
    kf = gram(features, features, hyper)
    return kf, kf + hyper.sigma_eps**2 * np.eye(len(kf))


def log_marginal_likelihood(features, targets, hyper: GpHyperParams) -> float:
    """``-t^T K^-1 t / 2 - log|K| / 2 - n log(2 pi) / 2`` with ``K = K_zz + sigma_eps^2 I``."""
    t = np.asarray(targets, dtype=float)
    _, k = _covariance(features, hyper)
    cf, _ = _cholesky(k)
    alpha = scipy.linalg.cho_solve(cf, t)
    return float(-0.5 * t @ alpha - np.sum(np.log(np.diag(cf[0]))) - 0.5 * len(t) * _LOG_2PI)


def _lml_and_gradient(sq, t, hyper: GpHyperParams):
    """LML and its log-space gradient from cached squared differences ``sq`` (2, n, n)."""
    l2 = hyper.lengths**2
    s1, s2 = sq[0] / l2[0], sq[1] / l2[1]
    kf = hyper.sigma_f**2 * np.exp(-0.5 * (s1 + s2))
    k = kf + hyper.sigma_eps**2 * np.eye(len(t))
    cf, _ = _cholesky(k)
    alpha = scipy.linalg.cho_solve(cf, t)
    lml = float(-0.5 * t @ alpha - np.sum(np.log(np.diag(cf[0]))) - 0.5 * len(t) * _LOG_2PI)
    kinv, info = scipy.linalg.lapack.dpotri(cf[0], lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(f"inverse from Cholesky factor failed (info={info})")
    kinv = np.tril(kinv) + np.tril(kinv, -1).T
    w = np.outer(alpha, alpha) - kinv
    wk = w * kf
    grad = np.array([
        np.sum(wk),
        0.5 * np.sum(wk * s1),
        0.5 * np.sum(wk * s2),
        np.trace(w) * hyper.sigma_eps**2,
    ])
    return lml, grad


def _sq_diffs(z: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis((z[:, None, :] - z[None, :, :]) ** 2, -1, 0))


def lml_gradient(features, targets, hyper: GpHyperParams) -> np.ndarray:
    """Gradient of the log marginal likelihood in log-hyperparameter space.

    Each component is ``tr((a a^T - K^-1) dK/dtheta) / 2`` with
    ``a = K^-1 t``.
    """
    z = np.atleast_2d(np.asarray(features, dtype=float))
    return _lml_and_gradient(_sq_diffs(z), np.asarray(targets, dtype=float), hyper)[1]


def _initial_guess(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    sf = max(float(np.std(t)), 1e-6)
    ls = np.maximum(np.std(z, axis=0), 1e-6)
    return np.log([sf, ls[0], ls[1], 0.1 * sf])


def _adam_ascent(fun_grad, theta, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    best = (-np.inf, theta.copy())
    for i in range(1, steps + 1):
        val, g = fun_grad(theta)
        if val > best[0]:
            best = (val, theta.copy())
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta = theta + lr * (m / (1 - beta1**i)) / (np.sqrt(v / (1 - beta2**i)) + eps)
    val, _ = fun_grad(theta)
    return (val, theta) if val > best[0] else best


def fit_hyperparameters(features, targets, restarts: int = 3, seed: int = 0, steps: int = 500,
                        lr: float = 0.05, polish: bool = True) -> GpHyperParams:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Parameters
    ----------
    features : (n, 2) array_like
    targets : (n,) array_like
    restarts : int
        Starts after the data-driven first guess; each is the guess plus
        seeded Gaussian noise (std 1) in log space.
    seed : int
    steps, lr : int, float
        Adam budget per start.
    polish : bool
        Finish the best start with L-BFGS on the same analytic gradient.

    Returns
    -------
    GpHyperParams
    """
    z = np.atleast_2d(np.asarray(features, dtype=float))
    t = np.asarray(targets, dtype=float)
    if len(t) < 2 or len(z) != len(t):
        raise ValueError("need at least two aligned feature/target pairs")
    rng = np.random.default_rng(seed)
    # cap log-params to keep the Gram matrix representable during the search
    lo, hi = np.array([-12.0, -12.0, -12.0, -16.0]), np.array([12.0, 8.0, 8.0, 8.0])

    sq = _sq_diffs(z)

    def fun_grad(theta):
        h = GpHyperParams.from_array(np.clip(theta, lo, hi))
        try:
            return _lml_and_gradient(sq, t, h)
        except NotPositiveDefiniteError:
            return -np.inf, np.zeros(4)

    guess = _initial_guess(z, t)
    starts = [guess] + [guess + rng.standard_normal(4) for _ in range(restarts)]
    results = [_adam_ascent(fun_grad, s.copy(), steps, lr) for s in starts]
    results = [r for r in results if np.isfinite(r[0])]
    if not results:
        raise NotPositiveDefiniteError("every hyperparameter restart hit a non-PD kernel matrix")
    val, theta = max(results, key=lambda r: r[0])
    theta = np.clip(theta, lo, hi)
    if polish:
        def neg(th):
            v, g = fun_grad(th)
            return (1e300, np.zeros(4)) if not np.isfinite(v) else (-v, -g)

        res = scipy.optimize.minimize(neg, theta, jac=True, method="L-BFGS-B",
                                      bounds=list(zip(lo, hi)),
                                      options={"maxiter": 500, "gtol": 1e-9, "ftol": 1e-15})
        if -res.fun >= val:
            theta = res.x
    return GpHyperParams.from_array(theta)


@dataclass(frozen=True)
class GpModel:
    """Posterior-mean predictor for one residual row."""

    hyper: GpHyperParams
    features: np.ndarray
    alpha_weights: np.ndarray
    target_dim: int

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.features, dtype=float)).copy()
        a = np.asarray(self.alpha_weights, dtype=float).ravel().copy()
        if len(z) != len(a):
            raise ValueError("one alpha weight per training feature is required")
        z.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "features", z)
        object.__setattr__(self, "alpha_weights", a)

    @classmethod
    def fit(cls, features, targets, hyper: GpHyperParams, target_dim: int) -> "GpModel":
        _, k = _covariance(features, hyper)
        cf, _ = _cholesky(k)
        return cls(hyper, features, scipy.linalg.cho_solve(cf, np.asarray(targets, float)), target_dim)

    def to_dict(self) -> dict:
        return {"hyper": self.hyper.to_dict(), "features": self.features.tolist(),
                "alpha_weights": self.alpha_weights.tolist(), "target_dim": self.target_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        return cls(GpHyperParams.from_dict(d["hyper"]), np.asarray(d["features"], float),
                   np.asarray(d["alpha_weights"], float), int(d["target_dim"]))


def predict_mean(model: GpModel, z) -> np.ndarray | float:
    """``k(z, Z) alpha``; scalar for a single 2-vector, array for rows of ``z``."""
    z = np.asarray(z, dtype=float)
    out = gram(np.atleast_2d(z), model.features, model.hyper) @ model.alpha_weights
    return float(out[0]) if z.ndim == 1 else out


def predict_mean_gradient(model: GpModel, z) -> np.ndarray:
    """``d mean / dz`` at a single point."""
    z = np.asarray(z, dtype=float)
    kz = gram(z, model.features, model.hyper)[0]
    diff = (z[None, :] - model.features) / model.hyper.lengths**2
    return -(kz * model.alpha_weights) @ diff


# --- data -----------------------------------------------------------------

@dataclass(frozen=True)
class ResidualDataset:
    """Consecutive samples ``x[i], u[i] -> x[i+1]`` taken ``ts`` apart."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    ts: float

    def __post_init__(self):
        x, u, xn = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.x, self.u, self.x_next))
        if not (len(x) == len(u) == len(xn)) or x.shape[1] != 6 or u.shape[1] != 3:
            raise ValueError("dataset needs aligned (n, 6) states, (n, 3) inputs and (n, 6) successors")
        if len(x) < 2:
            raise ValueError("dataset needs at least two points")
        if self.ts <= 0:
            raise ValueError("sample period must be positive")
        for name, a in (("x", x), ("u", u), ("x_next", xn)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_trajectory(cls, states, inputs, ts: float) -> "ResidualDataset":
        """From ``N + 1`` states and at least ``N`` inputs of one run."""
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        n = len(states) - 1
        return cls(states[:-1], inputs[:n], states[1:], ts)

    def to_csv(self) -> str:
        """Columns ``t, x0..x5, u0..u2``; the last row repeats the final input."""
        states = np.vstack([self.x, self.x_next[-1:]])
        inputs = np.vstack([self.u, self.u[-1:]])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i}" for i in range(6)] + [f"u{i}" for i in range(3)])
        for i, (x, u) in enumerate(zip(states, inputs)):
            w.writerow([repr(i * self.ts)] + [repr(float(v)) for v in (*x, *u)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResidualDataset":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        ts = float(data[1, 0] - data[0, 0])
        return cls.from_trajectory(data[:, 1:7], data[:-1, 7:10], ts)


def build_targets(ds: ResidualDataset, f_n, params: VehicleParams | None = None):
    """Slip-angle features and derivative-space residual targets.

    Returns
    -------
    features : (n, 2) ndarray
    targets : list of three (n,) ndarrays
        ``(x[i+1] - x[i]) / ts - f_n(x[i], u[i])`` for the longitudinal,
        lateral and yaw rows.
    """
    if params is None:
        params = getattr(f_n, "params", VehicleParams())
    if np.any(ds.x[:, 0] <= 0):
        raise DomainError("dataset contains a non-positive longitudinal speed")
    feats = np.array([slip_angles(params, x) for x in ds.x])
    fn = np.array([f_n(x, u) for x, u in zip(ds.x, ds.u)])
    resid = (ds.x_next - ds.x) / ds.ts - fn
    return feats, [resid[:, r].copy() for r in RESIDUAL_ROWS]


def fit_residual_models(ds: ResidualDataset, f_n, restarts: int = 3, seed: int = 0,
                        steps: int = 500, lr: float = 0.05) -> list[GpModel]:
    """One GP per residual row; each row gets its own derived seed."""
    feats, targets = build_targets(ds, f_n)
    models = []
    for d, t in zip(RESIDUAL_ROWS, targets):
        hyper = fit_hyperparameters(feats, t, restarts, seed * 7919 + d, steps, lr)
        models.append(GpModel.fit(feats, t, hyper, d))
    return models


class LearnedDynamics:
    """``f_n`` plus GP residual means on the first three state rows."""

    def __init__(self, f_n: BicycleModel, models):
        models = list(models)
        if sorted(m.target_dim for m in models) != list(RESIDUAL_ROWS):
            raise ValueError("need one residual model for each of rows 0, 1, 2")
        self.f_n = f_n
        self.params = f_n.params
        self.models = sorted(models, key=lambda m: m.target_dim)

    def residual(self, x) -> np.ndarray:
        z = slip_angles(self.params, x)
        out = np.zeros(6)
        for m in self.models:
            out[m.target_dim] = predict_mean(m, z)
        return out

    def __call__(self, x, u) -> np.ndarray:
        return self.f_n(x, u) + self.residual(x)

    def jacobians(self, x, u):
        fx, fu = self.f_n.jacobians(x, u)
        z = slip_angles(self.params, x)
        dz = slip_angle_jacobian(self.params, x)
        fx = fx.copy()
        for m in self.models:
            fx[m.target_dim] += predict_mean_gradient(m, z) @ dz
        return fx, fu

    def to_dict(self) -> dict:
        return {"models": [m.to_dict() for m in self.models]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, f_n: BicycleModel, d: dict) -> "LearnedDynamics":
        return cls(f_n, [GpModel.from_dict(m) for m in d["models"]])


def learned_dynamics(f_n: BicycleModel, models) -> LearnedDynamics:
    return LearnedDynamics(f_n, models)
