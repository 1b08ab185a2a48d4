"""Frequency-wise model-error bounds and low-order cover weights.

Sampled plants ``G_s`` are described relative to the nominal ``G`` as
``G_s = G (I + Delta_s)`` at the input. The bound ``b(w)`` is the largest
``sigma_max(G^+ (G_s - G))`` over samples, and `fit_cover` returns a stable,
minimum-phase scalar ``w(s)`` with ``|w(jw)| >= (1 + margin) b(w)``.

An optional diagonal input scaling ``D`` measures the error as
``D^-1 G^+ (G_s - G) D``. This does not change the represented set (the
scaling commutes with a scalar weight) but balances inputs with very
different units, such as forces in N and a steering angle in rad.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lti import DEFAULT_GRID, FrequencyGrid, StateSpace, append, freqresp, is_stable

RANK_TOL = 1e-10


class RankDeficientResponseError(np.linalg.LinAlgError):
    pass


class CoverFitError(ValueError):
    pass


class CoverWarning(UserWarning):
    pass


def _omegas(grid) -> np.ndarray:
    return grid.omegas if isinstance(grid, FrequencyGrid) else np.asarray(grid, dtype=float)


def _pinv_response(g_nom: StateSpace, omegas: np.ndarray, require_full_rank: bool) -> np.ndarray:
    gn = freqresp(g_nom, omegas)
    u, s, vh = np.linalg.svd(gn, full_matrices=False)
    keep = s > RANK_TOL * s[:, :1]
    if require_full_rank and (s.shape[1] < gn.shape[2] or not np.all(keep)):
        bad = ~np.all(keep, axis=1)
        w = omegas[np.argmax(bad)]
        raise RankDeficientResponseError(
            f"nominal response is not full column rank at omega={w:.6g} rad/s"
        )
    sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.conj(np.swapaxes(vh, 1, 2)) * sinv[:, None, :] @ np.conj(np.swapaxes(u, 1, 2))


def relative_errors(g_nom: StateSpace, plants, grid=DEFAULT_GRID, *,
                    require_full_rank: bool = False) -> np.ndarray:
    """``G^+(jw) (G_s(jw) - G(jw))`` for every sample, shape (S, N, m, m).

    ``G^+`` is the Moore-Penrose pseudoinverse with singular values below
    ``RANK_TOL`` times the largest treated as zero. The vehicle model at zero
    steering angle has identical front and rear traction columns, so its
    response is structurally rank deficient; pass ``require_full_rank`` to
    reject such plants instead.
    """
    plants = list(plants)
    if not plants:
        raise ValueError("need at least one sampled plant")
    omegas = _omegas(grid)
    pinv = _pinv_response(g_nom, omegas, require_full_rank)
    gn = freqresp(g_nom, omegas)
    return np.stack([pinv @ (freqresp(p, omegas) - gn) for p in plants])


def scaled_bound(errors: np.ndarray, scaling) -> np.ndarray:
    """Pointwise max over samples of ``sigma_max(D^-1 E D)``; ``scaling=None`` means ``D = I``."""
    if scaling is not None:
        d = np.asarray(scaling, dtype=float)
        errors = errors * d[None, None, None, :] / d[None, None, :, None]
    return np.linalg.norm(errors, 2, axis=(2, 3)).max(axis=0)


def relative_error_samples(g_nom: StateSpace, plants, grid=DEFAULT_GRID,
                           input_scaling=None, *, require_full_rank: bool = False) -> np.ndarray:
    """Largest relative input error over ``plants`` at each grid frequency.

    Parameters
    ----------
    g_nom : StateSpace
        Nominal plant; its response must have full column rank on the grid.
    plants : iterable of StateSpace
        Sampled plants with the same input/output dimensions.
    grid : FrequencyGrid or array_like
    input_scaling : array_like, optional
        Diagonal ``D``; the error is measured as ``D^-1 E D``.
    require_full_rank : bool
        Raise `RankDeficientResponseError` instead of truncating the
        pseudoinverse.

    Returns
    -------
    ndarray
        ``b(w)``, one value per grid point.
    """
    errors = relative_errors(g_nom, plants, grid, require_full_rank=require_full_rank)
    return scaled_bound(errors, input_scaling)


def balance_input_scaling(errors: np.ndarray, inputs=(2,), candidates=None):
    """Scale factor on ``inputs`` that minimizes the peak of ``b(w)``.

    Returns ``(scaling, peak)`` where ``scaling`` is the full diagonal.
    Ties favour the candidate closest to 1.
    """
    m = errors.shape[-1]
    if candidates is None:
        candidates = np.logspace(-8, 2, 41)
    best = None
    for c in sorted(candidates, key=lambda v: abs(np.log(v))):
        d = np.ones(m)
        d[list(inputs)] = c
        peak = float(scaled_bound(errors, d).max())
        if best is None or peak < best[1] * (1 - 1e-12):
            best = (d, peak)
    return best


# --- cover fitting ---------------------------------------------------------

def _section(z: float, p: float) -> StateSpace:
    """``(s + z) / (s + p)``."""
    return StateSpace([[-p]], [[1.0]], [[z - p]], [[1.0]])


@dataclass(frozen=True)
class UncertaintyWeight:
    """Scalar cover ``w(s)`` repeated on every plant input.

    ``sections`` holds the ``(zero, pole)`` pairs of ``w = gain * prod (s+z)/(s+p)``.
    """

    gain: float
    sections: tuple = ()
    input_scaling: np.ndarray | None = None
    margin: float = 0.0
    n_inputs: int = 3

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple((float(z), float(p)) for z, p in self.sections))
        if self.input_scaling is not None:
            d = np.asarray(self.input_scaling, dtype=float).copy()
            if d.shape != (self.n_inputs,) or np.any(d <= 0):
                raise ValueError("input scaling must be positive with one entry per input")
            d.setflags(write=False)
            object.__setattr__(self, "input_scaling", d)
        if self.gain < 0 or any(z <= 0 or p <= 0 for z, p in self.sections):
            raise ValueError("cover weight must have a nonnegative gain and left-half-plane roots")

    @property
    def order(self) -> int:
        return len(self.sections)

    @property
    def w(self) -> StateSpace:
        """The scalar weight as a 1x1 state-space model."""
        sys = StateSpace.gain([[self.gain]])
        for z, p in self.sections:
            s = _section(z, p)
            sys = StateSpace(
                np.block([[sys.a, np.zeros((sys.nstates, 1))], [s.b @ sys.c, s.a]]),
                np.vstack([sys.b, s.b @ sys.d]),
                np.hstack([s.d @ sys.c, s.c]),
                s.d @ sys.d,
            )
        return sys

    def magnitude(self, omegas) -> np.ndarray:
        w = np.asarray(omegas, dtype=float)
        mag = np.full(w.shape, self.gain)
        for z, p in self.sections:
            mag = mag * np.sqrt((w**2 + z**2) / (w**2 + p**2))
        return mag

    def _scaling(self) -> np.ndarray:
        return np.ones(self.n_inputs) if self.input_scaling is None else self.input_scaling

    @property
    def w1(self) -> StateSpace:
        """``w * D`` on the plant inputs."""
        base = self.w
        return append(*[StateSpace(base.a, base.b, base.c * di, base.d * di) for di in self._scaling()])

    @property
    def w2(self) -> StateSpace:
        """``D^-1``; the identity without input scaling."""
        return StateSpace.gain(np.diag(1.0 / self._scaling()))

    def to_dict(self) -> dict:
        return {
            "w": self.w.to_dict(),
            "gain": self.gain,
            "sections": [list(s) for s in self.sections],
            "input_scaling": None if self.input_scaling is None else self.input_scaling.tolist(),
            "margin": self.margin,
            "n_inputs": self.n_inputs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UncertaintyWeight":
        return cls(float(data["gain"]), tuple(tuple(s) for s in data.get("sections", [])),
                   data.get("input_scaling"), float(data.get("margin", 0.0)),
                   int(data.get("n_inputs", 3)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "UncertaintyWeight":
        return cls.from_dict(json.loads(text))


def _root_candidates(omegas: np.ndarray, n: int) -> np.ndarray:
    lo, hi = np.log10(omegas.min()) - 1, np.log10(omegas.max()) + 1
    return np.logspace(lo, hi, n)


def _shape_fit(logb: np.ndarray, lsec: np.ndarray):
    """Gain and mean excess of the tightest cover with log-shape ``lsec``."""
    shift = np.max(logb - lsec, axis=-1)
    excess = np.mean(lsec, axis=-1) + shift
    return shift, excess


def fit_cover(b, omegas, order: int = 2, margin: float = 0.05, *, n_candidates: int = 49,
              sweeps: int = 4, max_excess: float = 100.0, input_scaling=None,
              n_inputs: int = 3) -> UncertaintyWeight:
    """Fit a stable, minimum-phase scalar weight over the bound ``b``.

    Parameters
    ----------
    b, omegas : array_like
        Bound samples and their frequencies.
    order : {0, 1, 2}
        Number of first-order ``(s+z)/(s+p)`` sections.
    margin : float
        Relative head-room; the fit covers ``(1 + margin) b``.
    n_candidates : int
        Log-spaced zero/pole candidates spanning the grid plus a decade.
    sweeps : int
        Coordinate-search passes for order 2.
    max_excess : float
        Largest tolerated ratio ``|w| / ((1 + margin) b)``; a fit that
        overshoots more than this somewhere is rejected.

    Returns
    -------
    UncertaintyWeight

    Notes
    -----
    The shape minimizes the mean log-magnitude excess over the grid with
    the gain shifted up to touch the target. The margin only shifts the
    target by a constant, so the chosen shape does not depend on it and
    larger margins scale ``|w|`` up uniformly.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"cover order must be 0, 1 or 2, got {order}")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    b = np.asarray(b, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    if b.shape != omegas.shape or not np.all(np.isfinite(b)) or np.any(b < 0):
        raise ValueError("bound samples must be finite, nonnegative and aligned with omegas")
    kw = dict(input_scaling=input_scaling, margin=margin, n_inputs=n_inputs)
    pos = b > 0
    if not np.any(pos):
        return UncertaintyWeight(0.0, (), **kw)
    # the shape search ignores the margin so it cannot change the chosen shape
    logb = np.log(b[pos])
    w2 = omegas[pos] ** 2

    sections: list = []
    if order >= 1:
        cand = _root_candidates(omegas, n_candidates)
        lc = 0.5 * np.log(w2[None, :] + cand[:, None] ** 2)  # (K, N)
        # order 1: exhaustive over (zero, pole)
        lsec = lc[:, None, :] - lc[None, :, :]
        _, exc = _shape_fit(logb, lsec)
        i, j = np.unravel_index(np.argmin(exc), exc.shape)
        sections = [(int(i), int(j))]
        if order == 2:
            sections.append((0, 0))  # starts as a unit section
            for _ in range(sweeps):
                before = list(sections)
                for s in range(2):
                    oi, oj = sections[1 - s]
                    other = lc[oi] - lc[oj]
                    _, exc = _shape_fit(logb, lsec + other)
                    sections[s] = tuple(int(v) for v in np.unravel_index(np.argmin(exc), exc.shape))
                if sections == before:
                    break
        lshape = sum(lc[i] - lc[j] for i, j in sections)
        sections = [(cand[i], cand[j]) for i, j in sections]
        # cancelled pairs carry no dynamics
        sections = [(z, p) for z, p in sections if z != p]
    else:
        lshape = np.zeros_like(logb)
    shift, _ = _shape_fit(logb, lshape)
    worst = float(np.max(lshape + shift - logb))
    shift += np.log1p(margin)
    if worst > np.log(max_excess):
        raise CoverFitError(
            f"order-{order} weight overshoots the bound by {np.exp(worst):.3g}x somewhere; "
            "try a higher order"
        )
    # relative nudge so the touching grid point survives round-off
    return UncertaintyWeight(float(np.exp(shift)) * (1 + 1e-10), tuple(sections), **kw)


@dataclass(frozen=True)
class CoverCheck:
    worst_ratio: float  # max b / |w|; <= 1 means covered
    omega: float
    n_points: int
    violations: int = field(default=0)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def check_cover(weight: UncertaintyWeight, b, omegas) -> CoverCheck:
    b = np.asarray(b, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    mag = weight.magnitude(omegas)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(b > 0, b / mag, 0.0)
    ratio = np.nan_to_num(ratio, nan=np.inf, posinf=np.inf)
    i = int(np.argmax(ratio))
    return CoverCheck(float(ratio[i]), float(omegas[i]), len(omegas), int(np.sum(ratio > 1.0)))


def verify_cover(weight: UncertaintyWeight, g_nom: StateSpace, plants, grid=DEFAULT_GRID,
                 factor: int = 3) -> CoverCheck:
    """Re-check the cover on a ``factor``-times denser grid; warn on violations."""
    if not is_stable(weight.w):
        raise ValueError("cover weight is unstable")
    grid = grid if isinstance(grid, FrequencyGrid) else FrequencyGrid(_omegas(grid))
    dense = grid.densified(factor)
    b = relative_error_samples(g_nom, plants, dense, weight.input_scaling)
    res = check_cover(weight, b, dense.omegas)
    if not res.ok:
        warnings.warn(
            f"cover violated at {res.violations} of {res.n_points} dense-grid points; "
            f"worst ratio {res.worst_ratio:.4g} at omega={res.omega:.4g} rad/s",
            CoverWarning, stacklevel=2,
        )
    return res


def bound_csv(omegas, b, weight: UncertaintyWeight | None = None) -> str:
    """CSV with columns ``omega, bound, fitted_magnitude``."""
    omegas = np.asarray(omegas, dtype=float)
    mag = weight.magnitude(omegas) if weight is not None else np.full(omegas.shape, np.nan)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["omega", "bound", "fitted_magnitude"])
    for row in zip(omegas, b, mag):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
