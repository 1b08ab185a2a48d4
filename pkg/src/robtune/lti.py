"""State-space algebra for continuous-time LTI systems.

Realizations, frequency response, interconnections, the lower linear
fractional transformation, spectral abscissa, maximum singular value and a
gridded H-infinity norm estimate. Everything here is a pure function of its
inputs; `StateSpace` instances are treated as immutable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .controller import Controller


class DimensionError(ValueError):
    """Raised when matrix partitions do not line up."""


class SingularResolventError(ArithmeticError):
    """Raised when ``jw`` coincides with an eigenvalue of ``A``."""


class UnstableSystemError(ArithmeticError):
    """Raised when a norm is requested for a system outside RH-infinity."""


def _as_matrix(m, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.size == 0:
        arr = arr.reshape(rows if rows is not None else 0, cols if cols is not None else 0)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class StateSpace:
    """Continuous-time realization ``x' = a x + b u``, ``y = c x + d u``.

    ``n = 0`` is allowed and represents the static gain ``d``.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        d = _as_matrix(self.d)
        p, m = d.shape
        a = np.asarray(self.a, dtype=float)
        n = a.shape[0] if a.size else 0
        a = _as_matrix(a, n, n)
        b = _as_matrix(self.b, n, m)
        c = _as_matrix(self.c, p, n)
        if a.shape != (n, n) or b.shape != (n, m) or c.shape != (p, n):
            raise DimensionError(
                f"inconsistent realization: a{a.shape} b{b.shape} c{c.shape} d{d.shape}"
            )
        for name, arr in zip("abcd", (a, b, c, d)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def nstates(self) -> int:
        return self.a.shape[0]

    @property
    def ninputs(self) -> int:
        return self.d.shape[1]

    @property
    def noutputs(self) -> int:
        return self.d.shape[0]

    @classmethod
    def gain(cls, d) -> "StateSpace":
        d = _as_matrix(d)
        return cls(np.zeros((0, 0)), np.zeros((0, d.shape[1])), np.zeros((d.shape[0], 0)), d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "abcd"}

    @classmethod
    def from_dict(cls, data: dict) -> "StateSpace":
        d = _as_matrix(data["d"])
        n = len(data["a"])
        return cls(
            _as_matrix(data["a"], n, n),
            _as_matrix(data["b"], n, d.shape[1]),
            _as_matrix(data["c"], d.shape[0], n),
            d,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "StateSpace":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GeneralizedPlant:
    """Plant with exogenous (``w``) and control (``u``) inputs and
    performance (``z``) and measured (``e``) outputs. ``d22`` is zero."""

    a: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    d11: np.ndarray
    d12: np.ndarray
    d21: np.ndarray
    d22: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        a = _as_matrix(self.a)
        n = a.shape[0]
        d11 = _as_matrix(self.d11)
        nz, nw = d11.shape
        d12 = _as_matrix(self.d12)
        d21 = _as_matrix(self.d21)
        nu = d12.shape[1]
        ne = d21.shape[0]
        blocks = {
            "a": (_as_matrix(a, n, n), (n, n)),
            "b1": (_as_matrix(self.b1, n, nw), (n, nw)),
            "b2": (_as_matrix(self.b2, n, nu), (n, nu)),
            "c1": (_as_matrix(self.c1, nz, n), (nz, n)),
            "c2": (_as_matrix(self.c2, ne, n), (ne, n)),
            "d11": (d11, (nz, nw)),
            "d12": (d12, (nz, nu)),
            "d21": (d21, (ne, nw)),
        }
        for name, (arr, shape) in blocks.items():
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.d22 is not None:
            d22 = np.asarray(self.d22, dtype=float)
            if d22.size and np.any(d22 != 0):
                raise DimensionError("d22 must be identically zero")
        object.__setattr__(self, "d22", None)

    @property
    def nstates(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b2.shape[1]

    @property
    def n_e(self) -> int:
        return self.c2.shape[0]


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing positive frequencies in rad/s."""

    omegas: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omegas, dtype=float).ravel()
        if w.size == 0:
            raise ValueError("frequency grid is empty")
        if np.any(w <= 0) or np.any(np.diff(w) <= 0):
            raise ValueError("frequency grid must be positive and strictly increasing")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "omegas", w)

    @classmethod
    def logspace(cls, lo: float = 1e-3, hi: float = 1e3, n: int = 600) -> "FrequencyGrid":
        return cls(np.logspace(math.log10(lo), math.log10(hi), n))

    def densified(self, factor: int = 3) -> "FrequencyGrid":
        """Same span with ``factor`` times as many log-spaced points."""
        w = self.omegas
        return FrequencyGrid.logspace(w[0], w[-1], factor * len(w))

    def __len__(self):
        return len(self.omegas)


DEFAULT_GRID = FrequencyGrid.logspace()


def _check_resolvent(a: np.ndarray, omegas: np.ndarray, eigs: np.ndarray | None = None):
    if a.shape[0] == 0:
        return
    if eigs is None:
        eigs = np.linalg.eigvals(a)
    scale = 1.0 + np.linalg.norm(a, 1)
    dist = np.abs(1j * np.asarray(omegas)[:, None] - eigs[None, :])
    bad = np.nonzero(dist.min(axis=1) <= 1e-12 * scale)[0]
    if bad.size:
        raise SingularResolventError(
            f"jw - A is singular at omega={float(np.asarray(omegas)[bad[0]])!r}"
        )


def frequency_response(sys: StateSpace, omega: float) -> np.ndarray:
    """Evaluate ``C (jwI - A)^-1 B + D`` at one frequency."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    return freqresp(sys, np.array([omega]))[0]


def freqresp(sys: StateSpace, omegas: Sequence[float], *, check: bool = True) -> np.ndarray:
    """Stacked frequency response, shape ``(len(omegas), p, m)``."""
    w = np.asarray(omegas, dtype=float).ravel()
    n = sys.nstates
    out = np.broadcast_to(sys.d.astype(complex), (w.size,) + sys.d.shape).copy()
    if n == 0:
        return out
    if check:
        _check_resolvent(sys.a, w)
    res = 1j * w[:, None, None] * np.eye(n) - sys.a
    try:
        x = np.linalg.solve(res, np.broadcast_to(sys.b, (w.size,) + sys.b.shape))
    except np.linalg.LinAlgError as exc:
        raise SingularResolventError(str(exc)) from exc
    return out + sys.c @ x


def max_singular_value(m) -> float:
    """Largest singular value of a (complex) matrix."""
    m = np.asarray(m)
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[0])


def spectral_abscissa(m) -> float:
    """Largest real part over the eigenvalues of a square matrix.

    An empty matrix has no eigenvalues; ``-inf`` is returned.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"spectral abscissa needs a square matrix, got {m.shape}")
    if m.shape[0] == 0:
        return -math.inf
    return float(np.max(np.linalg.eigvals(m).real))


def is_stable(sys: StateSpace) -> bool:
    return spectral_abscissa(sys.a) < 0


def sigma_sweep(sys: StateSpace, omegas: Sequence[float]) -> np.ndarray:
    """``sigma_max(G(jw))`` over a set of frequencies, no stability check."""
    resp = freqresp(sys, omegas, check=False)
    if resp.shape[1] == 0 or resp.shape[2] == 0:
        return np.zeros(len(resp))
    return np.linalg.svd(resp, compute_uv=False)[:, 0]


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(fun, lo: float, hi: float, iters: int) -> tuple[float, float]:
    # search in log-frequency
    a, b = math.log(lo), math.log(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(math.exp(c)), fun(math.exp(d))
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(math.exp(d))
    return (math.exp(c), fc) if fc >= fd else (math.exp(d), fd)


def refine_peak(sys: StateSpace, omegas: np.ndarray, values: np.ndarray, idx: int,
                iters: int = 20) -> tuple[float, float]:
    """Golden-section refinement of a grid local maximum between its neighbours."""
    lo = omegas[max(idx - 1, 0)]
    hi = omegas[min(idx + 1, len(omegas) - 1)]
    best_w, best_v = float(omegas[idx]), float(values[idx])
    if hi > lo:
        w, v = _golden_max(lambda om: float(sigma_sweep(sys, [om])[0]), lo, hi, iters)
        if v > best_v:
            best_w, best_v = w, v
    return best_v, best_w


def hinf_norm(sys: StateSpace, grid: FrequencyGrid = DEFAULT_GRID,
              refine_iters: int = 20) -> tuple[float, float]:
    """Grid estimate of ``sup_w sigma_max(G(jw))`` with local refinement.

    Returns ``(value, omega_peak)``. Raises `UnstableSystemError` for
    systems with a closed right-half-plane pole.
    """
    if sys.nstates and spectral_abscissa(sys.a) >= 0:
        raise UnstableSystemError("H-infinity norm undefined for an unstable system")
    w = grid.omegas
    vals = sigma_sweep(sys, w)
    i = int(np.argmax(vals))
    if sys.nstates == 0:
        return float(vals[i]), float(w[i])
    return refine_peak(sys, w, vals, i, refine_iters)


# --- interconnections -------------------------------------------------------

def series(sys1: StateSpace, sys2: StateSpace) -> StateSpace:
    """``sys2 * sys1``: the output of ``sys1`` feeds ``sys2``."""
    if sys1.noutputs != sys2.ninputs:
        raise DimensionError(
            f"series: sys1 has {sys1.noutputs} outputs, sys2 has {sys2.ninputs} inputs"
        )
    n1, n2 = sys1.nstates, sys2.nstates
    a = np.block([
        [sys1.a, np.zeros((n1, n2))],
        [sys2.b @ sys1.c, sys2.a],
    ])
    b = np.vstack([sys1.b, sys2.b @ sys1.d])
    c = np.hstack([sys2.d @ sys1.c, sys2.c])
    d = sys2.d @ sys1.d
    return StateSpace(a, b, c, d)


def parallel(sys1: StateSpace, sys2: StateSpace) -> StateSpace:
    """``sys1 + sys2``."""
    if sys1.d.shape != sys2.d.shape:
        raise DimensionError(f"parallel: shapes {sys1.d.shape} and {sys2.d.shape} differ")
    n1, n2 = sys1.nstates, sys2.nstates
    a = np.block([[sys1.a, np.zeros((n1, n2))], [np.zeros((n2, n1)), sys2.a]])
    return StateSpace(a, np.vstack([sys1.b, sys2.b]), np.hstack([sys1.c, sys2.c]),
                      sys1.d + sys2.d)


def feedback(sys1: StateSpace, sys2: StateSpace, sign: int = -1) -> StateSpace:
    """Closed loop ``y = sys1 (r + sign * sys2 y)``; negative feedback by default."""
    if sys1.noutputs != sys2.ninputs or sys2.noutputs != sys1.ninputs:
        raise DimensionError("feedback: loop dimensions do not match")
    p, m = sys1.d.shape
    e = np.eye(m) - sign * sys2.d @ sys1.d
    try:
        einv = np.linalg.inv(e)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("feedback loop is algebraically ill-posed") from exc
    # u = einv (r + s D2 C1 x1 + s C2 x2)
    n1, n2 = sys1.nstates, sys2.nstates
    s = sign
    ux1 = einv @ (s * sys2.d @ sys1.c)
    ux2 = einv @ (s * sys2.c)
    ur = einv
    y_x1 = sys1.c + sys1.d @ ux1
    y_x2 = sys1.d @ ux2
    y_r = sys1.d @ ur
    a = np.block([
        [sys1.a + sys1.b @ ux1, sys1.b @ ux2],
        [sys2.b @ y_x1, sys2.a + sys2.b @ y_x2],
    ])
    b = np.vstack([sys1.b @ ur, sys2.b @ y_r])
    c = np.hstack([y_x1, y_x2])
    return StateSpace(a.reshape(n1 + n2, n1 + n2), b, c, y_r)


def append(*systems: StateSpace) -> StateSpace:
    """Block-diagonal stacking of inputs, outputs and states."""
    from scipy.linalg import block_diag

    a = block_diag(*[s.a for s in systems]) if any(s.nstates for s in systems) else np.zeros((0, 0))
    n = sum(s.nstates for s in systems)
    d = block_diag(*[s.d for s in systems])
    b = block_diag(*[s.b for s in systems]).reshape(n, d.shape[1])
    c = block_diag(*[s.c for s in systems]).reshape(d.shape[0], n)
    return StateSpace(a.reshape(n, n), b, c, d)


def lft_lower(p: GeneralizedPlant, k: "Controller | StateSpace") -> StateSpace:
    """Close controller ``k`` around the ``(u, e)`` channel of ``p``.

    Realization (``Dk``, ``Ck``, ``Bk``, ``Ak`` are the controller matrices)::

        Abar = [[A + B2 Dk C2, B2 Ck], [Bk C2, Ak]]
        Bbar = [[B1 + B2 Dk D21], [Bk D21]]
        Cbar = [C1 + D12 Dk C2, D12 Ck]
        Dbar = D11 + D12 Dk D21
    """
    ak, bk, ck, dk = _controller_blocks(k)
    if dk.shape != (p.n_u, p.n_e):
        raise DimensionError(
            f"controller maps {dk.shape[1]} -> {dk.shape[0]}, plant needs {p.n_e} -> {p.n_u}"
        )
    a_bar = np.block([
        [p.a + p.b2 @ dk @ p.c2, p.b2 @ ck],
        [bk @ p.c2, ak],
    ])
    b_bar = np.vstack([p.b1 + p.b2 @ dk @ p.d21, bk @ p.d21])
    c_bar = np.hstack([p.c1 + p.d12 @ dk @ p.c2, p.d12 @ ck])
    d_bar = p.d11 + p.d12 @ dk @ p.d21
    n = p.nstates + ak.shape[0]
    nz, nw = d_bar.shape
    return StateSpace(a_bar.reshape(n, n), b_bar.reshape(n, nw), c_bar.reshape(nz, n), d_bar)


def _controller_blocks(k) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(k, StateSpace):
        return k.a, k.b, k.c, k.d
    return k.ak, k.bk, k.ck, k.dk


def ctrb(a, b) -> np.ndarray:
    """Controllability matrix ``[B, AB, ..., A^(n-1) B]``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float).reshape(a.shape[0], -1)
    cols = [b]
    for _ in range(a.shape[0] - 1):
        cols.append(a @ cols[-1])
    return np.hstack(cols)
