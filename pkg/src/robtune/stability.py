"""Nominal and robust stability penalties and their controller gradients.

Nominal stability is tested on the four closed-loop "A" matrices of the
sensitivity functions S1..S4 of the loop (G, K). Robust stability is the
small-gain test on the uncertainty channel obtained by closing K around a
generalized plant built from G and the uncertainty weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .controller import BLOCKS, Controller
from .lti import (
    DEFAULT_GRID,
    DimensionError,
    FrequencyGrid,
    GeneralizedPlant,
    SingularResolventError,
    StateSpace,
    lft_lower,
    refine_peak,
    sigma_sweep,
    spectral_abscissa,
)

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-9
TIE_TOL = 1e-6
FD_STEP = 1e-6


class NonzeroFeedthroughError(ValueError):
    """The plant realization must have ``D = 0``."""


@dataclass
class StabilityReport:
    abscissas: tuple
    c_s: float
    sigma_peak: float
    omega_peak: float
    c_rob: float
    certifying: bool = True

    @property
    def max_abscissa(self) -> float:
        return max(self.abscissas)

    @property
    def certified(self) -> bool:
        """Nominally stable and small-gain certified."""
        return self.c_s == 0.0 and self.certifying and self.sigma_peak <= 1.0

    def to_dict(self) -> dict:
        return {
            "c_s": self.c_s,
            "c_rob": self.c_rob,
            "sigma_peak": self.sigma_peak,
            "omega_peak": self.omega_peak,
            "abscissas": list(self.abscissas),
        }


@dataclass
class PenaltyGradient:
    d_cs: np.ndarray
    d_crob: np.ndarray
    fallbacks: list = field(default_factory=list)


# --- internal stability -----------------------------------------------------

def _m_terms(ng: int, nk: int):
    """Block layout of M1..M4.

    Each entry is ``(block_sizes, constant_blocks, terms)`` where a term
    ``(r, c, sign, left, param, right)`` adds ``sign * left @ P @ right`` to
    block ``(r, c)``; ``left``/``right`` are "I", "Bg" or "Cg".
    """
    n, k = ng, nk
    return [
        ((n, k, n), [(0, 0), (2, 2)], [
            (0, 1, 1, "Bg", "ck", "I"), (0, 2, 1, "Bg", "dk", "Cg"),
            (1, 1, 1, "I", "ak", "I"), (1, 2, -1, "I", "bk", "Cg"),
            (2, 1, 1, "Bg", "ck", "I"), (2, 2, -1, "Bg", "dk", "Cg"),
        ]),
        ((n, k), [(0, 0)], [
            (0, 0, -1, "Bg", "dk", "Cg"), (0, 1, -1, "Bg", "ck", "I"),
            (1, 0, 1, "I", "bk", "Cg"), (1, 1, 1, "I", "ak", "I"),
        ]),
        ((k, n), [(1, 1)], [
            (0, 0, 1, "I", "ak", "I"), (0, 1, -1, "I", "bk", "Cg"),
            (1, 0, 1, "Bg", "ck", "I"), (1, 1, -1, "Bg", "dk", "Cg"),
        ]),
        ((k, n, k), [(1, 1)], [
            (0, 0, 1, "I", "ak", "I"), (0, 1, 1, "I", "bk", "Cg"),
            (1, 1, -1, "Bg", "dk", "Cg"), (1, 2, -1, "Bg", "ck", "I"),
            (2, 1, 1, "I", "bk", "Cg"), (2, 2, 1, "I", "ak", "I"),
        ]),
    ]


def _check_loop(g: StateSpace, k: Controller):
    if np.any(g.d != 0):
        raise NonzeroFeedthroughError(
            "internal stability matrices assume a strictly proper plant realization (Dg = 0)"
        )
    if k.dk.shape != (g.ninputs, g.noutputs):
        raise DimensionError(
            f"controller is {k.dk.shape[0]}x{k.dk.shape[1]}, plant needs "
            f"{g.ninputs}x{g.noutputs}"
        )


def internal_stability_matrices(g: StateSpace, k: Controller) -> list[np.ndarray]:
    """Return ``[M1, M2, M3, M4]`` for plant ``g`` and controller ``k``."""
    _check_loop(g, k)
    mats = {"Bg": g.b, "Cg": g.c}
    out = []
    for sizes, consts, terms in _m_terms(g.nstates, k.nstates):
        off = np.concatenate([[0], np.cumsum(sizes)])
        m = np.zeros((off[-1], off[-1]))
        for r, c in consts:
            m[off[r]:off[r + 1], off[c]:off[c + 1]] += g.a
        for r, c, sign, left, param, right in terms:
            p = getattr(k, param)
            lm = mats[left] if left != "I" else None
            rm = mats[right] if right != "I" else None
            blk = p if lm is None else lm @ p
            blk = blk if rm is None else blk @ rm
            m[off[r]:off[r + 1], off[c]:off[c + 1]] += sign * blk
        out.append(m)
    return out


def nominal_stability_penalty(ms) -> float:
    """Sum over matrices of ``max(0, spectral abscissa)``."""
    return float(sum(max(0.0, spectral_abscissa(m)) for m in ms))


def _rightmost_eig_grad(m, sizes, terms, g: StateSpace, k: Controller):
    """Gradient blocks of the rightmost eigenvalue's real part, or None if degenerate."""
    w, vl, vr = scipy.linalg.eig(m, left=True, right=True)
    i = int(np.argmax(w.real))
    lam = w[i]
    others = np.delete(w, i)
    if lam.imag != 0.0:
        others = others[np.abs(others - np.conj(lam)) > DEGENERACY_TOL * (1 + abs(lam))]
    if others.size and np.min(np.abs(others - lam)) <= DEGENERACY_TOL * (1 + abs(lam)):
        return None
    x = vr[:, i]
    y = vl[:, i]
    denom = np.vdot(y, x)
    if abs(denom) < 1e-14 * np.linalg.norm(x) * np.linalg.norm(y):
        return None
    off = np.concatenate([[0], np.cumsum(sizes)])
    mats = {"Bg": g.b, "Cg": g.c}
    grads = {b: np.zeros(getattr(k, b).shape) for b in BLOCKS}
    yh = y.conj()
    for r, c, sign, left, param, right in terms:
        yl = yh[off[r]:off[r + 1]]
        xr = x[off[c]:off[c + 1]]
        if left != "I":
            yl = yl @ mats[left]
        if right != "I":
            xr = mats[right] @ xr
        grads[param] += sign * np.real(np.outer(yl, xr) / denom)
    return grads


def nominal_penalty_gradient(g: StateSpace, k: Controller) -> tuple[float, np.ndarray, list]:
    """``(c_s, d c_s / d phi, fallback_flags)``."""
    ms = internal_stability_matrices(g, k)
    layouts = _m_terms(g.nstates, k.nstates)
    abscissas = [spectral_abscissa(m) for m in ms]
    c_s = float(sum(max(0.0, a) for a in abscissas))
    total = {b: np.zeros(getattr(k, b).shape) for b in BLOCKS}
    flags = []
    degenerate = False
    for idx, (m, (sizes, _, terms)) in enumerate(zip(ms, layouts)):
        if abscissas[idx] <= 0:
            continue
        gr = _rightmost_eig_grad(m, sizes, terms, g, k)
        if gr is None:
            degenerate = True
            flags.append(f"M{idx + 1}: repeated rightmost eigenvalue")
            break
        for b in BLOCKS:
            total[b] += gr[b]
    if degenerate:
        log.info("c_s gradient: degenerate eigenvalue, using finite differences")
        grad = _central_fd(lambda kk: nominal_stability_penalty(internal_stability_matrices(g, kk)), k)
        return c_s, grad, flags
    if c_s == 0.0:
        return 0.0, np.zeros(k.n_params), flags
    return c_s, k.flatten_block_grads(total), flags


def _central_fd(fun, k: Controller, h: float = FD_STEP) -> np.ndarray:
    phi = k.phi
    grad = np.zeros_like(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = h
        grad[i] = (fun(k.with_phi(phi + e)) - fun(k.with_phi(phi - e))) / (2 * h)
    return grad


# --- generalized plants -----------------------------------------------------

def _require_stable(w: StateSpace, name: str):
    if w.nstates and spectral_abscissa(w.a) >= 0:
        raise ValueError(f"weight {name} must be stable")


def build_uncertainty_plant(g: StateSpace, w1: StateSpace, w2: StateSpace) -> GeneralizedPlant:
    """Generalized plant for input multiplicative uncertainty ``G (I + W1 D W2)``.

    Inputs ``(w1, u)``, outputs ``(z1, e)`` with ``z1 = W2 u`` and
    ``e = -G (u + W1 w1)``. Closing ``u = K e`` gives
    ``T = -W2 K (I + G K)^-1 G W1``.
    """
    _require_stable(w1, "W1")
    _require_stable(w2, "W2")
    m = g.ninputs
    if w1.d.shape != (m, m) or w2.d.shape != (m, m):
        raise DimensionError("W1 and W2 must be square and sized to the plant input")
    if np.any(g.d != 0):
        raise NonzeroFeedthroughError("plant must be strictly proper for d22 = 0")
    ng, n1, n2 = g.nstates, w1.nstates, w2.nstates
    a = np.zeros((ng + n1 + n2,) * 2)
    a[:ng, :ng] = g.a
    a[:ng, ng:ng + n1] = g.b @ w1.c
    a[ng:ng + n1, ng:ng + n1] = w1.a
    a[ng + n1:, ng + n1:] = w2.a
    b1 = np.vstack([g.b @ w1.d, w1.b, np.zeros((n2, m))])
    b2 = np.vstack([g.b, np.zeros((n1, m)), w2.b])
    c1 = np.hstack([np.zeros((m, ng + n1)), w2.c])
    c2 = np.hstack([-g.c, np.zeros((g.noutputs, n1 + n2))])
    return GeneralizedPlant(a, b1, b2, c1, c2, np.zeros((m, m)), w2.d,
                            np.zeros((g.noutputs, m)))


def build_additive_plant(g: StateSpace, wa: StateSpace) -> GeneralizedPlant:
    """Generalized plant for additive uncertainty ``G + Wa D``.

    ``z1 = u``, ``e = -(G u + Wa w1)``; closing gives ``T = -K (I + G K)^-1 Wa``.
    """
    _require_stable(wa, "Wa")
    p, m = g.noutputs, g.ninputs
    if wa.d.shape[0] != p:
        raise DimensionError("Wa must have as many outputs as the plant")
    if np.any(g.d != 0):
        raise NonzeroFeedthroughError("plant must be strictly proper for d22 = 0")
    ng, na, nw = g.nstates, wa.nstates, wa.ninputs
    a = scipy.linalg.block_diag(g.a, wa.a).reshape(ng + na, ng + na)
    b1 = np.vstack([np.zeros((ng, nw)), wa.b])
    b2 = np.vstack([g.b, np.zeros((na, m))])
    c1 = np.zeros((m, ng + na))
    c2 = np.hstack([-g.c, -wa.c])
    return GeneralizedPlant(a, b1, b2, c1, c2, np.zeros((m, nw)), np.eye(m), -wa.d)


def build_performance_plant(g: StateSpace, we: StateSpace, wu: StateSpace) -> GeneralizedPlant:
    """Weighted tracking plant: ``z2 = [We e; Wu u]`` with ``e = w2 - G u``."""
    p, m = g.noutputs, g.ninputs
    if we.ninputs != p or wu.ninputs != m:
        raise DimensionError("We must take the error, Wu the control signal")
    if np.any(g.d != 0):
        raise NonzeroFeedthroughError("plant must be strictly proper for d22 = 0")
    _require_stable(we, "We")
    _require_stable(wu, "Wu")
    ng, ne, nu = g.nstates, we.nstates, wu.nstates
    pe, pu = we.noutputs, wu.noutputs
    n = ng + ne + nu
    a = np.zeros((n, n))
    a[:ng, :ng] = g.a
    a[ng:ng + ne, :ng] = -we.b @ g.c
    a[ng:ng + ne, ng:ng + ne] = we.a
    a[ng + ne:, ng + ne:] = wu.a
    b1 = np.vstack([np.zeros((ng, p)), we.b, np.zeros((nu, p))])
    b2 = np.vstack([g.b, np.zeros((ne, m)), wu.b])
    c1 = np.block([
        [-we.d @ g.c, we.c, np.zeros((pe, nu))],
        [np.zeros((pu, ng + ne)), wu.c],
    ])
    d11 = np.vstack([we.d, np.zeros((pu, p))])
    d12 = np.vstack([np.zeros((pe, m)), wu.d])
    c2 = np.hstack([-g.c, np.zeros((p, ne + nu))])
    return GeneralizedPlant(a, b1, b2, c1, c2, d11, d12, np.eye(p))


# --- robust stability ---------------------------------------------------------

@dataclass
class PeakResult:
    value: float
    omega: float
    stable: bool
    tied: list  # frequencies of near-tied peaks (including the best one)


def channel_peak(t: StateSpace, grid: FrequencyGrid = DEFAULT_GRID,
                 refine_iters: int = 20) -> PeakResult:
    """Refined grid supremum of ``sigma_max(T(jw))`` with near-tied peaks."""
    stable = t.nstates == 0 or spectral_abscissa(t.a) < 0
    w = grid.omegas
    vals = sigma_sweep(t, w)
    if t.nstates == 0:
        return PeakResult(float(vals[0]), float(w[0]), True, [float(w[0])])
    # interior local maxima plus the end points
    cand = [i for i in range(len(w))
            if (i == 0 or vals[i] >= vals[i - 1]) and (i == len(w) - 1 or vals[i] >= vals[i + 1])]
    top = max(vals[i] for i in cand)
    cand = [i for i in cand if vals[i] >= top * (1 - 1e-3) - 1e-12]
    refined = [refine_peak(t, w, vals, i, refine_iters) for i in cand]
    best_v = max(v for v, _ in refined)
    tied = sorted(om for v, om in refined if v >= best_v - TIE_TOL)
    best_om = max(refined)[1]
    return PeakResult(float(best_v), float(best_om), bool(stable), tied)


def robust_stability_penalty(t: StateSpace, grid: FrequencyGrid = DEFAULT_GRID):
    """``(c_rob, sigma_peak, omega_peak)`` for the uncertainty channel ``t``.

    If ``t`` is unstable the sweep is still returned but is not a
    certificate; use `robust_stability_report` to get the flag.
    """
    res = channel_peak(t, grid)
    return max(1.0, res.value), res.value, res.omega


def sigma_gradient_at(p: GeneralizedPlant, k: Controller, omega: float):
    """Gradient blocks of ``sigma_max(T(jw))`` at one frequency, or None if
    the top singular value is repeated."""
    t = lft_lower(p, k)
    n = t.nstates
    x_res = 1j * omega * np.eye(n) - t.a
    try:
        xb = np.linalg.solve(x_res, t.b)
        resp = t.c @ xb + t.d
        u, s, vh = np.linalg.svd(resp)
    except np.linalg.LinAlgError as exc:
        raise SingularResolventError(str(exc)) from exc
    if s.size > 1 and s[0] - s[1] <= DEGENERACY_TOL * max(1.0, s[0]):
        return None
    u1 = u[:, 0]
    v1 = vh[0].conj()
    a = np.linalg.solve(x_res.T, t.c.T @ u1.conj())  # = (u1^H C X)^T
    b = xb @ v1
    npl = p.nstates
    a_p, a_k = a[:npl], a[npl:]
    b_p, b_k = b[:npl], b[npl:]
    alpha = a_p @ p.b2 + u1.conj() @ p.d12
    beta = p.c2 @ b_p + p.d21 @ v1
    return {
        "ak": np.real(np.outer(a_k, b_k)),
        "bk": np.real(np.outer(a_k, beta)),
        "ck": np.real(np.outer(alpha, b_k)),
        "dk": np.real(np.outer(alpha, beta)),
    }


def channel_norm_gradient(p: GeneralizedPlant, k: Controller,
                          grid: FrequencyGrid = DEFAULT_GRID):
    """``(peak, d peak / d phi, flags)`` for ``||F_L(p, k)||`` on the grid.

    Tied peaks (within 1e-6) have their gradients averaged; a repeated top
    singular value falls back to central finite differences of the peak.
    """
    t = lft_lower(p, k)
    peak = channel_peak(t, grid)
    grads = []
    for om in peak.tied:
        g = sigma_gradient_at(p, k, om)
        if g is None:
            grads = None
            break
        grads.append(k.flatten_block_grads(g))
    if grads is None:
        return peak, _central_fd(lambda kk: channel_peak(lft_lower(p, kk), grid).value, k), [
            "repeated top singular value"
        ]
    return peak, np.mean(grads, axis=0), []


def robust_stability_report(g: StateSpace, pred: GeneralizedPlant, k: Controller,
                            grid: FrequencyGrid = DEFAULT_GRID) -> StabilityReport:
    ms = internal_stability_matrices(g, k)
    abscissas = tuple(spectral_abscissa(m) for m in ms)
    c_s = float(sum(max(0.0, a) for a in abscissas))
    peak = channel_peak(lft_lower(pred, k), grid)
    return StabilityReport(abscissas, c_s, peak.value, peak.omega, max(1.0, peak.value),
                           certifying=peak.stable)


def stability_penalty_gradients(g: StateSpace, w1: StateSpace, w2: StateSpace, k: Controller,
                                grid: FrequencyGrid = DEFAULT_GRID,
                                pred: GeneralizedPlant | None = None):
    """Penalties and their gradients.

    Returns ``(StabilityReport, PenaltyGradient)``. Gradients vanish where
    the penalty sits on its floor.
    """
    if pred is None:
        pred = build_uncertainty_plant(g, w1, w2)
    c_s, d_cs, flags = nominal_penalty_gradient(g, k)
    ms = internal_stability_matrices(g, k)
    abscissas = tuple(spectral_abscissa(m) for m in ms)
    t = lft_lower(pred, k)
    peak = channel_peak(t, grid)
    d_crob = np.zeros(k.n_params)
    if peak.value > 1.0:
        try:
            _, d_crob, f2 = channel_norm_gradient(pred, k, grid)
            flags = flags + f2
        except SingularResolventError:
            flags = flags + ["singular resolvent at peak"]
            d_crob = _central_fd(lambda kk: channel_peak(lft_lower(pred, kk), grid).value, k)
    report = StabilityReport(abscissas, c_s, peak.value, peak.omega, max(1.0, peak.value),
                             certifying=peak.stable)
    return report, PenaltyGradient(d_cs, d_crob, flags)


def certify(g: StateSpace, pred: GeneralizedPlant, k: Controller,
            grid: FrequencyGrid = DEFAULT_GRID, factor: int = 3,
            tol: float = 1e-9) -> tuple[bool, StabilityReport]:
    """Re-check ``c_s = 0`` and ``sigma_peak <= 1 + tol`` on a densified grid."""
    rep = robust_stability_report(g, pred, k, grid.densified(factor))
    ok = rep.c_s == 0.0 and rep.certifying and rep.sigma_peak <= 1.0 + tol
    return ok, rep


__all__ = [
    "StabilityReport", "PenaltyGradient", "NonzeroFeedthroughError",
    "internal_stability_matrices", "nominal_stability_penalty", "nominal_penalty_gradient",
    "build_uncertainty_plant", "build_additive_plant", "build_performance_plant",
    "channel_peak", "robust_stability_penalty", "robust_stability_report",
    "sigma_gradient_at", "channel_norm_gradient", "stability_penalty_gradients", "certify",
]
