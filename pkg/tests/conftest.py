import numpy as np
import pytest

from robtune.controller import Controller
from robtune.lti import StateSpace, spectral_abscissa


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def central_fd(fun, phi, h=1e-6):
    phi = np.asarray(phi, float)
    out = np.zeros_like(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = h
        out[i] = (fun(phi + e) - fun(phi - e)) / (2 * h)
    return out


def random_stable_plant(rng, n, m=1, p=1):
    """Strictly proper with eigenvalues in Re < -0.2."""
    a = rng.normal(size=(n, n))
    a = a - (spectral_abscissa(a) + 0.2 + rng.uniform(0, 1)) * np.eye(n)
    return StateSpace(a, rng.normal(size=(n, m)), rng.normal(size=(p, n)), np.zeros((p, m)))


def random_controller(rng, nk, m=1, p=1, scale=0.5):
    ak = rng.normal(size=(nk, nk)) * scale
    if nk:
        ak = ak - (spectral_abscissa(ak) + 0.5) * np.eye(nk)
    return Controller(ak, scale * rng.normal(size=(nk, p)), scale * rng.normal(size=(m, nk)),
                      scale * rng.normal(size=(m, p)), {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
