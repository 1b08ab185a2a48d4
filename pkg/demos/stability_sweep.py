"""Build the uncertainty cover for the vehicle model and check the baseline controller.

Run with ``python3 demos/stability_sweep.py``. Prints the sampled bound, the
fitted weight and the robust-stability numbers of the built-in baseline.
"""

import numpy as np

from robtune.config import default_config
from robtune.stability import build_uncertainty_plant, certify
from robtune.trainer import baseline_controller
from robtune.uncertainty import balance_input_scaling, fit_cover, relative_errors, scaled_bound
from robtune.vehicle import linearize, sample_plants

cfg = default_config()
grid = cfg.grid.grid()
g = linearize(cfg.vehicle)
print("open-loop eigenvalues:", np.round(np.linalg.eigvals(g.a), 3))

plants = sample_plants(cfg.vehicle, cfg.uncertainty, cfg.cover.n_samples, cfg.seed)
errors = relative_errors(g, plants, grid)
d, peak = balance_input_scaling(errors)
b = scaled_bound(errors, d)
w = fit_cover(b, grid.omegas, cfg.cover.order, cfg.cover.margin, input_scaling=d)
print(f"bound peak {b.max():.3f} at {grid.omegas[b.argmax()]:.3g} rad/s; steering scale {d[2]:.3g}")
print(f"cover: gain {w.gain:.4f}, sections {[(round(z, 3), round(p, 3)) for z, p in w.sections]}")

pred = build_uncertainty_plant(g, w.w1, w.w2)
k0 = baseline_controller(g, pred, seed=cfg.seed, grid=grid)
ok, rep = certify(g, pred, k0, grid)
print(f"baseline: c_s={rep.c_s:g}, sigma_peak={rep.sigma_peak:.3f} at {rep.omega_peak:.3g} rad/s,"
      f" certified={ok}")
