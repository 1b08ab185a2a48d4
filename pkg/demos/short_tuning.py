"""A short nominal tuning run on scenario 1 with a 4 s horizon.

Run with ``python3 demos/short_tuning.py`` (about a minute). Shows the
penalized cost falling while the incumbent stays certified.
"""

from dataclasses import replace

from robtune.config import default_config
from robtune.rollout import RolloutConfig, simulate_rollout, tracking_error_norm
from robtune.scenario import make_reference
from robtune.stability import build_uncertainty_plant
from robtune.trainer import baseline_controller, tune_controller
from robtune.uncertainty import balance_input_scaling, fit_cover, relative_errors, scaled_bound
from robtune.vehicle import BicycleModel, linearize, sample_plants

cfg = default_config()
grid = cfg.grid.grid()
g = linearize(cfg.vehicle)
errors = relative_errors(g, sample_plants(cfg.vehicle, cfg.uncertainty, 60, 0), grid)
d, _ = balance_input_scaling(errors)
w = fit_cover(scaled_bound(errors, d), grid.omegas, 2, 0.05, input_scaling=d)
pred = build_uncertainty_plant(g, w.w1, w.w2)

k0 = baseline_controller(g, pred, grid=grid)
ref = make_reference(cfg.scenario("1"), cfg.vehicle, g, 0.02, 8.0)
tcfg = replace(cfg.trainer_config(), epochs_short=60, horizon_short=4.0, lr=3e-3)
f_n = BicycleModel(cfg.vehicle)
k, log = tune_controller(k0, f_n, [ref], g, w.w1, w.w2, tcfg, grid, pred)

for row in log.rows[::10]:
    print(f"epoch {row[0]:3d}  J {row[3]:10.2f}  c_p {row[4]:10.2f}  sigma_peak {row[7]:.3f}")

rcfg = RolloutConfig(0.02, 400)
for name, kk in (("baseline", k0), ("tuned", k)):
    tr = simulate_rollout(f_n, kk, [ref], rcfg).traces[0]
    print(f"{name}: ||e_Y|| = {tracking_error_norm(tr):.3f}")
