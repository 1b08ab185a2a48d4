"""Learn the tire-stiffness mismatch from one closed-loop run.

Run with ``python3 demos/residual_learning.py``. Drives the baseline on the
perturbed plant, fits one GP per residual row, and compares one-step
derivative errors of the nominal and learned models on another scenario.
"""

import numpy as np

from robtune import gp
from robtune.config import default_config
from robtune.rollout import RolloutConfig
from robtune.scenario import make_reference
from robtune.trainer import baseline_controller, collect_dataset
from robtune.vehicle import BicycleModel, linearize

cfg = default_config()
g = linearize(cfg.vehicle)
f_n, f_a = BicycleModel(cfg.vehicle), BicycleModel(cfg.actual_params())
k = baseline_controller(g)
rcfg = RolloutConfig(0.02, 400)

ds = collect_dataset(k, f_a, make_reference(cfg.scenario("1"), cfg.vehicle, g, 0.02, 8.0), rcfg)
models = gp.fit_residual_models(ds, f_n, restarts=1, seed=0, steps=300)
for m in models:
    print(f"row {m.target_dim}: {m.hyper.to_dict()}")
f_l = gp.LearnedDynamics(f_n, models)

held = collect_dataset(k, f_a, make_reference(cfg.scenario("4"), cfg.vehicle, g, 0.02, 8.0), rcfg)
_, targets = gp.build_targets(held, f_n)
e_n = np.array(targets)
e_l = e_n - np.array([f_l.residual(x)[:3] for x in held.x]).T
print(f"held-out one-step RMS: nominal {np.sqrt(np.mean(e_n**2)):.4f},"
      f" learned {np.sqrt(np.mean(e_l**2)):.6f}")
