"""Batch command line: one pipeline stage per invocation.

Stages read the artifacts of earlier stages from the output directory and
write their own atomically, plus ``summary_<stage>.json``. Exit codes:
0 success, 1 configuration or usage error, 2 numerical failure,
3 infeasibility (for example no stabilizing initial controller).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gp as gp_mod
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .controller import Controller
from .lti import StateSpace
from .rollout import RolloutConfig, simulate_rollout, tracking_error_norm
from .scenario import InfeasibleScenarioError, make_reference
from .stability import build_uncertainty_plant, certify, robust_stability_report
from .trainer import (
    InfeasibleInitError,
    NoFeasibleIterateError,
    baseline_controller,
    collect_dataset,
    tune_controller,
)
from .uncertainty import (
    UncertaintyWeight,
    balance_input_scaling,
    bound_csv,
    fit_cover,
    relative_errors,
    verify_cover,
    scaled_bound,
)
from .vehicle import BicycleModel, linearize, sample_plants

log = logging.getLogger("robtune")

STAGES = ("linearize", "fit-cover", "make-refs", "train-nominal", "collect", "fit-gp",
          "train-adapted", "evaluate", "analyze-stability")
WORKERS_ENV = "ROBTUNE_WORKERS"
CONTROLLERS = ("k_init", "k_t", "k_a")


class StageError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise StageError(1, f"{WORKERS_ENV} must be an integer")


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Pipeline:
    """Stage implementations sharing one config and output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.grid = cfg.grid.grid()
        self.f_n = BicycleModel(cfg.vehicle)
        self.f_actual = BicycleModel(cfg.actual_params())

    # artifact helpers
    def path(self, name: str) -> Path:
        return self.out / name

    def read(self, name: str) -> str:
        p = self.path(name)
        if not p.exists():
            raise StageError(1, f"missing input artifact {p}; run the stage that produces it first")
        return p.read_text()

    def write(self, name: str, text: str):
        write_atomic(self.path(name), text)

    def nominal(self) -> StateSpace:
        return StateSpace.from_json(self.read("nominal.json"))

    def weight(self) -> UncertaintyWeight:
        return UncertaintyWeight.from_json(self.read("weight.json"))

    def controller(self, name: str) -> Controller:
        return Controller.from_json(self.read(f"{name}.json"))

    def refs(self, names=None, horizon: float | None = None):
        g = linearize(self.cfg.vehicle)
        h = self.cfg.trainer.horizon_short if horizon is None else horizon
        scs = self.cfg.scenarios if names is None else [self.cfg.scenario(n) for n in names]
        return [make_reference(sc, self.cfg.vehicle, g, self.cfg.rollout.ts, h) for sc in scs]

    def pred(self):
        w = self.weight()
        return build_uncertainty_plant(self.nominal(), w.w1, w.w2)

    # stages
    def linearize(self):
        g = linearize(self.cfg.vehicle)
        self.write("nominal.json", g.to_json() + "\n")
        eig = np.linalg.eigvals(g.a)
        return {"nstates": g.nstates, "max_real_eig": float(np.max(eig.real))}

    def fit_cover(self):
        c = self.cfg.cover
        g = self.nominal()
        n_corners = None if c.n_corners < 0 else c.n_corners
        plants = sample_plants(self.cfg.vehicle, self.cfg.uncertainty, c.n_samples, self.cfg.seed,
                               n_corners)
        errors = relative_errors(g, plants, self.grid)
        scaling = balance_input_scaling(errors)[0] if c.balance_inputs else None
        b = scaled_bound(errors, scaling)
        w = fit_cover(b, self.grid.omegas, c.order, c.margin, input_scaling=scaling,
                      n_inputs=g.ninputs)
        check = verify_cover(w, g, plants, self.grid, self.cfg.grid.certify_factor)
        self.write("weight.json", w.to_json() + "\n")
        self.write("cover_bound.csv", bound_csv(self.grid.omegas, b, w))
        return {"bound_peak": float(b.max()), "order": w.order, "gain": w.gain,
                "dense_worst_ratio": check.worst_ratio, "dense_violations": check.violations}

    def make_refs(self):
        out = {}
        for ref in self.refs():
            self.write(f"reference_{ref.scenario.name}.csv", ref.to_csv())
            out[ref.scenario.name] = {"steps": ref.steps, "final_y": float(ref.xd[-1, 4]),
                                      "final_speed": float(ref.xd[-1, 0])}
        return out

    def initial_controller(self, g, pred) -> Controller:
        b = self.cfg.baseline
        if b.init_controller:
            try:
                return Controller.from_json(Path(b.init_controller).read_text())
            except OSError as exc:
                raise StageError(1, f"cannot read initial controller {b.init_controller}: {exc}")
        return baseline_controller(g, pred, self.cfg.seed, b.speed_kp, b.speed_ki, b.q_lat, b.r_lat,
                                   b.lateral_pole, b.output_scale, b.max_tries, self.grid)

    def _tune(self, k0, f, tag: str, tcfg):
        g = self.nominal()
        w = self.weight()
        pred = build_uncertainty_plant(g, w.w1, w.w2)
        refs = self.refs(self.cfg.train_scenarios)
        k, tlog = tune_controller(k0, f, refs, g, w.w1, w.w2, tcfg, self.grid,
                                  pred)
        ok, rep = certify(g, pred, k, self.grid, self.cfg.grid.certify_factor)
        self.write(f"train_{tag}_log.csv", tlog.to_csv())
        return k, tlog, ok, rep

    def train_nominal(self):
        g = self.nominal()
        w = self.weight()
        k0 = self.initial_controller(g, build_uncertainty_plant(g, w.w1, w.w2))
        self.write("k_init.json", k0.to_json() + "\n")
        k, tlog, ok, rep = self._tune(k0, self.f_n, "nominal",
                                     self.cfg.trainer_config())
        self.write("k_t.json", k.to_json() + "\n")
        return {"epochs": len(tlog), "J_first": float(tlog.column("J")[0]) if len(tlog) else None,
                "J_min": float(tlog.column("J").min()) if len(tlog) else None,
                "certified": ok, "stability": rep.to_dict()}

    def collect(self):
        k = self.controller("k_t")
        name = self.cfg.gp.collect_scenario
        ref = self.refs([name])[0]
        rcfg = self.cfg.trainer_config().rollout_config(self.cfg.trainer.horizon_short)
        ds = collect_dataset(k, self.f_actual, ref, rcfg)
        self.write("dataset.csv", ds.to_csv())
        return {"points": len(ds), "scenario": name}

    def fit_gp(self):
        ds = gp_mod.ResidualDataset.from_csv(self.read("dataset.csv"))
        feats, targets = gp_mod.build_targets(ds, self.f_n)
        g = self.cfg.gp

        def fit_one(item):
            d, t = item
            h = gp_mod.fit_hyperparameters(feats, t, g.restarts, self.cfg.seed * 7919 + d, g.steps)
            return gp_mod.GpModel.fit(feats, t, h, d)

        with ThreadPoolExecutor(max_workers=workers()) as pool:
            models = list(pool.map(fit_one, zip(gp_mod.RESIDUAL_ROWS, targets)))
        learned = gp_mod.LearnedDynamics(self.f_n, models)
        self.write("gp_models.json", _dump(learned.to_dict()))
        fn_err = np.concatenate(targets)
        fl = np.array([learned.residual(x)[:3] for x in ds.x]).T.ravel()
        return {"points": len(ds), "train_rms_nominal": float(np.sqrt(np.mean(fn_err**2))),
                "train_rms_learned": float(np.sqrt(np.mean((fn_err - fl) ** 2))),
                "hyper": [m.hyper.to_dict() for m in models]}

    def learned(self) -> gp_mod.LearnedDynamics:
        return gp_mod.LearnedDynamics.from_dict(self.f_n, json.loads(self.read("gp_models.json")))

    def train_adapted(self):
        k_t = self.controller("k_t")
        k, tlog, ok, rep = self._tune(k_t, self.learned(), "adapted",
                                     self.cfg.adaptation_config())
        self.write("k_a.json", k.to_json() + "\n")
        return {"epochs": len(tlog), "certified": ok, "stability": rep.to_dict()}

    def evaluate(self):
        ctrls = [(n, self.controller(n)) for n in CONTROLLERS if self.path(f"{n}.json").exists()]
        if not ctrls:
            raise StageError(1, f"no controller artifacts in {self.out}")
        t_end = self.cfg.evaluate.t_end
        refs = self.refs(horizon=t_end)
        rcfg = RolloutConfig(self.cfg.rollout.ts, refs[0].steps, tuple(self.cfg.rollout.q_diag))
        plants = [("nominal", self.f_n), ("actual", self.f_actual)]
        jobs = [(cn, k, pn, f) for cn, k in ctrls for pn, f in plants]

        def run(job):
            cn, k, pn, f = job
            res = simulate_rollout(f, k, refs, rcfg)
            return [(cn, pn, tr.name, tracking_error_norm(tr, 4, t_end),
                     tracking_error_norm(tr, 4, t_end, weighted=False), tr.diverged)
                    for tr in res.traces]

        with ThreadPoolExecutor(max_workers=workers()) as pool:
            rows = [r for block in pool.map(run, jobs) for r in block]
        lines = ["controller,plant,scenario,ey_l2,ey_l2_unweighted,diverged"]
        lines += [f"{c},{p},{s},{v!r},{u!r},{int(d)}" for c, p, s, v, u, d in rows]
        self.write("metrics.csv", "\n".join(lines) + "\n")
        return {f"{c}/{p}/{s}": v for c, p, s, v, _, _ in rows}

    def analyze_stability(self, controller_path: str | None = None):
        g = self.nominal()
        pred = self.pred()
        if controller_path:
            try:
                items = [(Path(controller_path).stem, Controller.from_json(Path(controller_path).read_text()))]
            except OSError as exc:
                raise StageError(1, f"cannot read controller {controller_path}: {exc.strerror}")
        else:
            items = [(n, self.controller(n)) for n in CONTROLLERS if self.path(f"{n}.json").exists()]
        out = {}
        for name, k in items:
            rep = robust_stability_report(g, pred, k, self.grid.densified(self.cfg.grid.certify_factor))
            out[name] = rep.to_dict() | {"certified": rep.certified}
        self.write("stability.json", _dump(out))
        return out

    def run(self, stage: str, **kw):
        fn = getattr(self, stage.replace("-", "_"))
        metrics = fn(**kw)
        summary = {"stage": stage, "seed": self.cfg.seed, "metrics": metrics}
        self.write(f"summary_{stage}.json", _dump(summary))
        return summary


_ERROR_CODES = (
    ((ConfigError,), 1),
    ((NoFeasibleIterateError, InfeasibleInitError, InfeasibleScenarioError), 3),
    ((ArithmeticError, np.linalg.LinAlgError, ValueError, RuntimeError), 2),
)


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    last = None
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("robtune.") and mod != __name__:
            last = f"{mod.split('.', 1)[1]}.{tb.tb_frame.f_code.co_name}"
        tb = tb.tb_next
    return last or "cli"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robtune", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML experiment config (default: shipped benchmark)")
    p.add_argument("--stage", required=True, choices=STAGES + ("all",))
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: experiment.out from the config)")
    p.add_argument("--controller", help="controller JSON for analyze-stability")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = cfg.with_seed(args.seed)
        pipe = Pipeline(cfg, Path(args.out or cfg.experiment.out))
        stages = STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            kw = {"controller_path": args.controller} if stage == "analyze-stability" else {}
            summary = pipe.run(stage, **kw)
            print(json.dumps({"stage": stage, "ok": True}), flush=True)
            log.info("%s: %s", stage, summary["metrics"])
    except StageError as exc:
        print(f"robtune: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # map library failures onto the documented exit codes
        for types, code in _ERROR_CODES:
            if isinstance(exc, types):
                print(f"robtune: {_origin(exc)}: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
