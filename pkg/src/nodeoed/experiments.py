"""End-to-end pipelines for the three benchmark families.

Each ``run_*`` function takes a resolved :class:`TrainConfig`, trains, evaluates
and (optionally) writes a run directory.  They are shared by the command line
interface, the demo scripts and the acceptance tests.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

from . import io as nio
from .autodiff import ContractError
from .forward import make_phantoms
from .problems import CTProblem, ExponentialProblem, ImageProblem
from .trainer import (
    AdaptiveState,
    TrainConfig,
    Trainer,
    evaluate,
    exponential_summary,
    train_adaptive,
    write_run_directory,
)

__all__ = [
    "default_config",
    "exponential_problem",
    "image_data",
    "image_problem",
    "ct_problem",
    "run_exponential",
    "run_sweep",
    "run_image",
    "run_ct",
    "run_ct_adaptive",
]

# desk-scale defaults; the full-scale entries override them under --paper-scale
_DEFAULTS = {
    "exponential": dict(
        budget=3, epochs=2000, batch_size=256, lr_theta=1e-3, lr_design=1e-1, noise_sigma=0.05,
        noise_kind="log", init="random", hidden=(256,),
    ),
    "image": dict(
        budget=10, epochs=5, batch_size=64, lr_theta=1e-3, lr_design=5e-2, noise_sigma=0.05,
        noise_kind="additive", init="variance", hidden=(512,), subset=10000,
    ),
    "ct": dict(
        budget=10, epochs=30, batch_size=32, lr_theta=1e-3, lr_design=1e-2, noise_sigma=0.01,
        noise_kind="relative", init="uniform", tau=math.pi, hidden=(1024,), n=32, rho=64,
        n_train=1024, n_val=64,
    ),
}
_PAPER = {
    "exponential": dict(epochs=10000, batch_size=1024),
    "image": dict(epochs=50, subset=None, lr_design=1e-3, repeats=20),
    "ct": dict(epochs=150, batch_size=128, lr_theta=2e-3, lr_design=2e-3),
}
# adaptive CT rounds draw a fresh training set each round; a larger set with
# fewer passes keeps warm-started rounds from overfitting it
_ADAPTIVE = dict(n_train=4096, epochs=10)


def default_config(experiment, paper_scale=False, adaptive=False, **overrides):
    """Desk-scale (or full-scale) defaults for ``experiment``; ``adaptive`` selects the adaptive CT desk settings."""
    if experiment not in _DEFAULTS:
        raise ContractError(f"unknown experiment {experiment!r}")
    if adaptive and experiment != "ct":
        raise ContractError("adaptive defaults exist only for ct")
    values = dict(_DEFAULTS[experiment])
    if paper_scale:
        values.update(_PAPER[experiment])
    elif adaptive:
        values.update(_ADAPTIVE)
    values.update(overrides)
    return TrainConfig(experiment=experiment, **values).validate()


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- exponential --------------------------------------------------------------------------


def exponential_problem(config):
    return ExponentialProblem(config.budget, config.noise_sigma, config.hidden, config.exp_inputs)


def run_exponential(config, out_dir=None):
    """Train NODE on the exponential benchmark; returns ``(trace, summary)``."""
    trainer = Trainer(config, exponential_problem(config))
    trace = trainer.run()
    summary = exponential_summary(config, trace)
    if out_dir is not None:
        write_run_directory(out_dir, config, trace, summary, trainer)
        hist = trace.design_history()[:, :, 0]
        nio.svg_lines(Path(out_dir) / "locations.svg", trace.steps, hist, ylabel="t", title=f"m = {config.budget}")
    return trace, summary


def run_sweep(config, m_values, out_dir=None):
    """One NODE run per ``m`` with seed ``config.seed + m``; returns sweep rows."""
    rows = []
    for m in m_values:
        cfg = config.replace(budget=int(m), seed=config.seed + int(m))
        sub = None if out_dir is None else Path(out_dir) / f"m{int(m):03d}"
        trace, summary = run_exponential(cfg, sub)
        rows.append(
            {
                "m": int(m),
                "k0": summary["k0"],
                "k1": summary["k1"],
                "k0_fraction": summary["k0_fraction"],
                "k1_fraction": summary["k1_fraction"],
                "max_boundary_distance": summary["max_boundary_distance"],
            }
        )
        _log(f"m={m}: k1/m={summary['k1_fraction']:.3f}")
    if out_dir is not None:
        nio.write_csv(Path(out_dir) / "sweep.csv", rows)
        nio.svg_fractions(
            Path(out_dir) / "fractions.svg", [r["m"] for r in rows], [r["k1_fraction"] for r in rows],
            [r["k0_fraction"] for r in rows],
        )
    return rows


# -- images --------------------------------------------------------------------------------


def image_data(config):
    """MNIST from ``config.data_dir`` if given, else the bundled 5000-image sample."""
    if config.data_dir:
        ds = nio.load_mnist(config.data_dir)
    else:
        _log("no MNIST directory given; using the bundled 5000-image sample (4000 train / 1000 test)")
        ds = nio.bundled_mnist_subset(seed=0)
    return nio.split_and_subset(ds, config.subset, config.test_subset, seed=config.seed)


def image_problem(config, data=None):
    ds = image_data(config) if data is None else data
    task = "cce" if config.loss == "cce" else config.loss
    return ImageProblem(
        ds.train_images, ds.test_images, config.budget, task, ds.train_labels, ds.test_labels,
        config.noise_sigma, config.hidden,
    )


def _image_metric(config):
    return "accuracy" if config.loss == "cce" else config.loss


def run_image(config, out_dir=None, data=None, baselines=True):
    """NODE plus variance and random baselines at one budget.

    Returns a dict of metric summaries keyed ``node``, ``variance`` and
    ``random`` (a list, one per repeat).
    """
    problem = image_problem(config, data)
    metric = _image_metric(config)
    results = {}
    runs = [("node", config)]
    if baselines:
        runs.append(("variance", config.replace(lr_design=0.0, init="variance")))
        runs += [
            (f"random-{r}", config.replace(lr_design=0.0, init="random", seed=config.seed + r))
            for r in range(config.repeats)
        ]
    for name, cfg in runs:
        trainer = Trainer(cfg, problem)
        trace = trainer.run()
        score = evaluate(trace.model, trace.final_design, problem, metric, rng=cfg.seed)
        results[name] = score
        _log(f"M={cfg.budget} {name}: mean {metric} {score.mean:.5f}")
        if out_dir is not None:
            sub = Path(out_dir) / name
            summary = {"experiment": "image", "design": name, "config": cfg.to_dict(), metric: score.to_dict(),
                       "final_design": trace.final_design.locations.tolist(), "wall_time": trace.wall_time}
            write_run_directory(sub, cfg, trace, summary, trainer)
            nio.svg_pixel_design(sub / "design.svg", problem.grid_shape, trace.final_design.locations,
                                 trace.initial_design.locations, title=f"{name}, M = {cfg.budget}")
    out = {"node": results["node"]}
    if baselines:
        out["variance"] = results["variance"]
        out["random"] = [results[f"random-{r}"] for r in range(config.repeats)]
    if out_dir is not None:
        groups = {k: v.values for k, v in results.items()}
        nio.svg_boxes(Path(out_dir) / "scores.svg", groups, ylabel=metric, log=metric != "accuracy")
        nio.write_json(Path(out_dir) / "summary.json", {k: v.to_dict() for k, v in results.items()})
    return out


# -- CT ------------------------------------------------------------------------------------


def ct_problem(config):
    rng = np.random.default_rng([config.seed, 7])
    train = make_phantoms(config.n_train, config.n, rng)
    val = make_phantoms(config.n_val, config.n, rng)
    return CTProblem(train, val, config.budget, config.rho, config.noise_sigma, config.noise_kind,
                     config.hidden, tau=config.tau if config.tau is not None else math.pi)


def run_ct(config, out_dir=None, baseline=True):
    """NODE angles against the equidistant baseline; returns median validation errors."""
    problem = ct_problem(config)
    runs = [("node", config)]
    if baseline:
        runs.append(("equidistant", config.replace(lr_design=0.0, init="uniform", tau=math.pi)))
    result = {}
    for name, cfg in runs:
        trainer = Trainer(cfg, problem)
        trace = trainer.run()
        score = evaluate(trace.model, trace.final_design, problem, "mse", rng=cfg.seed)
        result[name] = {"median_mse": score.median, "mse": score.to_dict(),
                        "angles": trace.final_design.locations.ravel().tolist()}
        _log(f"ct {name}: median mse {score.median:.6f}")
        if out_dir is not None:
            write_run_directory(Path(out_dir) / name, cfg, trace, {"experiment": "ct", **result[name]}, trainer)
    if out_dir is not None:
        nio.write_json(Path(out_dir) / "summary.json", result)
    return result


def run_ct_adaptive(config, n_truths=5, out_dir=None):
    """Adaptive rounds starting from ``{n pi / 5 : n = 1..5}``; returns the final state."""
    problem = ct_problem(config)
    rng = np.random.default_rng([config.seed, 11])
    truths = make_phantoms(n_truths, config.n, rng)
    w0 = np.mod(np.arange(1, config.increment + 1) * math.pi / config.increment, math.pi)
    state = AdaptiveState.start(truths, w0, problem, rng, config.increment, config.rounds)
    data_rng = np.random.default_rng([config.seed, 13])

    def fresh():
        return make_phantoms(config.n_train, config.n, data_rng)

    state = train_adaptive(state, config, problem, rng, fresh_training=fresh)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nio.write_json(out / "config.json", config.to_dict())
        nio.write_json(out / "summary.json", {
            "experiment": "ct-adaptive", "design": state.design.tolist(), "median_mse": state.medians,
            "rounds": state.iteration, "measurement_shape": list(state.measurements.shape),
        })
        nio.write_array(out / "measurements.node", state.measurements)
        for i, trace in enumerate(state.traces):
            trace.to_csv(out / f"trace_round{i}.csv")
    return state
