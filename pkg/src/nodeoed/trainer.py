"""Joint training of a reconstruction network and its measurement design.

One step draws a batch, simulates noisy observations at the current design,
runs the network, and takes one Adam step for the network parameters and one
for the design (each with its own learning rate), followed by projection of
the design back into its admissible box.  The adaptive variant repeats this
with previously acquired measurements supplied as fixed inputs.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as nio
from .autodiff import ContractError, Tape
from .design import DesignVector, endpoint_split, project_to_box
from .nn import MLP, AdamState, adam_step

__all__ = [
    "TrainConfig",
    "TrainingTrace",
    "Trainer",
    "NonFiniteLossError",
    "CheckpointError",
    "train_node",
    "train_baseline",
    "AdaptiveState",
    "train_adaptive",
    "MetricSummary",
    "per_sample_metric",
    "evaluate",
    "write_run_directory",
]

CKPT_MAGIC = b"NODECKPT"
CKPT_VERSION = 1
MAX_TRACE_ROWS = 100_000


class NonFiniteLossError(FloatingPointError):
    """Training diverged; the trainer still holds the last finite state."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the trainer."""


@dataclass
class TrainConfig:
    """Everything needed to reproduce a run.

    ``epochs`` counts passes over the training set for dataset-backed
    problems; for problems that sample fresh data every step (the exponential
    benchmark) one epoch is one step.
    """

    experiment: str = "exponential"
    budget: int = 3
    epochs: int = 1000
    batch_size: int = 256
    lr_theta: float = 1e-3
    lr_design: float = 1e-1
    gamma: float = 0.0
    noise_sigma: float = 0.05
    noise_kind: str = "log"
    loss: str = "mse"
    init: str = "random"
    seed: int = 0
    hidden: tuple = (256,)
    exp_inputs: str = "locations+measurements"
    subset: int | None = None
    test_subset: int | None = None
    n: int = 32
    rho: int = 64
    tau: float | None = None
    n_train: int = 512
    n_val: int = 64
    log_every: int = 10
    warm_start: bool = True
    increment: int = 5
    rounds: int = 2
    repeats: int = 5
    design: list | None = None
    data_dir: str | None = None

    def validate(self):
        if self.experiment not in ("exponential", "image", "ct"):
            raise ContractError(f"unknown experiment {self.experiment!r}")
        if not self.lr_theta > 0:
            raise ContractError("lr_theta must be positive")
        if not self.lr_design >= 0:
            raise ContractError("lr_design must be non-negative (0 freezes the design)")
        if not self.gamma >= 0:
            raise ContractError("gamma must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        if self.budget < 1:
            raise ContractError("budget must be at least 1")
        if self.loss not in ("mse", "max", "cce"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.init not in ("variance", "uniform", "random", "explicit"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.init == "explicit" and self.design is None:
            raise ContractError("explicit init needs a design")
        if self.log_every < 1:
            raise ContractError("log_every must be at least 1")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class TrainingTrace:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    risks: list = field(default_factory=list)
    designs: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    initial_design: DesignVector | None = None
    final_design: DesignVector | None = None
    model: MLP | None = None
    theta_checksum: str = ""
    wall_time: float = 0.0

    def log(self, step, loss, risk, design, metric=None):
        if self.steps and step <= self.steps[-1]:
            raise ContractError("trace steps must increase")
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.risks.append(float(risk))
        self.designs.append(np.array(design.locations, copy=True))
        self.metrics.append(None if metric is None else float(metric))

    def design_history(self):
        """Array ``(n_logged, M, D)`` of design snapshots."""
        return np.stack(self.designs) if self.designs else np.zeros((0, 0, 0))

    def rows(self, max_rows=MAX_TRACE_ROWS):
        n = len(self.steps)
        keep = np.arange(n)
        if n > max_rows:
            keep = np.unique(np.linspace(0, n - 1, max_rows).round().astype(int))
        out = []
        for i in keep:
            row = {"step": self.steps[i], "loss": self.losses[i], "risk": self.risks[i]}
            loc = self.designs[i]
            for j in range(loc.shape[0]):
                if loc.shape[1] == 1:
                    row[f"w{j}"] = loc[j, 0]
                else:
                    for d in range(loc.shape[1]):
                        row[f"w{j}_{d}"] = loc[j, d]
            row["metric"] = "" if self.metrics[i] is None else self.metrics[i]
            out.append(row)
        return out

    def to_csv(self, path):
        nio.write_csv(path, self.rows())


class Trainer:
    """Owns the network, the design, both optimizer states and the random stream.

    Parameters
    ----------
    config : TrainConfig
    problem
        An experiment object from :mod:`nodeoed.problems`.
    model : MLP, optional
        Start from these weights instead of a fresh initialization.
    design : DesignVector, optional
        Start from this design instead of ``problem.initial_design``.
    """

    def __init__(self, config, problem, model=None, design=None):
        self.config = config.validate()
        self.problem = problem
        self.rng = np.random.default_rng(config.seed)
        fresh = problem.make_model(self.rng)
        self.model = fresh if model is None else model.copy()
        if design is None:
            design = problem.initial_design(config, self.rng)
        self.initial_design = design
        self.design = project_to_box(design)
        self.opt_theta = AdamState(config.lr_theta, "theta")
        self.opt_design = AdamState(config.lr_design, "design")
        self.step = 0
        self._perm = None
        self._cursor = 0
        self.trace = TrainingTrace(initial_design=self.design)

    # -- schedule ------------------------------------------------------------------

    @property
    def steps_per_epoch(self):
        K = self.problem.dataset_size
        if K is None:
            return 1
        return math.ceil(K / min(self.config.batch_size, K))

    @property
    def total_steps(self):
        return self.config.epochs * self.steps_per_epoch

    def _next_batch(self):
        K = self.problem.dataset_size
        B = self.config.batch_size
        if K is None:
            return self.problem.batch(B, self.rng)
        if self._perm is None or self._cursor >= K:
            self._perm = self.rng.permutation(K)
            self._cursor = 0
        idx = self._perm[self._cursor : self._cursor + B]
        self._cursor += B
        return self.problem.batch(idx, self.rng)

    # -- one optimization step --------------------------------------------------------

    def loss_and_grads(self, batch):
        tape = Tape()
        params = {k: tape.leaf(v, k) for k, v in self.model.params.items()}
        w = tape.leaf(self.design.locations, "design")
        total, risk = self.problem.loss(
            self.model, params, w, batch, self.rng, gamma=self.config.gamma, loss=self.config.loss
        )
        loss_value = float(ad.value_of(total))
        if not math.isfinite(loss_value):
            raise NonFiniteLossError(f"non-finite loss at step {self.step}")
        grads = tape.backward(total)
        return loss_value, float(ad.value_of(risk)), grads

    def train_step(self):
        batch = self._next_batch()
        loss, risk, grads = self.loss_and_grads(batch)
        g_theta = {k: grads[k] for k in self.model.params}
        g_design = {"w": grads["design"]}
        for name, group in (("theta", g_theta), ("design", g_design)):
            for g in group.values():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteLossError(f"non-finite gradient in group {name!r} at step {self.step}")
        new_params, _ = adam_step(self.model.params, g_theta, self.opt_theta)
        self.model = MLP(self.model.sizes, self.model.output, new_params)
        if self.config.lr_design > 0:
            new_w, _ = adam_step({"w": self.design.locations}, g_design, self.opt_design)
            self.design = project_to_box(self.design.with_locations(new_w["w"], **self.design.meta))
            with warnings.catch_warnings():
                warnings.simplefilter("default")
                self.problem.check_design(self.design)
        self.step += 1
        return loss, risk

    def run(self, steps=None, checkpoint_path=None):
        """Train for ``steps`` more steps (default: up to ``total_steps``)."""
        start = time.perf_counter()
        target = self.total_steps if steps is None else self.step + int(steps)
        every = self.config.log_every
        loss = risk = float("nan")
        while self.step < target:
            try:
                loss, risk = self.train_step()
            except NonFiniteLossError:
                if checkpoint_path is not None:
                    self.save(checkpoint_path)
                raise
            if self.step % every == 0 or self.step == target:
                if not self.trace.steps or self.trace.steps[-1] != self.step:
                    self.trace.log(self.step, loss, risk, self.design)
        self.trace.final_design = self.design
        self.trace.model = self.model
        self.trace.theta_checksum = self.model.checksum()
        self.trace.wall_time += time.perf_counter() - start
        return self.trace

    # -- checkpoints ----------------------------------------------------------------

    def _state_arrays(self):
        arrays = {f"theta/{k}": v for k, v in self.model.params.items()}
        arrays["design"] = self.design.locations
        for opt in (self.opt_theta, self.opt_design):
            for k in opt.m:
                arrays[f"adam_{opt.name}/m/{k}"] = opt.m[k]
                arrays[f"adam_{opt.name}/v/{k}"] = opt.v[k]
        if self._perm is not None:
            arrays["perm"] = self._perm.astype(np.float64)
        return arrays

    def save(self, path):
        """Write ``(theta, design, optimizer state, rng state, step)`` atomically."""
        arrays = self._state_arrays()
        header = {
            "config": self.config.to_dict(),
            "sizes": self.model.sizes,
            "output": self.model.output,
            "step": self.step,
            "cursor": self._cursor,
            "adam_steps": {"theta": self.opt_theta.step, "design": self.opt_design.step},
            "rng": self.rng.bit_generator.state,
            "trace": {
                "steps": self.trace.steps,
                "losses": self.trace.losses,
                "risks": self.trace.risks,
                "metrics": self.trace.metrics,
                "designs": [d.tolist() for d in self.trace.designs],
            },
            "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()],
        }
        head = json.dumps(header).encode()
        blobs = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
        nio.atomic_write_bytes(path, CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + blobs)

    def load(self, path):
        """Restore state saved by :meth:`save`; refuses mismatched files without mutating ``self``."""
        raw = Path(path).read_bytes()
        if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise CheckpointError("bad magic, not a checkpoint file")
        off = len(CKPT_MAGIC)
        if len(raw) < off + 8:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<II", raw[off : off + 8])
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        off += 8
        try:
            header = json.loads(raw[off : off + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"corrupt checkpoint header: {err}") from None
        off += hlen
        if list(header["sizes"]) != list(self.model.sizes) or header["output"] != self.model.output:
            raise CheckpointError(f"network shape {header['sizes']} does not match {self.model.sizes}")
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            end = off + 8 * count
            if end > len(raw):
                raise CheckpointError("truncated checkpoint payload")
            arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
            off = end
        if arrays["design"].shape != self.design.locations.shape:
            raise CheckpointError(f"design shape {arrays['design'].shape} does not match {self.design.locations.shape}")

        params = {k[len("theta/"):]: v for k, v in arrays.items() if k.startswith("theta/")}
        self.model = MLP(header["sizes"], header["output"], params)
        self.design = self.design.with_locations(arrays["design"], **self.design.meta)
        for opt in (self.opt_theta, self.opt_design):
            prefix = f"adam_{opt.name}/"
            opt.m = {k[len(prefix) + 2:]: v for k, v in arrays.items() if k.startswith(prefix + "m/")}
            opt.v = {k[len(prefix) + 2:]: v for k, v in arrays.items() if k.startswith(prefix + "v/")}
            opt.step = int(header["adam_steps"][opt.name])
        self.step = int(header["step"])
        self._cursor = int(header["cursor"])
        self._perm = arrays["perm"].astype(np.int64) if "perm" in arrays else None
        self.rng.bit_generator.state = header["rng"]
        t = header["trace"]
        self.trace = TrainingTrace(
            list(t["steps"]), list(t["losses"]), list(t["risks"]),
            [np.array(d, dtype=np.float64) for d in t["designs"]], list(t["metrics"]),
            initial_design=self.trace.initial_design,
        )
        return self


def train_node(config, problem, checkpoint_path=None):
    """Jointly optimize network and design; returns the :class:`TrainingTrace`."""
    trainer = Trainer(config, problem)
    return trainer.run(checkpoint_path=checkpoint_path)


def train_baseline(config, problem, kind="random"):
    """Train only the network on a frozen ``random`` or ``variance`` design.

    Random designs are repeated ``config.repeats`` times with seeds
    ``seed, seed + 1, ...``; returns a list of traces.
    """
    if kind not in ("random", "variance", "uniform", "explicit"):
        raise ContractError(f"unknown baseline design {kind!r}")
    repeats = config.repeats if kind == "random" else 1
    traces = []
    for r in range(repeats):
        cfg = config.replace(lr_design=0.0, init=kind, seed=config.seed + r)
        traces.append(Trainer(cfg, problem).run())
    return traces


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class MetricSummary:
    metric: str
    values: np.ndarray

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def median(self):
        return float(np.median(self.values))

    def quantiles(self, qs=(0.05, 0.25, 0.75, 0.95)):
        return {f"q{int(round(100 * q)):02d}": float(np.quantile(self.values, q)) for q in qs}

    def to_dict(self):
        return {"metric": self.metric, "n": int(self.values.size), "mean": self.mean, "median": self.median, **self.quantiles()}


def per_sample_metric(prediction, truth, metric):
    """Per-sample ``mse`` (mean squared deviation), ``max`` (largest squared deviation) or ``accuracy`` (0/1)."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction {p.shape} and truth {t.shape} differ")
    p = p.reshape(p.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    if metric == "mse":
        return np.mean((p - t) ** 2, axis=1)
    if metric == "max":
        return np.max((p - t) ** 2, axis=1)
    if metric == "accuracy":
        return (np.argmax(p, axis=1) == np.argmax(t, axis=1)).astype(np.float64)
    raise ContractError(f"unknown metric {metric!r}")


def evaluate(model, design, problem, metric="mse", rng=0, **predict_kw):
    """Score ``model`` at ``design`` on the problem's held-out data."""
    out, truth = problem.predict(model, design, rng=rng, **predict_kw)
    return MetricSummary(metric, per_sample_metric(out, truth, metric))


# -- adaptive design ----------------------------------------------------------------------


@dataclass
class AdaptiveState:
    """Accumulated angles and the measurements of the fixed true objects.

    ``measurements`` has shape ``(n_objects, rho, len(design))`` with columns
    in design order; ``design`` is ``w^i = (w^{i-1}, w*)``.
    """

    truths: np.ndarray
    design: np.ndarray
    measurements: np.ndarray
    increment: int = 5
    max_rounds: int = 2
    target_loss: float | None = None
    iteration: int = 0
    model: MLP | None = None
    medians: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    @classmethod
    def start(cls, truths, initial_angles, problem, rng, increment=5, max_rounds=2, target_loss=None):
        """Measure ``truths`` at the initial angles with fresh noise."""
        w0 = np.asarray(initial_angles, dtype=np.float64).ravel()
        y0 = measure(problem, truths, w0, rng)
        return cls(np.asarray(truths, dtype=np.float64), w0, y0, increment, max_rounds, target_loss)

    def check(self):
        expected = self.design.size
        if self.measurements.shape[-1] != expected:
            raise ContractError("measurement columns do not match the design length")
        return True

    @property
    def done(self):
        if self.iteration >= self.max_rounds:
            return True
        return self.target_loss is not None and bool(self.medians) and self.medians[-1] <= self.target_loss


def measure(problem, images, angles, rng):
    """Noisy sinograms of ``images`` at ``angles`` in the given column order."""
    from .forward import radon

    clean = radon(np.asarray(images, dtype=np.float64), problem.geometry.with_angles(angles))
    return clean + problem.noise.sample(clean, rng)


def _median_truth_mse(problem, model, state):
    order = np.argsort(state.design, kind="stable")
    sino = state.measurements[..., order]
    pred = np.asarray(problem.reconstruct(model, sino))
    errs = per_sample_metric(pred, state.truths.reshape(state.truths.shape[0], -1), "mse")
    return float(np.median(errs))


def train_adaptive(state, config, problem, rng=None, fresh_training=None):
    """Run adaptive rounds until the stopping rule fires.

    Before the first increment a network is trained on the initial angles
    alone (design frozen), so that every round has a reference error.  Each
    round then trains the network (warm-started if ``config.warm_start``) and
    ``increment`` new angles, initialized at ``n pi / 30``, with the
    accumulated angles as fixed past inputs; the true objects are then
    measured at the new angles and appended.

    ``fresh_training``, if given, is called once per round and returns new
    training images drawn from the prior; reusing one set across warm-started
    rounds overfits it.

    Returns the updated state; per-round traces are in ``state.traces`` and
    median true-object errors in ``state.medians``.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    state.check()
    if state.model is None:
        base = problem.with_past((), budget=state.design.size)
        cfg = config.replace(lr_design=0.0, init="explicit", design=state.design.tolist(), budget=state.design.size)
        trace = Trainer(cfg, base).run()
        state.model = trace.model
        state.traces.append(trace)
        state.medians.append(_median_truth_mse(base, state.model, state))

    while not state.done:
        k = state.increment
        train = None if fresh_training is None else fresh_training()
        round_problem = problem.with_past(state.design, budget=k, train_images=train)
        init = (np.arange(1, k + 1) * np.pi / 30).tolist()
        cfg = config.replace(
            budget=k, init="explicit", design=init, seed=int(rng.integers(2**31)),
        )
        trainer = Trainer(cfg, round_problem, model=state.model if config.warm_start else None)
        trace = trainer.run()
        w_star = trace.final_design.locations.ravel()
        y_new = measure(problem, state.truths, w_star, rng)
        state.design = np.concatenate([state.design, w_star])
        state.measurements = np.concatenate([state.measurements, y_new], axis=-1)
        state.model = trace.model
        state.traces.append(trace)
        state.iteration += 1
        state.check()
        state.medians.append(_median_truth_mse(round_problem, state.model, state))
    return state


# -- run directory ------------------------------------------------------------------------


def write_run_directory(path, config, trace, summary, trainer=None):
    """Write ``config.json``, ``trace.csv``, ``design_final.csv``, ``summary.json`` and ``checkpoint.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nio.write_json(path / "config.json", config.to_dict())
    trace.to_csv(path / "trace.csv")
    loc = trace.final_design.locations
    cols = ["w"] if loc.shape[1] == 1 else [f"w_{d}" for d in range(loc.shape[1])]
    nio.write_csv(path / "design_final.csv", [{"index": i, **dict(zip(cols, row))} for i, row in enumerate(loc)])
    nio.write_json(path / "summary.json", summary)
    if trainer is not None:
        trainer.save(path / "checkpoint.bin")
    return path


def exponential_summary(config, trace):
    split = endpoint_split(trace.final_design)
    m = trace.final_design.budget
    theory = math.sqrt(2.0) - 1.0
    return {
        "experiment": "exponential",
        "config": config.to_dict(),
        "final_design": trace.final_design.locations.ravel().tolist(),
        "k0": split.k0,
        "k1": split.k1,
        "k0_fraction": split.k0 / m,
        "k1_fraction": split.k1 / m,
        "theory_k1_fraction": theory,
        "theory_gap": split.k1 / m - theory,
        "max_boundary_distance": split.max_boundary_distance,
        "final_loss": trace.losses[-1] if trace.losses else None,
        "theta_checksum": trace.theta_checksum,
        "wall_time": trace.wall_time,
    }
