"""Finite-difference checks of every hand-written derivative in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .forward import RadonGeometry, make_phantoms, radon_op
from .interp import resample
from .nn import MLP, gradient_check

__all__ = ["CheckResult", "run_suite", "NETWORK_TOL", "RADON_TOL"]

NETWORK_TOL = 1e-5
RADON_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol


def _mlp_case(output, rng):
    model = MLP.init([4, 6, 5, 3], output, rng)
    x = rng.standard_normal((7, 4))
    target = rng.random((7, 3))

    def f(v):
        params = {k: v[k] for k in model.params}
        if output == "softmax":
            # the softmax head is differentiated through the fused cross-entropy
            labels = np.eye(3)[np.argmax(target, axis=1)]
            return ad.mean(ad.softmax_cce(model.apply(v["x"], params, logits=True), labels))
        pred = model.apply(v["x"], params)
        return ad.mean(ad.sq_norm(ad.sub(pred, target)))

    return gradient_check(f, {**model.params, "x": x})


def _max_loss_case(rng):
    # distinct squared deviations keep the argmax away from ties
    pred = rng.random((5, 8))
    target = pred + np.linspace(0.1, 0.8, 8) * rng.choice([-1, 1], size=(5, 8))
    return gradient_check(lambda v: ad.mean(ad.max_sq(ad.sub(v["p"], target))), {"p": pred})


def _cce_case(rng):
    logits = rng.standard_normal((6, 10))
    labels = np.eye(10)[rng.integers(0, 10, size=6)]
    return gradient_check(lambda v: ad.mean(ad.softmax_cce(v["z"], labels)), {"z": logits})


def _linear_case(rng):
    field = rng.standard_normal((3, 9))
    query = np.array([0.3, 2.7, 5.45, 7.9])
    weights = rng.standard_normal((3, 4))
    return gradient_check(lambda v: ad.total(ad.mul(ad.gather_linear(v["f"], v["q"]), weights)), {"f": field, "q": query})


def _bilinear_case(rng):
    images = rng.random((3, 8, 8))
    coords = np.array([[0.4, 1.3], [3.6, 6.2], [5.25, 0.7], [6.8, 6.9]])
    weights = rng.standard_normal((3, 4))
    return gradient_check(
        lambda v: ad.total(ad.mul(ad.gather_bilinear(v["x"], v["c"]), weights)), {"x": images, "c": coords}
    )


def _resample_case(rng):
    sino = rng.standard_normal((2, 12, 5))
    weights = rng.standard_normal((2, 8, 8))
    return gradient_check(lambda v: ad.total(ad.mul(resample(v["s"], 8), weights)), {"s": sino})


def _radon_case(rng):
    n = 16
    geom = RadonGeometry(n, 24, np.zeros(1))
    images = make_phantoms(2, n, rng)
    angles = np.array([0.13, 0.9, 1.77, 2.6])
    weights = rng.standard_normal((2, 24, 4))
    return gradient_check(
        lambda v: ad.total(ad.mul(radon_op(v["x"], v["w"], geom), weights)), {"x": images, "w": angles}
    )


def _problem_case(problem, design, batch, gamma, rng):
    model = problem.make_model(rng)
    noise_seed = int(rng.integers(2**31))

    def f(v):
        params = {k: v[k] for k in model.params}
        total, _ = problem.loss(model, params, v["design"], batch, np.random.default_rng(noise_seed), gamma=gamma)
        return total

    # network leaves are covered by the layer cases; differencing them through a full pipeline is slow
    return gradient_check(f, {**model.params, "design": design}, check=["design"])


def _pipeline_cases(rng):
    from .problems import CTProblem, ExponentialProblem, ImageProblem
    from .forward import sample_exp_prior

    exp = ExponentialProblem(4, hidden=(16,))
    yield "pipeline-exponential", _problem_case(exp, np.array([[0.1], [0.35], [0.6], [0.9]]), sample_exp_prior(rng, 8), 0.5, rng), NETWORK_TOL

    images = rng.random((6, 8, 8))
    img = ImageProblem(images, images, 3, hidden=(10,))
    coords = np.array([[1.3, 2.6], [4.7, 0.2], [6.1, 5.45]])
    yield "pipeline-image", _problem_case(img, coords, img.batch(np.arange(6), rng), 0.0, rng), NETWORK_TOL

    phantoms = make_phantoms(3, 16, rng)
    ct = CTProblem(phantoms, phantoms, 3, rho=20, noise_kind="additive", hidden=(12,), past_angles=[0.4, 2.0])
    yield "pipeline-ct", _problem_case(ct, np.array([[0.2], [1.1], [2.9]]), phantoms, 0.1, rng), RADON_TOL


def run_suite(seed=0):
    """Run all checks; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    cases = [
        ("mlp-identity", _mlp_case("identity", rng), NETWORK_TOL),
        ("mlp-sigmoid", _mlp_case("sigmoid", rng), NETWORK_TOL),
        ("mlp-softmax", _mlp_case("softmax", rng), NETWORK_TOL),
        ("loss-max", _max_loss_case(rng), NETWORK_TOL),
        ("loss-cce", _cce_case(rng), NETWORK_TOL),
        ("interp-linear", _linear_case(rng), NETWORK_TOL),
        ("interp-bilinear", _bilinear_case(rng), NETWORK_TOL),
        ("resample", _resample_case(rng), NETWORK_TOL),
        ("radon", _radon_case(rng), RADON_TOL),
        *_pipeline_cases(rng),
    ]
    out = []
    for name, report, tol in cases:
        for leaf, err in sorted(report.errors.items()):
            out.append(CheckResult(f"{name}/{leaf}", float(err), tol))
    return out
