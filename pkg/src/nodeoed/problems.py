"""Experiment definitions: how a batch is observed at the current design and scored.

Each problem owns its data and forward model and exposes the same small
surface used by :class:`nodeoed.trainer.Trainer`:

``space``, ``dataset_size``, ``make_model(rng)``, ``initial_design(config, rng)``,
``batch(indices_or_size, rng)``, ``loss(model, params, design, batch, rng, gamma)``
and ``predict(model, design, split, rng)``.

``loss`` returns ``(total, risk)`` so that the data-consistency term can be
inspected separately.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .design import (
    AdmissibleSpace,
    DesignVector,
    init_by_variance,
    init_random,
    init_uniform,
)
from .forward import (
    NoiseModel,
    RadonGeometry,
    exp_clean,
    pixel_network_input,
    radon,
    radon_op,
    sample_exp_prior,
)
from .interp import resample
from .nn import MLP

__all__ = ["ExponentialProblem", "ImageProblem", "CTProblem"]


def _reconstruction_risk(pred, target, loss):
    diff = ad.sub(pred, target)
    per_sample = ad.sq_norm(diff) if loss == "mse" else ad.max_sq(diff)
    return ad.mean(per_sample)


class ExponentialProblem:
    """Recover ``(log b, a)`` of ``y = b exp(a t)`` from log-space samples at ``m`` times.

    ``inputs`` selects the network input: ``"locations+measurements"`` (length
    ``2m``) or ``"measurements"`` (length ``m``).
    """

    kind = "exponential"
    dataset_size = None

    def __init__(self, m, noise_sigma=0.05, hidden=(256,), inputs="locations+measurements"):
        if m < 1:
            raise ContractError("need at least one sampling time")
        if inputs not in ("locations+measurements", "measurements"):
            raise ContractError(f"unknown input convention {inputs!r}")
        self.m = int(m)
        self.noise = NoiseModel(noise_sigma, "log")
        self.hidden = list(hidden)
        self.inputs = inputs
        self.space = AdmissibleSpace.unit_interval()

    def make_model(self, rng):
        n_in = 2 * self.m if self.inputs == "locations+measurements" else self.m
        return MLP.init([n_in, *self.hidden, 2], "identity", rng)

    def initial_design(self, config, rng):
        if config.init == "uniform":
            return DesignVector((np.arange(self.m) + 0.5) / self.m, self.space, {"init": "uniform"})
        if config.init == "explicit":
            return DesignVector(config.design, self.space, {"init": "explicit"})
        if config.init != "random":
            raise ContractError(f"init {config.init!r} is not available for the exponential problem")
        return init_random(self.space, self.m, rng)

    def batch(self, size, rng):
        return sample_exp_prior(rng, size)

    def _inputs(self, t, values):
        if self.inputs == "measurements":
            return values
        B = ad.value_of(values).shape[0]
        return ad.concat([ad.broadcast_rows(ad.reshape(t, (-1,)), B), values], axis=1)

    def loss(self, model, params, design, batch, rng, gamma=0.0, loss="mse"):
        t = design
        clean = exp_clean(batch, t)
        noisy = ad.add(clean, self.noise.sample(ad.value_of(clean), rng))
        pred = model.apply(self._inputs(t, noisy), params)
        risk = _reconstruction_risk(pred, batch.loglinear(), loss)
        if gamma == 0:
            return risk, risk
        # data consistency: predicted parameters must reproduce the observed log data
        fitted = ad.add(ad.columns(pred, [0]), ad.mul(ad.columns(pred, [1]), ad.reshape(t, (1, -1))))
        # the observed data depend on the design too, so they stay on the tape
        consistency = ad.mean(ad.sq_norm(ad.sub(fitted, noisy)))
        return ad.add(risk, ad.scale(consistency, gamma)), risk

    def predict(self, model, design, n_samples, rng):
        batch = self.batch(n_samples, rng)
        t = design.locations.ravel()
        clean = np.asarray(exp_clean(batch, t))
        noisy = clean + self.noise.sample(clean, rng)
        return model.predict(np.asarray(self._inputs(t, noisy))), batch.loglinear()

    def check_design(self, design):
        t = design.locations.ravel()
        if self.m >= 2 and np.ptp(t) == 0:
            warnings.warn("all sampling times coincide; the design is singular", RuntimeWarning)


class ImageProblem:
    """Pixel selection on ``H x W`` images: reconstruct the image or classify it.

    ``task`` is ``"mse"`` or ``"max"`` (reconstruction with a sigmoid output) or
    ``"cce"`` (ten-way classification).  Observations are bilinear samples at
    continuous pixel coordinates plus Gaussian noise; the network sees
    ``[normalised coordinates; intensities]``.  There is no forward model, so
    the data-consistency weight is ignored.
    """

    kind = "image"

    def __init__(
        self,
        train_images,
        test_images,
        budget,
        task="mse",
        train_labels=None,
        test_labels=None,
        noise_sigma=0.05,
        hidden=(512,),
    ):
        if task not in ("mse", "max", "cce"):
            raise ContractError(f"unknown image task {task!r}")
        self.train_images = np.asarray(train_images, dtype=np.float64)
        self.test_images = np.asarray(test_images, dtype=np.float64)
        if task == "cce" and (train_labels is None or test_labels is None):
            raise ContractError("classification needs labels")
        self.train_labels = None if train_labels is None else np.asarray(train_labels, dtype=np.float64)
        self.test_labels = None if test_labels is None else np.asarray(test_labels, dtype=np.float64)
        self.budget = int(budget)
        self.task = task
        self.noise = NoiseModel(noise_sigma, "additive")
        self.hidden = list(hidden)
        self.grid_shape = self.train_images.shape[1:]
        self.space = AdmissibleSpace.pixel_grid(*self.grid_shape)

    @property
    def dataset_size(self):
        return self.train_images.shape[0]

    def make_model(self, rng):
        n_out = 10 if self.task == "cce" else int(np.prod(self.grid_shape))
        return MLP.init([3 * self.budget, *self.hidden, n_out], "softmax" if self.task == "cce" else "sigmoid", rng)

    def initial_design(self, config, rng):
        if config.init == "variance":
            return init_by_variance(self.train_images, self.budget, self.space)
        if config.init == "random":
            return init_random(self.space, self.budget, rng, integer=True)
        if config.init == "explicit":
            return DesignVector(config.design, self.space, {"init": "explicit"})
        raise ContractError(f"init {config.init!r} is not available for the image problem")

    def batch(self, indices, rng):
        labels = None if self.train_labels is None else self.train_labels[indices]
        return self.train_images[indices], labels

    def _forward(self, model, params, coords, images, rng, logits=False):
        clean = ad.gather_bilinear(images, coords)
        noisy = ad.add(clean, self.noise.sample(ad.value_of(clean), rng))
        inp = pixel_network_input(coords, noisy, self.grid_shape)
        return model.apply(inp, params, logits=logits)

    def loss(self, model, params, design, batch, rng, gamma=0.0, loss=None):
        images, labels = batch
        if self.task == "cce":
            logits = self._forward(model, params, design, images, rng, logits=True)
            risk = ad.mean(ad.softmax_cce(logits, labels))
        else:
            pred = self._forward(model, params, design, images, rng)
            risk = _reconstruction_risk(pred, images.reshape(images.shape[0], -1), self.task)
        return risk, risk

    def predict(self, model, design, split="test", rng=None):
        images = self.test_images if split == "test" else self.train_images
        labels = self.test_labels if split == "test" else self.train_labels
        rng = np.random.default_rng(rng)
        out = np.asarray(self._forward(model, None, design.locations, images, rng))
        truth = labels if self.task == "cce" else images.reshape(images.shape[0], -1)
        return out, truth

    def check_design(self, design):
        pass


class CTProblem:
    """Sparse-view CT: learn view angles and a dense reconstruction network.

    The noisy sinogram at the trainable angles is merged with the columns of
    any fixed ``past_angles``, sorted by angle, resampled to ``n x n`` and
    mapped to the image by an MLP with sigmoid output.
    """

    kind = "ct"

    def __init__(
        self,
        train_images,
        val_images,
        budget,
        rho=64,
        noise_level=0.01,
        noise_kind="relative",
        hidden=(1024,),
        past_angles=(),
        tau=np.pi,
    ):
        self.train_images = np.asarray(train_images, dtype=np.float64)
        self.val_images = np.asarray(val_images, dtype=np.float64)
        self.n = self.train_images.shape[-1]
        self.rho = int(rho)
        self.budget = int(budget)
        self.noise = NoiseModel(noise_level, noise_kind)
        self.hidden = list(hidden)
        self.past_angles = np.asarray(past_angles, dtype=np.float64).ravel()
        self.tau = float(tau)
        self.space = AdmissibleSpace.angles(np.pi)
        self.geometry = RadonGeometry(self.n, self.rho, np.zeros(1))

    @property
    def dataset_size(self):
        return self.train_images.shape[0]

    def with_past(self, past_angles, budget=None, tau=None, train_images=None):
        return CTProblem(
            self.train_images if train_images is None else train_images,
            self.val_images,
            self.budget if budget is None else budget,
            self.rho,
            self.noise.sigma,
            self.noise.kind,
            self.hidden,
            past_angles,
            self.tau if tau is None else tau,
        )

    def make_model(self, rng):
        return MLP.init([self.n * self.n, *self.hidden, self.n * self.n], "sigmoid", rng)

    def initial_design(self, config, rng):
        if config.init == "uniform":
            return init_uniform(self.space, self.budget, config.tau if config.tau is not None else self.tau)
        if config.init == "random":
            return init_random(self.space, self.budget, rng)
        if config.init == "explicit":
            return DesignVector(config.design, self.space, {"init": "explicit"})
        raise ContractError(f"init {config.init!r} is not available for the CT problem")

    def batch(self, indices, rng):
        return self.train_images[indices]

    def sinograms(self, images, angles, rng):
        """Noisy sinograms ``(B, rho, m_new + m_past)`` with columns sorted by angle.

        ``angles`` (the trainable ones) may be a tape variable; the fixed past
        columns are simulated with their own noise draw.
        """
        clean = radon_op(images, angles, self.geometry)
        new = ad.add(clean, self.noise.sample(ad.value_of(clean), rng))
        if self.past_angles.size == 0:
            return ad.columns(new, self.column_order(ad.value_of(angles)))
        past_clean = radon(images, self.geometry.with_angles(self.past_angles))
        past = past_clean + self.noise.sample(past_clean, rng)
        return ad.columns(ad.concat([new, past], axis=-1), self.column_order(ad.value_of(angles)))

    def column_order(self, new_angles):
        """Permutation sorting ``[new, past]`` by angle (stable, so ties keep new first)."""
        all_angles = np.concatenate([np.asarray(new_angles, dtype=np.float64).ravel(), self.past_angles])
        return np.argsort(all_angles, kind="stable")

    def reconstruct(self, model, sinograms, params=None):
        S = sinograms
        B = ad.value_of(S).shape[0]
        inp = ad.reshape(resample(S, self.n), (B, self.n * self.n))
        return model.apply(inp, params)

    def loss(self, model, params, design, batch, rng, gamma=0.0, loss="mse"):
        images = batch
        B = images.shape[0]
        sino = self.sinograms(images, design, rng)
        pred = self.reconstruct(model, sino, params)
        risk = _reconstruction_risk(pred, images.reshape(B, -1), loss)
        if gamma == 0:
            return risk, risk
        # re-project the reconstruction at all current angles and compare with the data
        x_hat = ad.reshape(pred, (B, self.n, self.n))
        refit = radon_op(x_hat, design, self.geometry)
        if self.past_angles.size:
            past_geom = self.geometry.with_angles(self.past_angles)
            refit = ad.concat([refit, radon_op(x_hat, self.past_angles, past_geom)], axis=-1)
        refit = ad.columns(refit, self.column_order(ad.value_of(design)))
        consistency = ad.mean(ad.sq_norm(ad.reshape(ad.sub(refit, sino), (B, -1))))
        return ad.add(risk, ad.scale(consistency, gamma)), risk

    def predict(self, model, design, split="val", rng=None):
        images = self.val_images if split == "val" else self.train_images
        rng = np.random.default_rng(rng)
        sino = self.sinograms(images, design.locations.ravel(), rng)
        return np.asarray(self.reconstruct(model, sino)), images.reshape(images.shape[0], -1)

    def check_design(self, design):
        pass
