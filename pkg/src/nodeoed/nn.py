"""Dense networks, losses, Adam, and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape

__all__ = [
    "MLP",
    "forward",
    "loss_mse",
    "loss_max",
    "loss_cce",
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "gradient_check",
]

OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


@dataclass
class MLP:
    """Fully connected network with ReLU hidden layers.

    Parameters are kept in ``params`` under the keys ``W0, b0, W1, b1, ...``;
    ``W{i}`` has shape ``(out, in)``.
    """

    sizes: list
    output: str = "identity"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if len(self.sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output!r}")
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W, b = self.params.get(f"W{i}"), self.params.get(f"b{i}")
            if W is None:
                continue
            if np.shape(W) != (n_out, n_in) or np.shape(b) != (n_out,):
                raise ContractError(f"layer {i} parameters do not chain: {np.shape(W)}, {np.shape(b)}")

    @classmethod
    def init(cls, sizes, output="identity", rng=None):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        params = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            params[f"W{i}"] = rng.uniform(-lim, lim, size=(n_out, n_in))
            params[f"b{i}"] = np.zeros(n_out)
        return cls(list(sizes), output, params)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def copy(self):
        return MLP(list(self.sizes), self.output, {k: v.copy() for k, v in self.params.items()})

    def apply(self, x, params=None, logits=False):
        """Evaluate on a batch ``x`` of shape ``(B, in)``.

        ``params`` may hold tape variables; defaults to ``self.params``.  With
        ``logits=True`` the output activation is skipped.
        """
        p = self.params if params is None else params
        h = x
        for i in range(self.n_layers):
            h = ad.affine(h, p[f"W{i}"], p[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.relu(h)
        if logits or self.output == "identity":
            return h
        if self.output == "sigmoid":
            return ad.sigmoid(h)
        return ad.softmax(h)

    def predict(self, x):
        return np.asarray(self.apply(np.asarray(x, dtype=np.float64)))

    def checksum(self):
        """Order-stable digest of all parameter bytes."""
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()


def forward(model, x):
    """Evaluate ``model`` on a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.sizes[0]:
        raise ContractError(f"expected input of length {model.sizes[0]}, got shape {x.shape}")
    return model.predict(x[None, :])[0]


def _check_pair(p, t):
    if np.shape(ad.value_of(p)) != np.shape(ad.value_of(t)):
        raise ContractError(f"length mismatch: {np.shape(ad.value_of(p))} vs {np.shape(ad.value_of(t))}")


def loss_mse(prediction, target):
    """Squared Euclidean distance, per row for batched input."""
    _check_pair(prediction, target)
    out = ad.sq_norm(ad.sub(prediction, target))
    return float(out) if isinstance(out, np.ndarray) and out.ndim == 0 else out


def loss_max(prediction, target):
    """Largest squared pointwise deviation, per row for batched input."""
    _check_pair(prediction, target)
    out = ad.max_sq(ad.sub(prediction, target))
    return float(out) if isinstance(out, np.ndarray) and out.ndim == 0 else out


def loss_cce(probabilities, label_onehot):
    """``-log p[label]`` with ``p`` clamped at ``1e-12``."""
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(label_onehot, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError("probabilities and label differ in shape")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)):
        raise ContractError("label is not one-hot")
    out = -(t * np.log(np.maximum(p, 1e-12))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment accumulators for one parameter group."""

    lr: float
    name: str = "params"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(
            self.lr, self.name, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Returns new parameter arrays; ``state`` is advanced in place and also
    returned.  Raises ``FloatingPointError`` naming the group if any gradient
    is not finite (the state is left untouched in that case).
    """
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ContractError(f"gradient for {k!r} has shape {np.shape(g)}, expected {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {state.name!r} (entry {k!r})")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    new = dict(params)
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(params[k])
            v = np.zeros_like(params[k])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict  # leaf name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol):
        return self.max_error < tol


def gradient_check(evaluate, leaves, rel_step=1e-6, check=None):
    """Compare tape gradients of ``evaluate`` against central differences.

    Parameters
    ----------
    evaluate : callable
        ``evaluate(values)`` where ``values`` maps leaf names to arrays or
        tape variables; must return a scalar built from :mod:`autodiff` ops
        and must be deterministic.
    leaves : dict
        Leaf name to point of evaluation.
    rel_step : float
        Perturbation is ``rel_step * (1 + |value|)`` per entry.
    check : iterable of str, optional
        Leaves to difference; all by default.  The others still enter the
        evaluation at their given values.

    Returns
    -------
    GradCheckReport
        Per-leaf ``max |analytic - numeric| / max(max|numeric|, max|analytic|)``,
        i.e. the error relative to the leaf's gradient scale.
    """
    leaves = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    tape = Tape()
    tvars = {k: tape.leaf(v, k) for k, v in leaves.items()}
    analytic = tape.backward(evaluate(tvars))

    errors = {}
    names = list(leaves) if check is None else list(check)
    for name in names:
        base = leaves[name]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            h = rel_step * (1.0 + abs(base.flat[i]))
            vals = dict(leaves)
            up = base.copy()
            up.flat[i] += h
            vals[name] = up
            f_up = float(evaluate(vals))
            dn = base.copy()
            dn.flat[i] -= h
            vals[name] = dn
            f_dn = float(evaluate(vals))
            flat[i] = (f_up - f_dn) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic[name]).max(initial=0.0))
        diff = np.abs(analytic[name] - numeric).max(initial=0.0)
        errors[name] = 0.0 if scale == 0 else diff / scale
    return GradCheckReport(errors)
