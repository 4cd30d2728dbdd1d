"""Forward operators and their observation maps.

* exponential growth ``y(t) = b exp(a t)``, observed in log space;
* pixel masking of images, relaxed to continuous pixel coordinates;
* the parallel-beam Radon transform at a list of view angles, with exact
  derivatives of the discrete quadrature with respect to each angle.

Radon geometry: the image covers ``[-1, 1]^2`` with ``n`` pixel centres per
axis at ``-1 + (j + 1/2) 2/n``; row index follows ``r2`` and column index
``r1``.  Detector bins sit at ``s_i = -1 + (i + 1/2) 2/rho``.  Each ray
``r = s n(w) + c t(w)`` with ``n(w) = (cos w, sin w)``, ``t(w) = (-sin w, cos w)``
is sampled at ``c_k = k dl`` for ``|c_k| <= sqrt(2)`` and the bilinearly
interpolated image (zero outside the grid) is summed times ``dl``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ContractError
from .design import DesignVector

__all__ = [
    "ExpParams",
    "sample_exp_prior",
    "NoiseModel",
    "ObservationBatch",
    "exp_clean",
    "exp_observe",
    "pixel_observe",
    "pixel_network_input",
    "RadonGeometry",
    "AnalyticImage",
    "gaussian_blob",
    "disk",
    "radon",
    "radon_dangle",
    "radon_weighted",
    "radon_op",
    "ct_observe",
    "make_phantoms",
]


# -- exponential growth --------------------------------------------------------


@dataclass(frozen=True)
class ExpParams:
    """Rate ``a`` and amplitude ``b`` (scalars or equal-length arrays)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if np.any(b <= 0):
            raise ContractError("amplitude b must be positive for the log transform")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def loglinear(self):
        """Parameters of the log-linear model, columns ``(log b, a)``."""
        return np.stack([np.log(self.b), self.a], axis=-1)


def sample_exp_prior(rng, size, a_range=(0.5, 1.5), b_range=(1.0, 2.0)):
    rng = np.random.default_rng(rng)
    a = rng.uniform(*a_range, size=size)
    b = rng.uniform(*b_range, size=size)
    return ExpParams(a, b)


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian observation noise.

    ``kind`` is ``"additive"`` (absolute standard deviation ``sigma``, also used
    for log-space data), ``"relative"`` (per-sample standard deviation
    ``sigma * ||clean||_2 / sqrt(N)`` so that ``||noise|| ~ sigma ||clean||``)
    or ``"relative-norm"`` (per-entry standard deviation ``sigma * ||clean||_2``).
    """

    sigma: float = 0.0
    kind: str = "additive"

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("noise standard deviation must be non-negative")
        if self.kind not in ("additive", "log", "relative", "relative-norm"):
            raise ContractError(f"unknown noise kind {self.kind!r}")

    def std(self, clean):
        """Per-sample standard deviation for a batch ``clean`` of shape ``(B, ...)``."""
        clean = np.asarray(clean)
        if self.kind in ("additive", "log"):
            return np.full(clean.shape[:1], self.sigma)
        flat = clean.reshape(clean.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        if self.kind == "relative":
            return self.sigma * norms / np.sqrt(flat.shape[1])
        return self.sigma * norms

    def sample(self, clean, rng):
        """Noise array shaped like ``clean`` (batch along axis 0)."""
        clean = np.asarray(clean)
        if self.sigma == 0:
            return np.zeros_like(clean, dtype=np.float64)
        s = self.std(clean).reshape((-1,) + (1,) * (clean.ndim - 1))
        return s * rng.standard_normal(clean.shape)


@dataclass
class ObservationBatch:
    """Measured values ``(B, M)`` and the locations ``(M, D)`` that produced them."""

    values: np.ndarray
    locations: np.ndarray
    truth: object = None
    clean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.shape(self.values)[-1] != np.shape(self.locations)[0]:
            raise ContractError("values and locations differ in length")


def exp_clean(params, times):
    """Noiseless log observations ``log b + a t``; ``times`` may be a tape Var."""
    a = params.a.reshape(-1, 1)
    logb = np.log(params.b).reshape(-1, 1)
    t = times if isinstance(times, ad.Var) else np.asarray(times, dtype=np.float64).ravel()
    tB = ad.broadcast_rows(ad.reshape(t, (-1,)), a.shape[0])
    return ad.add(logb, ad.mul(a, tB))


def exp_observe(params, design, noise, rng=None):
    """Log-space observations ``log b + a t_j + eta_j``, ``eta ~ N(0, sigma^2)``."""
    t = design.locations if isinstance(design, DesignVector) else np.asarray(design, dtype=np.float64)
    t = np.asarray(t).ravel()
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("exponential designs live in [0, 1]")
    params = params if params.a.ndim else ExpParams(params.a[None], params.b[None])
    clean = np.asarray(exp_clean(params, t))
    rng = np.random.default_rng(rng)
    values = clean + noise.sample(clean, rng)
    return ObservationBatch(values, t[:, None], truth=params, clean=clean)


# -- pixel masking ---------------------------------------------------------------


def pixel_observe(images, design, noise, rng=None):
    """Bilinear samples of images at continuous pixel coordinates plus noise."""
    X = np.asarray(images, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    coords = design.locations if isinstance(design, DesignVector) else np.asarray(design, dtype=np.float64)
    clean = ad.gather_bilinear(X, coords)
    rng = np.random.default_rng(rng)
    values = clean + noise.sample(clean, rng)
    return ObservationBatch(values, np.array(coords), truth=X, clean=clean)


def pixel_network_input(coords, values, grid_shape):
    """Network input ``[normalised coordinates (2M); intensities (M)]`` per sample.

    Coordinates are divided by ``grid_dim - 1``.  ``coords`` may be a tape Var.
    """
    scale = 1.0 / (np.asarray(grid_shape, dtype=np.float64) - 1.0)
    B = ad.value_of(values).shape[0]
    norm = ad.mul(coords, scale)
    flat = ad.reshape(norm, (-1,))
    return ad.concat([ad.broadcast_rows(flat, B), values], axis=1)


# -- Radon transform -------------------------------------------------------------


@dataclass(frozen=True)
class RadonGeometry:
    n: int
    rho: int
    angles: np.ndarray
    step: float | None = None

    def __post_init__(self):
        if self.n < 2 or self.rho < 2:
            raise ContractError("need n >= 2 and rho >= 2")
        object.__setattr__(self, "angles", np.atleast_1d(np.asarray(self.angles, dtype=np.float64)))
        if self.step is None:
            object.__setattr__(self, "step", 1.0 / self.n)
        if self.step <= 0:
            raise ContractError("ray step must be positive")

    @property
    def detectors(self):
        return -1.0 + (np.arange(self.rho) + 0.5) * 2.0 / self.rho

    @property
    def ray_samples(self):
        k = int(np.floor(np.sqrt(2.0) / self.step + 1e-9))
        return np.arange(-k, k + 1) * self.step

    def with_angles(self, angles):
        return RadonGeometry(self.n, self.rho, angles, self.step)


@dataclass(frozen=True)
class AnalyticImage:
    """Continuous image ``value(r1, r2)`` with optional gradient ``grad(r1, r2) -> (d1, d2)``."""

    value: object
    grad: object = None


def gaussian_blob(width=0.3, amplitude=1.0):
    """Radially symmetric Gaussian centred at the origin."""

    def value(r1, r2):
        return amplitude * np.exp(-(r1 * r1 + r2 * r2) / (2 * width**2))

    def grad(r1, r2):
        v = value(r1, r2) / width**2
        return -r1 * v, -r2 * v

    return AnalyticImage(value, grad)


def disk(n, radius, center=(0.0, 0.0)):
    """Pixelated indicator of a disk on the ``n x n`` grid over ``[-1, 1]^2``."""
    x = -1.0 + (np.arange(n) + 0.5) * 2.0 / n
    r2, r1 = np.meshgrid(x, x, indexing="ij")
    return (((r1 - center[0]) ** 2 + (r2 - center[1]) ** 2) <= radius**2).astype(np.float64)


def _ray_points(geom, angle):
    s = geom.detectors[:, None]
    c = geom.ray_samples[None, :]
    cw, sw = np.cos(angle), np.sin(angle)
    r1 = s * cw - c * sw
    r2 = s * sw + c * cw
    # d r / d w = s t(w) - c n(w)
    d1 = -s * sw - c * cw
    d2 = s * cw - c * sw
    return r1, r2, d1, d2


def _bilinear_taps(geom, angle, with_derivative):
    """Flattened (sample, pixel, weight[, d weight / d angle]) taps along all rays."""
    n = geom.n
    r1, r2, d1, d2 = _ray_points(geom, angle)
    half = n / 2.0
    u = ((r1 + 1.0) * half - 0.5).ravel()  # column index
    v = ((r2 + 1.0) * half - 0.5).ravel()  # row index
    du, dv = (d1 * half).ravel(), (d2 * half).ravel()
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    idx = np.arange(u.size)

    rows, cols, vals, dvals = [], [], [], []
    for dr, dc, w, wu, wv in (
        (0, 0, (1 - fv) * (1 - fu), -(1 - fv), -(1 - fu)),
        (0, 1, (1 - fv) * fu, (1 - fv), -fu),
        (1, 0, fv * (1 - fu), -fv, (1 - fu)),
        (1, 1, fv * fu, fv, fu),
    ):
        rr, cc = v0 + dr, u0 + dc
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)  # zero outside the grid
        rows.append(idx[ok])
        cols.append((rr * n + cc)[ok])
        vals.append(w[ok])
        if with_derivative:
            dvals.append((wu * du + wv * dv)[ok])
    taps = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    return taps + ((np.concatenate(dvals),) if with_derivative else (None,))


def _projection_matrices(geom, angle, with_derivative=True):
    """Sparse ``(rho, n*n)`` quadrature matrix and its derivative in the angle."""
    samples, pix, w, dw = _bilinear_taps(geom, angle, with_derivative)
    det = samples // geom.ray_samples.size
    shape = (geom.rho, geom.n * geom.n)
    P = sp.csr_matrix((w * geom.step, (det, pix)), shape=shape)
    D = sp.csr_matrix((dw * geom.step, (det, pix)), shape=shape) if with_derivative else None
    return P, D


def _analytic_columns(image, geom, weighted=False, derivative=False):
    out = np.empty((geom.rho, geom.angles.size))
    for j, w in enumerate(geom.angles):
        r1, r2, d1, d2 = _ray_points(geom, w)
        if derivative:
            if image.grad is None:
                raise ContractError("analytic image has no gradient")
            g1, g2 = image.grad(r1, r2)
            f = g1 * d1 + g2 * d2
        else:
            f = image.value(r1, r2)
        if weighted:
            f = f * geom.ray_samples[None, :]  # r . t(w) == c on the ray
        out[:, j] = f.sum(axis=1) * geom.step
    return out


def _flat_images(image, n):
    X = np.asarray(image, dtype=np.float64)
    if X.shape[-2:] != (n, n):
        raise ContractError(f"image shape {X.shape[-2:]} does not match geometry n={n}")
    return X.reshape(-1, n * n), X.ndim == 2


def radon(image, geometry):
    """Sinogram ``(rho, m)``, or ``(B, rho, m)`` for a stack of images.

    ``image`` may also be an :class:`AnalyticImage`, sampled exactly at the ray
    points instead of bilinearly.
    """
    if isinstance(image, AnalyticImage):
        return _analytic_columns(image, geometry)
    Xf, single = _flat_images(image, geometry.n)
    cols = [(_projection_matrices(geometry, w, False)[0] @ Xf.T).T for w in geometry.angles]
    out = np.stack(cols, axis=-1)
    return out[0] if single else out


def radon_dangle(image, geometry, j):
    """Derivative of sinogram column ``j`` with respect to its angle ``w_j``."""
    g1 = geometry.with_angles(geometry.angles[j : j + 1])
    if isinstance(image, AnalyticImage):
        return _analytic_columns(image, g1, derivative=True)[:, 0]
    Xf, single = _flat_images(image, geometry.n)
    _, D = _projection_matrices(g1, geometry.angles[j])
    out = (D @ Xf.T).T
    return out[0] if single else out


def radon_weighted(image, geometry):
    """Radon transform of ``x(r) (r . t(w))``, the weight following each angle.

    Cross-check for :func:`radon_dangle` through the continuous identity
    ``d/dw R[x](w, s) = -d/ds R[x (r . t(w))](w, s)``.
    """
    if isinstance(image, AnalyticImage):
        return _analytic_columns(image, geometry, weighted=True)
    Xf, single = _flat_images(image, geometry.n)
    K = geometry.ray_samples.size
    cols = []
    for w in geometry.angles:
        samples, pix, wt, _ = _bilinear_taps(geometry, w, False)
        c = geometry.ray_samples[samples % K]
        S = sp.csr_matrix((wt * c * geometry.step, (samples // K, pix)), shape=(geometry.rho, geometry.n**2))
        cols.append((S @ Xf.T).T)
    out = np.stack(cols, axis=-1)
    return out[0] if single else out


def radon_op(images, angles, geometry):
    """Tape-aware Radon transform of ``images`` (B, n, n) at ``angles`` (m,).

    Gradients flow to both the angles (through the differentiated quadrature)
    and the images (through the transpose).
    """
    X = ad.value_of(images)
    w = ad.value_of(angles).ravel()
    Xf, _ = _flat_images(X.reshape(-1, geometry.n, geometry.n), geometry.n)
    mats = [_projection_matrices(geometry, wj, True) for wj in w]
    out = np.stack([(P @ Xf.T).T for P, _ in mats], axis=-1)

    def vjp(g):
        g_angles = np.array([np.sum(g[:, :, j] * (D @ Xf.T).T) for j, (_, D) in enumerate(mats)])
        g_img = sum((P.T @ g[:, :, j].T).T for j, (P, _) in enumerate(mats))
        return (np.asarray(g_img).reshape(X.shape), g_angles.reshape(ad.value_of(angles).shape))

    return ad._record(ad._tape_of(images, angles), out, (images, angles), vjp)


def ct_observe(image, geometry, noise, rng=None):
    """Noisy sinogram(s); relative noise scales with each clean sinogram's norm."""
    clean = radon(image, geometry)
    batch = clean[None] if clean.ndim == 2 else clean
    rng = np.random.default_rng(rng)
    values = batch + noise.sample(batch, rng)
    if clean.ndim == 2:
        values = values[0]
    return ObservationBatch(values, geometry.angles[:, None], truth=image, clean=clean)


def make_phantoms(count, n, rng=None, n_ellipses=(2, 5), intensity=(0.2, 1.0)):
    """Random ellipse phantoms on ``[-1, 1]^2``, clipped to [0, 1] and zero outside the unit disk."""
    if n < 8:
        raise ContractError("phantoms need n >= 8")
    rng = np.random.default_rng(rng)
    x = -1.0 + (np.arange(n) + 0.5) * 2.0 / n
    R2, R1 = np.meshgrid(x, x, indexing="ij")
    inside = R1**2 + R2**2 <= 1.0
    out = []
    for _ in range(count):
        img = np.zeros((n, n))
        for _ in range(rng.integers(n_ellipses[0], n_ellipses[1] + 1)):
            rad = 0.7 * np.sqrt(rng.random())
            ang = 2 * np.pi * rng.random()
            cx, cy = rad * np.cos(ang), rad * np.sin(ang)
            ax, ay = rng.uniform(0.1, 0.5, size=2)
            rot = np.pi * rng.random()
            u = (R1 - cx) * np.cos(rot) + (R2 - cy) * np.sin(rot)
            v = -(R1 - cx) * np.sin(rot) + (R2 - cy) * np.cos(rot)
            img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] += rng.uniform(*intensity)
        out.append(np.clip(img, 0.0, 1.0) * inside)
    return np.stack(out) if out else np.zeros((0, n, n))
