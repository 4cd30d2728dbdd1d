"""Linear and bilinear interpolation of gridded observables.

These give a continuous relaxation of a finite design space: a field known
only on grid nodes can be evaluated, and differentiated with respect to the
query location, anywhere between the nodes.  Inside a cell the derivative is
the cell's slope; on a node it is taken from the cell to the right (to the
left at the last node).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

__all__ = [
    "GridField1D",
    "GridField2D",
    "lerp1d",
    "bilerp2d",
    "interp_matrix",
    "resample_sinogram",
    "resample",
]


@dataclass(frozen=True)
class GridField1D:
    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if p.ndim != 1 or p.size < 2 or v.shape != p.shape:
            raise ContractError("need at least two nodes with matching values")
        if np.any(np.diff(p) <= 0):
            raise ContractError("node positions must be strictly increasing")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class GridField2D:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or min(v.shape) < 2:
            raise ContractError("a 2-D field needs at least 2x2 nodes")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def lerp1d(field, query):
    """Value and slope of the piecewise-linear interpolant at ``query``."""
    p, v = field.positions, field.values
    q = float(query)
    if q < p[0] or q > p[-1]:
        raise ContractError(f"query {q} outside [{p[0]}, {p[-1]}]")
    i = int(np.clip(np.searchsorted(p, q, side="right") - 1, 0, p.size - 2))
    slope = (v[i + 1] - v[i]) / (p[i + 1] - p[i])
    return v[i] + slope * (q - p[i]), slope


def bilerp2d(field, query):
    """Value and ``(d/drow, d/dcol)`` of the bilinear interpolant at ``query``."""
    coords = np.asarray(query, dtype=np.float64).reshape(1, 2)
    tape = ad.Tape()
    c = tape.leaf(coords, "q")
    val = ad.gather_bilinear(field.values[None], c)
    grad = tape.backward(ad.total(val))["q"][0]
    return float(val.value[0, 0]), grad


def interp_matrix(n_src, n_dst):
    """Align-corners linear interpolation weights, shape ``(n_dst, n_src)``.

    A single source node is replicated to every target.
    """
    if n_src == 1:
        return np.ones((n_dst, 1))
    L = np.zeros((n_dst, n_src))
    if n_dst == 1:
        L[0, 0] = 1.0
        return L
    pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_src - 2)
    fr = pos - i0
    rows = np.arange(n_dst)
    L[rows, i0] = 1.0 - fr
    L[rows, i0 + 1] += fr
    return L


def resample_sinogram(sinogram, n):
    """Separable linear resampling of a ``(rho, m)`` array to ``(n, n)``."""
    S = np.asarray(sinogram, dtype=np.float64)
    if S.shape[0] < 2 or S.shape[1] < 1:
        raise ContractError("sinogram needs at least 2 detector bins and 1 angle")
    return np.asarray(resample(S, n))


def resample(sino, n):
    """Tape-aware version of :func:`resample_sinogram` for batches ``(..., rho, m)``."""
    S = ad.value_of(sino)
    rho, m = S.shape[-2:]
    Ld = interp_matrix(rho, n)
    La = interp_matrix(m, n)
    out = Ld @ S @ La.T
    return ad._record(ad._tape_of(sino), out, (sino,), lambda g: (Ld.T @ g @ La,))
