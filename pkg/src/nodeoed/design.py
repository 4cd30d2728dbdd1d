"""Fixed-budget designs: measurement locations living in a box.

A :class:`DesignVector` is an ``(M, D)`` array of continuous coordinates plus
the :class:`AdmissibleSpace` it must stay in.  The budget ``M`` never changes
under projection or rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractError

__all__ = [
    "AdmissibleSpace",
    "DesignVector",
    "EndpointSplit",
    "init_by_variance",
    "init_uniform",
    "init_random",
    "project_to_box",
    "round_to_grid",
    "endpoint_split",
]


@dataclass(frozen=True)
class AdmissibleSpace:
    """Box ``[lo, hi]`` per dimension, optionally periodic and/or gridded.

    Periodic dimensions wrap into ``[lo, hi)`` with period ``hi - lo``.  A
    grid, when present, has integer nodes ``0..grid_shape[d]-1`` per dimension
    (so ``lo = 0`` and ``hi = grid_shape[d] - 1``).
    """

    lo: tuple
    hi: tuple
    periodic: tuple = ()
    grid_shape: tuple | None = None
    kind: str = "time-1D"

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * len(self.lo))
        if not (len(self.lo) == len(self.hi) == len(self.periodic)):
            raise ContractError("bounds and periodic flags differ in dimension")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ContractError("empty admissible interval")

    @property
    def dim(self):
        return len(self.lo)

    @classmethod
    def unit_interval(cls):
        return cls((0.0,), (1.0,), kind="time-1D")

    @classmethod
    def pixel_grid(cls, rows, cols):
        return cls((0.0, 0.0), (rows - 1.0, cols - 1.0), grid_shape=(rows, cols), kind="pixel-2D")

    @classmethod
    def angles(cls, period=np.pi):
        return cls((0.0,), (float(period),), periodic=(True,), kind="angle-1D-periodic")

    def to_dict(self):
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "periodic": list(self.periodic),
            "grid_shape": None if self.grid_shape is None else list(self.grid_shape),
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d):
        gs = d.get("grid_shape")
        return cls(tuple(d["lo"]), tuple(d["hi"]), tuple(d["periodic"]), None if gs is None else tuple(gs), d["kind"])


@dataclass(frozen=True)
class DesignVector:
    locations: np.ndarray
    space: AdmissibleSpace
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        loc = np.array(self.locations, dtype=np.float64)
        if loc.ndim == 1:
            loc = loc[:, None]
        if loc.ndim != 2 or loc.shape[1] != self.space.dim:
            raise ContractError(f"locations shape {loc.shape} does not match a {self.space.dim}-D space")
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    @property
    def budget(self):
        return self.locations.shape[0]

    def __len__(self):
        return self.budget

    def with_locations(self, locations, **meta):
        return replace(self, locations=locations, meta=dict(meta))

    def flat(self):
        return self.locations.reshape(-1).copy()


def init_by_variance(outputs, budget, space=None):
    """Pick the ``budget`` grid nodes with the largest sample variance.

    Parameters
    ----------
    outputs : array_like, shape (K, *grid_shape)
        Observable values of ``K`` training samples over the whole grid.
    budget : int
    space : AdmissibleSpace, optional
        Defaults to a pixel grid (2-D outputs) or integer 1-D grid.

    Ties are broken by ascending (row-major) grid index.  Coordinates are the
    node indices, returned as floats.
    """
    Y = np.asarray(outputs, dtype=np.float64)
    if Y.shape[0] < 2:
        raise ContractError("need at least two samples for an unbiased variance")
    grid_shape = Y.shape[1:]
    n_nodes = int(np.prod(grid_shape))
    if budget > n_nodes:
        raise ContractError(f"budget {budget} exceeds {n_nodes} grid nodes")
    var = Y.reshape(Y.shape[0], -1).var(axis=0, ddof=1)
    order = np.argsort(-var, kind="stable")[:budget]
    coords = np.stack(np.unravel_index(order, grid_shape), axis=1).astype(np.float64)
    if space is None:
        if len(grid_shape) == 2:
            space = AdmissibleSpace.pixel_grid(*grid_shape)
        else:
            space = AdmissibleSpace((0.0,), (grid_shape[0] - 1.0,), grid_shape=grid_shape, kind="grid-1D")
    return DesignVector(coords, space, {"init": "variance", "variance": var[order].tolist()})


def init_uniform(space, budget, tau):
    """Locations ``lo + n * tau / budget`` for ``n = 1..budget`` (not wrapped)."""
    if space.dim != 1:
        raise ContractError("uniform initialisation is defined for 1-D spaces")
    if tau > space.hi[0] - space.lo[0] + 1e-12:
        raise ContractError("tau exceeds the admissible interval")
    n = np.arange(1, budget + 1)
    return DesignVector(space.lo[0] + n * tau / budget, space, {"init": "uniform", "tau": tau})


def init_random(space, budget, rng, integer=False, distinct=True):
    """Uniform random locations; with ``integer`` draws distinct grid nodes."""
    rng = np.random.default_rng(rng)
    if integer:
        if space.grid_shape is None:
            raise ContractError("integer draws need a grid")
        n_nodes = int(np.prod(space.grid_shape))
        flat = rng.choice(n_nodes, size=budget, replace=not distinct)
        coords = np.stack(np.unravel_index(flat, space.grid_shape), axis=1).astype(np.float64)
        return DesignVector(coords, space, {"init": "random"})
    lo, hi = np.array(space.lo), np.array(space.hi)
    return DesignVector(lo + (hi - lo) * rng.random((budget, space.dim)), space, {"init": "random"})


def _project(loc, space):
    out = np.array(loc, dtype=np.float64, copy=True).reshape(-1, space.dim)
    for d in range(space.dim):
        lo, hi = space.lo[d], space.hi[d]
        if space.periodic[d]:
            out[:, d] = lo + np.mod(out[:, d] - lo, hi - lo)
            # fmod can return exactly the period for tiny negatives
            out[out[:, d] >= hi, d] = lo
        else:
            out[:, d] = np.clip(out[:, d], lo, hi)
    return out


def project_to_box(design):
    """Clamp (or wrap, for periodic dimensions) every coordinate into the box."""
    return design.with_locations(_project(design.locations, design.space), **design.meta)


def round_to_grid(design, space=None):
    """Round to the nearest grid node, halves rounding up.

    Duplicated nodes are kept; their count is stored in ``meta['duplicates']``.
    """
    space = space or design.space
    if space.grid_shape is None:
        raise ContractError("rounding needs a grid specification")
    rounded = np.floor(design.locations + 0.5)
    rounded = np.clip(rounded, 0, np.array(space.grid_shape) - 1)
    n_unique = len({tuple(r) for r in rounded})
    return DesignVector(rounded, space, {**design.meta, "duplicates": design.budget - n_unique})


@dataclass(frozen=True)
class EndpointSplit:
    k0: int
    k1: int
    max_boundary_distance: float
    delta: float

    @property
    def converged(self):
        return self.max_boundary_distance <= self.delta


def endpoint_split(design, delta=0.05):
    """Count locations in ``[0, 0.5)`` and ``[0.5, 1]`` and their distance to {0, 1}."""
    t = np.asarray(design.locations if isinstance(design, DesignVector) else design, dtype=np.float64).ravel()
    k1 = int(np.count_nonzero(t >= 0.5))
    dist = float(np.max(np.minimum(t, 1.0 - t))) if t.size else 0.0
    return EndpointSplit(t.size - k1, k1, dist, delta)
