"""File formats and result emission.

* IDX (the MNIST container): big-endian magic, counts, unsigned bytes; gzip
  is sniffed transparently.
* ``NODE`` arrays: ``b"NODE"``, u32 version (1), u32 ndim, u32 dims..., then
  row-major float64 little-endian.
* CSV with a header row, JSON summaries, and small self-contained SVG plots.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import math
import os
import struct
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

__all__ = [
    "FormatError",
    "load_idx_images",
    "load_idx_labels",
    "write_idx",
    "write_array",
    "read_array",
    "write_csv",
    "read_csv",
    "write_json",
    "atomic_write_bytes",
    "Dataset",
    "load_mnist",
    "bundled_mnist_subset",
    "split_and_subset",
    "fetch_mnist",
    "MNIST_FILES",
    "svg_lines",
    "svg_fractions",
    "svg_pixel_design",
    "svg_boxes",
]

NODE_MAGIC = b"NODE"
NODE_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic):
    if len(raw) < 8:
        raise FormatError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise FormatError(f"truncated IDX payload: {len(raw) - header} of {size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_images(path):
    """Images as ``(K, rows, cols)`` floats in [0, 1] (bytes divided by 255)."""
    return _parse_idx(_read_maybe_gzip(path), 0x00000803).astype(np.float64) / 255.0


def load_idx_labels(path, n_classes=10):
    """Labels as one-hot ``(K, n_classes)`` floats."""
    labels = _parse_idx(_read_maybe_gzip(path), 0x00000801)
    if labels.size and labels.max() >= n_classes:
        raise FormatError(f"label {int(labels.max())} out of range 0..{n_classes - 1}")
    return np.eye(n_classes)[labels]


def write_idx(path, array):
    """Write a uint8 array (1-D labels or 3-D images) as IDX."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    Path(path).write_bytes(payload)


def atomic_write_bytes(path, data):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    if not str(path) or str(path) == ".":
        raise OSError("empty output path")
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array(path, array):
    a = np.ascontiguousarray(array, dtype="<f8")
    head = NODE_MAGIC + struct.pack("<II", NODE_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    atomic_write_bytes(path, head + a.tobytes())


def read_array(path):
    raw = Path(path).read_bytes()
    if raw[:4] != NODE_MAGIC:
        raise FormatError("bad magic, not a NODE array file")
    if len(raw) < 12:
        raise FormatError("truncated NODE header")
    version, ndim = struct.unpack("<II", raw[4:12])
    if version != NODE_VERSION:
        raise FormatError(f"unsupported NODE version {version}")
    end = 12 + 4 * ndim
    dims = struct.unpack(f"<{ndim}I", raw[12:end])
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - end != 8 * count:
        raise FormatError("NODE payload size does not match its dimensions")
    return np.frombuffer(raw, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows, fieldnames=None):
    """RFC-4180 CSV with a header row; floats written with full precision."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise ValueError("refusing to write a non-finite number to JSON")
        return f
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


# -- datasets --------------------------------------------------------------------------


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    source: str = ""


MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory):
    """Load the canonical 60000/10000 split from IDX files in ``directory``."""
    d = Path(directory)
    return Dataset(
        load_idx_images(_find(d, "train-images-idx3-ubyte")),
        load_idx_labels(_find(d, "train-labels-idx1-ubyte")),
        load_idx_images(_find(d, "t10k-images-idx3-ubyte")),
        load_idx_labels(_find(d, "t10k-labels-idx1-ubyte")),
        source=str(d),
    )


def bundled_mnist_subset(n_test=1000, seed=0):
    """The 5000-image MNIST sample shipped with ``mlxtend``, split by a seeded permutation.

    Offline fallback when the IDX files are not available.  Raises
    ``ImportError`` if ``mlxtend`` is not installed.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    X = (X[perm] / 255.0).reshape(-1, 28, 28)
    Y = np.eye(10)[y[perm]]
    return Dataset(X[n_test:], Y[n_test:], X[:n_test], Y[:n_test], source="mlxtend mnist_5k")


def split_and_subset(dataset, subset=None, test_subset=None, seed=0):
    """Keep the train/test split; optionally draw seeded uniform subsets of each."""
    rng = np.random.default_rng(seed)

    def pick(n, k):
        if k is None or k >= n:
            return np.arange(n)
        return np.sort(rng.choice(n, size=k, replace=False))

    tr = pick(dataset.train_images.shape[0], subset)
    te = pick(dataset.test_images.shape[0], test_subset)
    return Dataset(
        dataset.train_images[tr],
        dataset.train_labels[tr],
        dataset.test_images[te],
        dataset.test_labels[te],
        source=dataset.source,
    )


def fetch_mnist(directory, mirrors=MNIST_MIRRORS, timeout=30):
    """Download the four MNIST IDX files and verify their MD5 checksums."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, md5 in MNIST_FILES.items():
        target = d / name
        if target.exists() and hashlib.md5(target.read_bytes()).hexdigest() == md5:
            continue
        last_err = None
        for base in mirrors:
            try:
                with urllib.request.urlopen(base + name, timeout=timeout) as resp:
                    data = resp.read()
            except OSError as err:
                last_err = err
                continue
            if hashlib.md5(data).hexdigest() != md5:
                last_err = FormatError(f"checksum mismatch for {name} from {base}")
                continue
            atomic_write_bytes(target, data)
            break
        else:
            raise OSError(f"could not fetch {name}: {last_err}")
    return d


# -- SVG -------------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class _Canvas:
    def __init__(self, width=640, height=400, margin=50):
        self.w, self.h, self.m = width, height, margin
        self.items = []

    def frame(self, xlim, ylim, xlabel="", ylabel="", title=""):
        self.xlim, self.ylim = xlim, ylim
        m, w, h = self.m, self.w, self.h
        self.items.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>')
        for val, anchor in ((xlim[0], "start"), (xlim[1], "end")):
            x = self.x(val)
            self.items.append(f'<text x="{x:.2f}" y="{h - m + 15}" font-size="11" text-anchor="{anchor}">{val:g}</text>')
        for val in ylim:
            self.items.append(f'<text x="{m - 5}" y="{self.y(val):.2f}" font-size="11" text-anchor="end">{val:g}</text>')
        self.items.append(f'<text x="{w / 2}" y="{h - 10}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        self.items.append(
            f'<text x="15" y="{h / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {h / 2})">{escape(ylabel)}</text>'
        )
        self.items.append(f'<text x="{w / 2}" y="{m - 15}" font-size="13" text-anchor="middle">{escape(title)}</text>')

    def x(self, v):
        lo, hi = self.xlim
        span = hi - lo or 1.0
        return self.m + (v - lo) / span * (self.w - 2 * self.m)

    def y(self, v):
        lo, hi = self.ylim
        span = hi - lo or 1.0
        return self.h - self.m - (v - lo) / span * (self.h - 2 * self.m)

    def polyline(self, xs, ys, color, dash=None):
        pts = " ".join(f"{self.x(a):.2f},{self.y(b):.2f}" for a, b in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')

    def marker(self, x, y, color, size=3, shape="circle"):
        if shape == "square":
            self.items.append(
                f'<rect x="{self.x(x) - size:.2f}" y="{self.y(y) - size:.2f}" width="{2 * size}" height="{2 * size}" fill="{color}"/>'
            )
        elif shape == "cross":
            cx, cy = self.x(x), self.y(y)
            self.items.append(
                f'<path d="M{cx - size:.2f},{cy - size:.2f}L{cx + size:.2f},{cy + size:.2f}'
                f'M{cx - size:.2f},{cy + size:.2f}L{cx + size:.2f},{cy - size:.2f}" stroke="{color}" stroke-width="1.5"/>'
            )
        else:
            self.items.append(f'<circle cx="{self.x(x):.2f}" cy="{self.y(y):.2f}" r="{size}" fill="{color}"/>')

    def svg(self):
        body = "\n".join(self.items)
        return (
            f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.w}" height="{self.h}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )


def _limits(values, pad=0.05):
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    d = (hi - lo) * pad
    return lo - d, hi + d


def _save(path, canvas):
    atomic_write_bytes(path, canvas.svg().encode())
    return Path(path)


def svg_lines(path, x, series, xlabel="step", ylabel="", title=""):
    """One polyline per column of ``series`` (shape ``(len(x), k)``)."""
    x = np.asarray(x, dtype=np.float64)
    Y = np.asarray(series, dtype=np.float64)
    if x.size == 0 or Y.size == 0:
        raise ValueError("nothing to plot")
    Y = Y.reshape(x.size, -1)
    c = _Canvas()
    c.frame(_limits(x, 0), _limits(Y), xlabel, ylabel, title)
    for j in range(Y.shape[1]):
        color = _COLORS[j % len(_COLORS)]
        if x.size == 1:
            c.marker(x[0], Y[0, j], color)
        else:
            c.polyline(x, Y[:, j], color)
    return _save(path, c)


def svg_fractions(path, m_values, k1_fractions, k0_fractions=None, title="endpoint fractions"):
    """Scatter of learned fractions with dashed guides at sqrt(2)-1 and 2-sqrt(2)."""
    m = np.asarray(m_values, dtype=np.float64)
    f1 = np.asarray(k1_fractions, dtype=np.float64)
    if m.size == 0:
        raise ValueError("nothing to plot")
    f0 = 1.0 - f1 if k0_fractions is None else np.asarray(k0_fractions, dtype=np.float64)
    c = _Canvas()
    c.frame(_limits(m), (0.0, 1.0), "m", "fraction", title)
    xl = c.xlim
    for level, color in ((math.sqrt(2) - 1, _COLORS[0]), (2 - math.sqrt(2), _COLORS[1])):
        c.polyline(xl, (level, level), color, dash="6,4")
    for a, b1, b0 in zip(m, f1, f0):
        c.marker(a, b1, _COLORS[0])
        c.marker(a, b0, _COLORS[1])
    return _save(path, c)


def svg_pixel_design(path, grid_shape, final, initial=None, title="design"):
    """Pixel grid with initial locations as crosses and final ones as squares (row down)."""
    rows, cols = grid_shape
    final = np.asarray(final, dtype=np.float64).reshape(-1, 2)
    if final.size == 0:
        raise ValueError("nothing to plot")
    c = _Canvas(480, 480, 40)
    c.frame((-0.5, cols - 0.5), (rows - 0.5, -0.5), "column", "row", title)
    if initial is not None:
        for r, k in np.asarray(initial, dtype=np.float64).reshape(-1, 2):
            c.marker(k, r, _COLORS[0], 4, "cross")
    for r, k in final:
        c.marker(k, r, _COLORS[1], 4, "square")
    return _save(path, c)


def svg_boxes(path, groups, ylabel="error", title="", log=True):
    """Box summaries (quartiles, 5-95% whiskers, median) per labelled group."""
    if not groups:
        raise ValueError("nothing to plot")
    labels = list(groups)
    vals = [np.asarray(groups[k], dtype=np.float64).ravel() for k in labels]
    if log:
        vals = [np.log10(np.maximum(v, 1e-12)) for v in vals]
        ylabel = f"log10 {ylabel}"
    c = _Canvas(max(320, 90 * len(labels) + 100), 400)
    c.frame((-0.5, len(labels) - 0.5), _limits(np.concatenate(vals)), "", ylabel, title)
    for i, (lab, v) in enumerate(zip(labels, vals)):
        q05, q25, q50, q75, q95 = np.percentile(v, [5, 25, 50, 75, 95])
        color = _COLORS[i % len(_COLORS)]
        x0, x1 = c.x(i - 0.3), c.x(i + 0.3)
        c.items.append(
            f'<rect x="{x0:.2f}" y="{c.y(q75):.2f}" width="{x1 - x0:.2f}" height="{c.y(q25) - c.y(q75):.2f}" '
            f'fill="{color}" fill-opacity="0.4" stroke="{color}"/>'
        )
        c.polyline((i - 0.3, i + 0.3), (q50, q50), "black")
        c.polyline((i, i), (q05, q25), color)
        c.polyline((i, i), (q75, q95), color)
        c.items.append(f'<text x="{c.x(i):.2f}" y="{c.h - c.m + 30}" font-size="11" text-anchor="middle">{escape(str(lab))}</text>')
    return _save(path, c)
