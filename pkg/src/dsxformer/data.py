"""Hyperspectral cube I/O, PCA reduction, patch datasets and splits.

Cube files (``.hsc``) are little-endian::

    bytes 0-3   magic b"HSC1"
    u32 x 4     rows, cols, bands, K
    f32 x rows*cols*bands   values, band-fastest (row-major rows, cols, bands)
    u16 x rows*cols         labels, row-major, 0 = unlabeled

Split files are text: ``# seed=<int> digest=<hex> part=<name>`` then a
``row,col,class`` header and one entry per line.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, FormatError

CUBE_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4I")


@dataclass
class HSICube:
    values: np.ndarray  # (rows, cols, bands)
    labels: np.ndarray  # (rows, cols), 0 = unlabeled, 1..K classes
    n_classes: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.values.ndim != 3:
            raise DataError(f"cube values must be (rows, cols, bands), got {self.values.shape}")
        if self.labels.shape != self.values.shape[:2]:
            raise DataError(f"label grid {self.labels.shape} does not match cube {self.values.shape[:2]}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("cube contains non-finite values")
        if self.labels.size and int(self.labels.max()) > self.n_classes:
            raise DataError(f"label id {int(self.labels.max())} exceeds K={self.n_classes}")

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def bands(self):
        return self.values.shape[2]

    def class_counts(self):
        return {c: int((self.labels == c).sum()) for c in range(1, self.n_classes + 1)}


def cube_to_bytes(cube):
    return b"".join([
        CUBE_MAGIC,
        _HEADER.pack(cube.rows, cube.cols, cube.bands, cube.n_classes),
        np.ascontiguousarray(cube.values, dtype="<f4").tobytes(),
        np.ascontiguousarray(cube.labels, dtype="<u2").tobytes(),
    ])


def save_cube(path, cube):
    with open(path, "wb") as fh:
        fh.write(cube_to_bytes(cube))


def cube_from_bytes(buf):
    if len(buf) < 4 or buf[:4] != CUBE_MAGIC:
        raise FormatError(f"bad cube magic {bytes(buf[:4])!r}, expected {CUBE_MAGIC!r}", 0)
    if len(buf) < 4 + _HEADER.size:
        raise FormatError(f"truncated header: expected {4 + _HEADER.size} bytes, got {len(buf)}", len(buf))
    rows, cols, bands, k = _HEADER.unpack_from(buf, 4)
    start = 4 + _HEADER.size
    n_vals = rows * cols * bands * 4
    n_labels = rows * cols * 2
    expected = start + n_vals + n_labels
    if len(buf) != expected:
        what = "truncated payload" if len(buf) < expected else "trailing bytes after payload"
        raise FormatError(
            f"{what}: expected {expected} bytes for {rows}x{cols}x{bands}, got {len(buf)}",
            min(len(buf), expected),
        )
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols * bands, offset=start)
    labels = np.frombuffer(buf, dtype="<u2", count=rows * cols, offset=start + n_vals)
    values = values.reshape(rows, cols, bands).astype(np.float32)
    labels = labels.reshape(rows, cols).astype(np.uint16)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.reshape(-1)))[0])
        raise FormatError("non-finite cube value", start + 4 * bad)
    if labels.size and int(labels.max()) > k:
        bad = int(np.flatnonzero(labels.reshape(-1) > k)[0])
        raise FormatError(f"label {int(labels.reshape(-1)[bad])} exceeds K={k}", start + n_vals + 2 * bad)
    return HSICube(values, labels, k)


def load_cube(path):
    with open(path, "rb") as fh:
        return cube_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCAModel:
    mean: np.ndarray  # (bands,)
    scale: np.ndarray  # (bands,)
    components: np.ndarray  # (bands, k), columns are eigenvectors
    eigenvalues: np.ndarray  # (k,), descending
    total_variance: float

    @property
    def explained_variance_ratio(self):
        return self.eigenvalues / self.total_variance

    def transform(self, values):
        x = (np.asarray(values, dtype=np.float64) - self.mean) / self.scale
        return x @ self.components

    def inverse_transform(self, scores):
        return (np.asarray(scores, dtype=np.float64) @ self.components.T) * self.scale + self.mean


def fit_pca(values, k, standardize=True):
    """Eigendecomposition of the band covariance over all pixels.

    Bands are mean-centred (and z-scored when ``standardize``).  Each
    eigenvector's largest-magnitude entry is made positive.
    """
    x = np.asarray(values, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    bands = x.shape[1]
    if not 1 <= k <= bands:
        raise ConfigError(f"PCA components k={k} must be in 1..{bands}")
    mean = x.mean(axis=0)
    xc = x - mean
    scale = np.ones(bands)
    if standardize:
        std = xc.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        xc = xc / scale
    cov = xc.T @ xc / max(len(xc) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pivots = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivots, np.arange(bands)])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    return PCAModel(mean, scale, evecs[:, :k], np.clip(evals[:k], 0, None), float(np.trace(cov)))


def pca_reduce(cube, k, standardize=True, dtype=np.float32):
    """Project every pixel spectrum onto the top-``k`` principal axes."""
    if k > cube.bands:
        raise ConfigError(f"cannot keep k={k} components from {cube.bands} bands")
    model = fit_pca(cube.values, k, standardize)
    scores = model.transform(cube.values.reshape(-1, cube.bands))
    values = scores.reshape(cube.rows, cube.cols, k).astype(dtype)
    return HSICube(values, cube.labels.copy(), cube.n_classes)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

class PatchCropper:
    """Crops ``S x S`` windows centred on pixels, edge-replicating at borders."""

    def __init__(self, values, size):
        rows, cols = values.shape[:2]
        if size <= 0:
            raise ConfigError(f"patch side must be positive, got {size}")
        if size > 2 * min(rows, cols):
            raise ConfigError(f"patch side {size} exceeds twice the smaller cube side {min(rows, cols)}")
        self.size = size
        before = size // 2
        after = size - 1 - before
        padded = np.pad(values, ((before, after), (before, after), (0, 0)), mode="edge")
        self._view = sliding_window_view(padded, (size, size), axis=(0, 1))  # (rows, cols, bands, S, S)

    def __call__(self, rows, cols):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return np.ascontiguousarray(self._view[rows, cols].transpose(0, 2, 3, 1))


@dataclass
class PatchDataset:
    cube: HSICube
    entries: np.ndarray  # (n, 3): row, col, class id
    size: int
    _cropper: PatchCropper | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64).reshape(-1, 3)
        if len(self.entries) and self.entries[:, 2].min() < 1:
            raise DataError("patch dataset entries must have class id >= 1")

    def __len__(self):
        return len(self.entries)

    @property
    def bands(self):
        return self.cube.bands

    @property
    def labels(self):
        return self.entries[:, 2]

    def patches(self, idx=None):
        if self._cropper is None:
            self._cropper = PatchCropper(self.cube.values, self.size)
        e = self.entries if idx is None else self.entries[np.asarray(idx)]
        return self._cropper(e[:, 0], e[:, 1])

    def subset(self, idx):
        return PatchDataset(self.cube, self.entries[np.asarray(idx, dtype=np.int64)], self.size, self._cropper)


def extract_pixel_patches(cube, size):
    """One entry per labeled pixel, in row-major order."""
    if size <= 0 or size > 2 * min(cube.rows, cube.cols):
        raise ConfigError(f"patch side {size} invalid for a {cube.rows}x{cube.cols} cube")
    rows, cols = np.nonzero(cube.labels)
    entries = np.stack([rows, cols, cube.labels[rows, cols].astype(np.int64)], axis=1)
    return PatchDataset(cube, entries, size)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Per-class training counts (``{class_id: n}``) or a global training ratio.

    With a ratio, class ``c`` with ``n`` labeled pixels gets
    ``ceil(ratio * n)`` training samples (computed exactly).
    """

    counts: dict | None = None
    ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.counts is None) == (self.ratio is None):
            raise ConfigError("SplitSpec needs exactly one of counts or ratio")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"train ratio must be in [0, 1], got {self.ratio}")
        if self.counts is not None:
            self.counts = {int(k): int(v) for k, v in self.counts.items()}

    @classmethod
    def from_scene(cls, scene, seed=0):
        from .tables import SCENES

        try:
            info = SCENES[scene.upper()]
        except KeyError:
            raise ConfigError(f"unknown scene {scene!r}; expected one of {sorted(SCENES)}") from None
        return cls(counts=info.split_counts(), seed=seed)

    def n_train(self, class_id, population):
        if self.counts is not None:
            return self.counts.get(class_id, 0)
        frac = Fraction(str(self.ratio))
        return math.ceil(frac * population)

    def digest(self):
        body = json.dumps({"counts": self.counts, "ratio": self.ratio, "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def split_indices(labels, spec):
    """Stratified seeded split of entry indices; returns sorted (train, test)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = spec.n_train(int(c), len(members))
        if n > len(members):
            raise DataError(f"class {int(c)} has {len(members)} samples, split asks for {n} training samples")
        perm = rng.permutation(members)
        train.append(perm[:n])
        test.append(perm[n:])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, np.int64)
    test = np.sort(np.concatenate(test)) if test else np.zeros(0, np.int64)
    if len(labels) and len(test) == 0:
        warnings.warn("split leaves the test set empty", stacklevel=2)
    return train, test


def split_train_test(ds, spec):
    train, test = split_indices(ds.labels, spec)
    return ds.subset(train), ds.subset(test)


def save_split(path, ds, spec, part):
    with open(path, "w") as fh:
        fh.write(f"# seed={spec.seed} digest={spec.digest()} part={part}\n")
        fh.write("row,col,class\n")
        for r, c, k in ds.entries:
            fh.write(f"{r},{c},{k}\n")


def load_split(path, cube, size):
    """Read a split file back into a :class:`PatchDataset` over ``cube``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing '# seed=... digest=...' header line")
    body = [ln for ln in lines[1:] if ln.strip()]
    if not body or body[0].replace(" ", "") != "row,col,class":
        raise FormatError(f"{path}: missing 'row,col,class' column header")
    entries = []
    for lineno, ln in enumerate(body[1:], start=3):
        try:
            r, c, k = (int(v) for v in ln.split(","))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed entry {ln!r}") from None
        if not (0 <= r < cube.rows and 0 <= c < cube.cols):
            raise DataError(f"{path}:{lineno}: pixel ({r},{c}) outside {cube.rows}x{cube.cols} cube")
        if cube.labels[r, c] != k:
            raise DataError(f"{path}:{lineno}: pixel ({r},{c}) has label {cube.labels[r, c]}, file says {k}")
        entries.append((r, c, k))
    return PatchDataset(cube, np.array(entries, dtype=np.int64).reshape(-1, 3), size)
