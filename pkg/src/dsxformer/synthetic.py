"""Generated cubes for tests, demos and split bookkeeping checks."""

import numpy as np

from .data import HSICube
from .tables import SCENES


def _orthonormal(rng, bands, n):
    q, _ = np.linalg.qr(rng.normal(size=(bands, n)))
    return q.T


def make_separated_cube(rows=40, cols=40, bands=20, n_classes=4, separation=4.0,
                        noise=1.0, field=14, seed=0):
    """Square fields of ``n_classes`` (<= 4) in the cube corners on unlabeled background.

    Class means sit on orthogonal directions so every pair of means is
    exactly ``separation * noise`` apart.  The background sits at the
    centroid of the class means, so it carries no class evidence.  Pixels
    add iid Gaussian noise.
    """
    if not 1 <= n_classes <= 4:
        raise ValueError("corner layout supports 1..4 classes")
    if 2 * field > min(rows, cols):
        raise ValueError("fields do not fit in the cube")
    rng = np.random.default_rng(seed)
    dirs = _orthonormal(rng, bands, n_classes)
    base = np.linspace(1.0, 3.0, bands)
    step = separation * noise / np.sqrt(2.0)
    means = base + step * dirs
    means = np.vstack([means, means.mean(axis=0)])  # last row: background

    labels = np.zeros((rows, cols), dtype=np.uint16)
    corners = [(0, 0), (0, cols - field), (rows - field, 0), (rows - field, cols - field)]
    for c, (r0, c0) in enumerate(corners[:n_classes], start=1):
        labels[r0:r0 + field, c0:c0 + field] = c
    values = means[np.where(labels == 0, n_classes, labels.astype(np.int64) - 1)]
    values = values + noise * rng.normal(size=values.shape)
    return HSICube(values.astype(np.float32), labels, n_classes)


def make_table_cube(scene, bands=3, seed=0):
    """Cube with the scene's shape whose class populations equal its table totals.

    Labeled pixels are laid out class by class in row-major order; the rest
    of the scene is unlabeled.
    """
    info = SCENES[scene.upper()] if isinstance(scene, str) else scene
    rng = np.random.default_rng(seed)
    flat = np.zeros(info.rows * info.cols, dtype=np.uint16)
    pos = 0
    for c, n in enumerate(info.totals, start=1):
        flat[pos:pos + n] = c
        pos += n
    values = rng.normal(size=(info.rows, info.cols, bands)).astype(np.float32)
    return HSICube(values, flat.reshape(info.rows, info.cols), info.n_classes)
