"""Benchmark scene bookkeeping: scene shapes and per-class train/test counts.

Counts are the published splits for Salinas (SA), Pavia University (PU),
Indian Pines (IP) and Kennedy Space Center (KSC).  Index ``i`` of each list
is class id ``i + 1``.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class SceneInfo:
    name: str
    rows: int
    cols: int
    bands: int
    train: tuple
    test: tuple

    @property
    def n_classes(self):
        return len(self.train)

    @property
    def totals(self):
        return tuple(a + b for a, b in zip(self.train, self.test))

    def split_counts(self):
        """``{class_id: n_train}`` suitable for :class:`dsxformer.data.SplitSpec`."""
        return {i + 1: n for i, n in enumerate(self.train)}


SA = SceneInfo(
    "SA", 512, 217, 224,
    train=(201, 373, 198, 140, 268, 396, 358, 1128, 621, 328, 107, 193, 92, 107, 727, 181),
    test=(1808, 3353, 1778, 1254, 2410, 3563, 3221, 10143, 5582, 2950, 961, 1734, 824, 963, 6541, 1626),
)

# The published table lists the Shadows class (9) with the same counts as
# Asphalt (1); they are reproduced as printed.
PU = SceneInfo(
    "PU", 610, 340, 103,
    train=(664, 1865, 210, 307, 135, 503, 133, 369, 664),
    test=(5967, 16784, 1889, 2757, 1210, 4526, 1197, 3313, 5967),
)

# 200 usable bands after water-absorption removal (224 recorded).
IP = SceneInfo(
    "IP", 145, 145, 200,
    train=(5, 143, 83, 24, 49, 73, 3, 48, 2, 98, 246, 60, 21, 127, 39, 10),
    test=(41, 1285, 747, 213, 434, 657, 25, 430, 18, 874, 2209, 533, 184, 1138, 347, 83),
)

KSC = SceneInfo(
    "KSC", 512, 614, 176,
    train=(77, 25, 26, 26, 17, 23, 11, 44, 52, 41, 42, 51, 93),
    test=(684, 218, 230, 226, 144, 206, 94, 387, 468, 363, 377, 452, 834),
)

SCENES = {s.name: s for s in (SA, PU, IP, KSC)}
