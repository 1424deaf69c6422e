"""Lloyd's k-means and the depth-bias probe over encoder taps.

Initialization is farthest-point: the first centroid is a seeded random
sample, each further centroid is the sample farthest from all centroids so
far. A cluster that ends an assignment step empty is re-seeded at the sample
farthest from its own centroid (ties go to the lowest index), so the
objective recorded after every assignment never increases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import IntervalPartition
from ..numerics import seeded_rng
from .metrics import interval_accuracy

MAX_ITER = 100
TOLERANCE = 1e-8
DEPTH_NAMES = ("shallow", "middle", "deep")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]   # after each assignment step
    iterations: int
    reseeded: int


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return (diff * diff).sum(axis=2)


def farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    best = _sq_dist(x, x[idx])[:, 0]
    for _ in range(1, k):
        nxt = int(best.argmax())
        idx.append(nxt)
        best = np.minimum(best, _sq_dist(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(x, k: int, seed: int = 0, max_iter: int = MAX_ITER, tol: float = TOLERANCE
           ) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < k or k < 1:
        raise ValueError(f"kmeans needs at least k={k} rows of 2-D data, got shape {list(x.shape)}")
    c = farthest_point_init(x, k, seeded_rng(seed, 21))
    history, reseeded, it = [], 0, 0
    for it in range(1, max_iter + 1):
        d = _sq_dist(x, c)
        labels = d.argmin(axis=1)
        own = d[np.arange(len(x)), labels]
        history.append(float(own.sum()))
        new = c.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = x[sel].mean(axis=0)
            else:
                far = int(own.argmax())
                new[j] = x[far]
                own[far] = -1.0
                reseeded += 1
        shift = float(np.abs(new - c).max())
        c = new
        if shift <= tol:
            break
    d = _sq_dist(x, c)
    labels = d.argmin(axis=1)
    return KMeansResult(c, labels, history, it, reseeded)


def majority_map(clusters: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """Class assigned to each cluster by majority vote (ties to the lower class)."""
    num_classes = int(y.max()) + 1 if len(y) else 0
    mapping = np.zeros(k, dtype=np.int64)
    for j in range(k):
        members = y[clusters == j]
        if len(members):
            mapping[j] = np.bincount(members, minlength=num_classes).argmax()
    return mapping


@dataclass
class DepthProbe:
    depth: str
    overall: float
    head: float | None
    medium: float | None
    tail: float | None
    head_minus_tail: float | None
    gap: float | None   # |head - tail|

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def depth_bias_probe(taps, y, partition: IntervalPartition, k: int | None = None,
                     seed: int = 0) -> list[DepthProbe]:
    y = np.asarray(y)
    k = partition.num_classes if k is None else k
    if k != partition.num_classes:
        raise ValueError(f"probe expects k = number of classes ({partition.num_classes}), got {k}")
    out = []
    for name, feats in zip(DEPTH_NAMES, taps):
        res = kmeans(feats, k, seed=seed)
        pred = majority_map(res.labels, y, k)[res.labels]
        acc = interval_accuracy(pred, y, partition)
        diff = None if acc.head is None or acc.tail is None else acc.head - acc.tail
        out.append(DepthProbe(name, acc.overall, acc.head, acc.medium, acc.tail, diff,
                              None if diff is None else abs(diff)))
    return out
