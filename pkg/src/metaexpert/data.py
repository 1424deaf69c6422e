"""Synthetic long-tailed labeled/unlabeled splits.

Each class is an isotropic Gaussian blob around a unit-norm center. Labeled
counts follow an exponential profile from ``n1`` down to ``n1 / gamma_l``;
the unlabeled split follows the same profile (consistent), a flat profile
(uniform) or the reversed profile (inverse).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal

import numpy as np

from . import container
from .numerics import seeded_rng

REGIMES = ("consistent", "uniform", "inverse")
DATASET_VERSION = 1

# seed streams: 0 centers, 1 labeled, 2 unlabeled, 3 held-out test
_CENTERS, _LABELED, _UNLABELED, _TEST = 0, 1, 2, 3

SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST = 0, 1, 2


class SpecError(ValueError):
    """Invalid dataset or augmentation setting; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    feature_dim: int = 16
    n1: int = 300
    m_anchor: int = 600
    gamma_l: float = 50.0
    unlabeled_regime: str = "consistent"
    blob_spread: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 3:
            raise SpecError("num_classes", f"need at least 3 classes, got {self.num_classes}")
        if self.feature_dim < 1:
            raise SpecError("feature_dim", f"must be positive, got {self.feature_dim}")
        if self.n1 < 1:
            raise SpecError("n1", f"must be positive, got {self.n1}")
        if self.m_anchor < 1:
            raise SpecError("m_anchor", f"must be positive, got {self.m_anchor}")
        if not self.gamma_l >= 1:
            raise SpecError("gamma_l", f"imbalance ratio must be >= 1, got {self.gamma_l}")
        if self.unlabeled_regime not in REGIMES:
            raise SpecError("unlabeled_regime",
                            f"must be one of {', '.join(REGIMES)}, got {self.unlabeled_regime!r}")
        if self.blob_spread < 0:
            raise SpecError("blob_spread", f"must be >= 0, got {self.blob_spread}")
        if self.seed < 0:
            raise SpecError("seed", f"must be >= 0, got {self.seed}")
        if self.gamma_l > 1:
            counts = exponential_profile(self.n1, self.gamma_l, self.num_classes)
            if any(a <= b for a, b in zip(counts, counts[1:])):
                raise SpecError("gamma_l", f"n1={self.n1} with gamma_l={self.gamma_l} gives "
                                           f"tied class counts {counts}; raise n1")

    @property
    def gamma_u(self) -> float:
        return {"consistent": self.gamma_l, "uniform": 1.0,
                "inverse": 1.0 / self.gamma_l}[self.unlabeled_regime]


def exponential_profile(anchor: int, gamma: float, num_classes: int) -> list[int]:
    """``max(1, round(anchor * gamma ** (-c / (C - 1))))`` for c = 0..C-1."""
    return [max(1, round_half_away(anchor * gamma ** (-c / (num_classes - 1))))
            for c in range(num_classes)]


def class_counts(spec: DatasetSpec, split: Literal["labeled", "unlabeled"]) -> list[int]:
    C = spec.num_classes
    if split == "labeled":
        return exponential_profile(spec.n1, spec.gamma_l, C)
    if split != "unlabeled":
        raise ValueError(f"split must be 'labeled' or 'unlabeled', got {split!r}")
    if spec.unlabeled_regime == "consistent":
        return exponential_profile(spec.m_anchor, spec.gamma_l, C)
    if spec.unlabeled_regime == "uniform":
        return [spec.m_anchor] * C
    # inverse: anchor is the count of the last class
    return exponential_profile(spec.m_anchor, spec.gamma_l, C)[::-1]


def class_centers(spec: DatasetSpec) -> np.ndarray:
    """Unit-norm class centers, orthonormal whenever C <= d."""
    rng = seeded_rng(spec.seed, _CENTERS)
    C, d = spec.num_classes, spec.feature_dim
    g = rng.standard_normal((d, C)) if C <= d else rng.standard_normal((C, d))
    if C <= d:
        q, r = np.linalg.qr(g)
        # fix the sign ambiguity so the factorization is unique
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return np.ascontiguousarray(q.T)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def min_pairwise_distance(centers: np.ndarray) -> float:
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return float(dist[~np.eye(len(centers), dtype=bool)].min())


def _draw(rng: np.random.Generator, centers: np.ndarray, counts: Iterable[int],
          spread: float) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    d = centers.shape[1]
    for c, n in enumerate(counts):
        noise = rng.standard_normal((n, d))
        xs.append(centers[c] + spread * noise)
        ys.append(np.full(n, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class SplitPair:
    """Labeled split plus unlabeled split.

    ``unlabeled_truth`` holds the hidden labels of the unlabeled samples. The
    training loop never reads it; only the evaluation oracles do.
    """

    spec: DatasetSpec
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_truth: np.ndarray
    centers: np.ndarray
    labeled_index: np.ndarray = field(default=None)
    unlabeled_index: np.ndarray = field(default=None)

    def __post_init__(self):
        n, m = len(self.labeled_y), len(self.unlabeled_truth)
        if self.labeled_index is None:
            self.labeled_index = np.arange(n, dtype=np.int64)
        if self.unlabeled_index is None:
            self.unlabeled_index = np.arange(n, n + m, dtype=np.int64)

    @property
    def pi(self) -> np.ndarray:
        counts = np.bincount(self.labeled_y, minlength=self.spec.num_classes)
        return counts / counts.sum()

    @property
    def min_center_distance(self) -> float:
        return min_pairwise_distance(self.centers)


@dataclass
class TestSplit:
    x: np.ndarray
    y: np.ndarray


def generate(spec: DatasetSpec) -> SplitPair:
    centers = class_centers(spec)
    lx, ly = _draw(seeded_rng(spec.seed, _LABELED), centers,
                   class_counts(spec, "labeled"), spec.blob_spread)
    ux, uy = _draw(seeded_rng(spec.seed, _UNLABELED), centers,
                   class_counts(spec, "unlabeled"), spec.blob_spread)
    return SplitPair(spec, lx, ly, ux, uy, centers)


def make_test_split(spec: DatasetSpec, per_class: int = 100) -> TestSplit:
    """Balanced held-out split from the same blobs on a disjoint seed stream."""
    if per_class < 1:
        raise SpecError("test_per_class", f"must be positive, got {per_class}")
    x, y = _draw(seeded_rng(spec.seed, _TEST), class_centers(spec),
                 [per_class] * spec.num_classes, spec.blob_spread)
    return TestSplit(x, y)


# ---------------------------------------------------------------------------
# head / medium / tail intervals
# ---------------------------------------------------------------------------

HEAD, MEDIUM, TAIL = 0, 1, 2
INTERVAL_NAMES = ("head", "medium", "tail")


@dataclass(frozen=True)
class IntervalPartition:
    head: frozenset
    medium: frozenset
    tail: frozenset

    def __post_init__(self):
        for name in INTERVAL_NAMES:
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
            if not getattr(self, name):
                raise SpecError("partition", f"{name} interval is empty")
        sets = (self.head, self.medium, self.tail)
        union = self.head | self.medium | self.tail
        if sum(len(s) for s in sets) != len(union):
            raise SpecError("partition", "intervals overlap")
        if union != frozenset(range(len(union))):
            raise SpecError("partition", f"intervals must cover 0..{len(union) - 1} exactly")

    @property
    def num_classes(self) -> int:
        return len(self.head) + len(self.medium) + len(self.tail)

    def lookup(self) -> np.ndarray:
        """Interval index per class."""
        table = np.empty(self.num_classes, dtype=np.int64)
        for k, name in enumerate(INTERVAL_NAMES):
            for c in getattr(self, name):
                table[c] = k
        return table

    def as_dict(self) -> dict:
        return {name: sorted(getattr(self, name)) for name in INTERVAL_NAMES}


def default_partition(num_classes: int) -> IntervalPartition:
    """Head = top 20% of classes, tail = bottom 60%, medium = rest (each >= 1).

    For ten classes this is head {0, 1}, medium {2, 3}, tail {4..9}.
    """
    C = num_classes
    if C < 3:
        raise SpecError("num_classes", f"need at least 3 classes, got {C}")
    n_head = max(1, round_half_away(0.2 * C))
    n_tail = max(1, round_half_away(0.6 * C))
    while C - n_head - n_tail < 1:
        if n_tail > 1:
            n_tail -= 1
        else:
            n_head -= 1
    return IntervalPartition(range(n_head), range(n_head, C - n_tail), range(C - n_tail, C))


def membership_of(class_index: int, partition: IntervalPartition) -> int:
    """0 for head, 1 for medium, 2 for tail."""
    if class_index in partition.head:
        return HEAD
    if class_index in partition.medium:
        return MEDIUM
    if class_index in partition.tail:
        return TAIL
    raise ValueError(f"class {class_index} is outside the partition")


def memberships(labels: np.ndarray, partition: IntervalPartition) -> np.ndarray:
    return partition.lookup()[np.asarray(labels, dtype=np.int64)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.2
    strong_mask_fraction: float = 0.25

    def __post_init__(self):
        if self.weak_noise_sigma < 0:
            raise SpecError("weak_noise_sigma", f"must be >= 0, got {self.weak_noise_sigma}")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise SpecError("strong_noise_sigma",
                            f"must be >= weak_noise_sigma ({self.weak_noise_sigma}), "
                            f"got {self.strong_noise_sigma}")
        if not 0 <= self.strong_mask_fraction < 1:
            raise SpecError("strong_mask_fraction",
                            f"must lie in [0, 1), got {self.strong_mask_fraction}")


def augment_batch(x: np.ndarray, policy: AugmentationPolicy, strength: str,
                  rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if strength == "weak":
        if policy.weak_noise_sigma == 0:
            return x.copy()
        return x + policy.weak_noise_sigma * rng.standard_normal(x.shape)
    if strength != "strong":
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    out = x + policy.strong_noise_sigma * rng.standard_normal(x.shape)
    k = round_half_away(policy.strong_mask_fraction * x.shape[1])
    if k:
        cols = np.argsort(rng.random(x.shape), axis=1, kind="stable")[:, :k]
        np.put_along_axis(out, cols, 0.0, axis=1)
    return out


def augment(x: np.ndarray, policy: AugmentationPolicy, strength: str,
            rng: np.random.Generator) -> np.ndarray:
    """Single-vector view; same draws as a one-row ``augment_batch``."""
    return augment_batch(np.asarray(x)[None, :], policy, strength, rng)[0]


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

def record_dtype(d: int) -> np.dtype:
    return np.dtype([("split", "u1"), ("label", "<i8"), ("x", "<f8", (d,))])


def dataset_header(split: SplitPair) -> dict:
    spec = split.spec
    return {
        "version": DATASET_VERSION,
        "num_classes": spec.num_classes,
        "feature_dim": spec.feature_dim,
        "labeled_counts": class_counts(spec, "labeled"),
        "unlabeled_counts": class_counts(spec, "unlabeled"),
        "gamma_l": spec.gamma_l,
        "gamma_u": spec.gamma_u,
        "seed": spec.seed,
        "spec": asdict(spec),
    }


def write_dataset(path: str | os.PathLike, split: SplitPair) -> None:
    """Records are labeled samples (tag 0, label) then unlabeled (tag 1, hidden label)."""
    d = split.spec.feature_dim
    n, m = len(split.labeled_y), len(split.unlabeled_truth)
    rec = np.zeros(n + m, dtype=record_dtype(d))
    rec["split"][:n] = SPLIT_LABELED
    rec["split"][n:] = SPLIT_UNLABELED
    rec["label"][:n] = split.labeled_y
    rec["label"][n:] = split.unlabeled_truth
    rec["x"][:n] = split.labeled_x
    rec["x"][n:] = split.unlabeled_x
    container.write(path, b"DSET", DATASET_VERSION, dataset_header(split),
                    {"records": rec, "centers": split.centers})


def read_dataset(path: str | os.PathLike) -> SplitPair:
    meta, arrays = container.read(path, b"DSET", DATASET_VERSION)
    spec = DatasetSpec(**meta["spec"])
    rec = arrays["records"]
    lab = rec["split"] == SPLIT_LABELED
    unl = rec["split"] == SPLIT_UNLABELED
    idx = np.arange(len(rec), dtype=np.int64)
    return SplitPair(spec,
                     np.ascontiguousarray(rec["x"][lab]), rec["label"][lab].astype(np.int64),
                     np.ascontiguousarray(rec["x"][unl]), rec["label"][unl].astype(np.int64),
                     arrays["centers"], idx[lab], idx[unl])


def read_dataset_header(path: str | os.PathLike) -> dict:
    meta, _ = container.read(path, b"DSET", DATASET_VERSION)
    return meta
