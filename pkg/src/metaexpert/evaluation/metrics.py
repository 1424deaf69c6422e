"""Accuracy, pseudo-label quality and routing metrics.

Accuracies and F1 scores are percentages in [0, 100]; error rates and
utilization are fractions in [0, 1]. Anything that cannot be computed (an
empty interval, an empty mask, an expert that accepts nothing) is reported
as ``None`` in dataclasses and ``NaN`` inside matrices, never as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import INTERVAL_NAMES, IntervalPartition, memberships
from ..model import NUM_EXPERTS
from ..objectives import PseudoLabelBatch

EXPERT_POLICIES = ("expert1", "expert2", "expert3")
POLICIES = EXPERT_POLICIES + ("cpe", "dea", "upper_e")


def _rate(num: int, den: int, scale: float = 100.0) -> float | None:
    return None if den == 0 else scale * num / den


@dataclass
class IntervalAccuracy:
    head: float | None
    medium: float | None
    tail: float | None
    overall: float
    counts: tuple[int, int, int]

    def as_tuple(self) -> tuple:
        return (self.head, self.medium, self.tail, self.overall)

    def by_interval(self) -> list[float | None]:
        return [self.head, self.medium, self.tail]


def interval_accuracy(pred, y, partition: IntervalPartition) -> IntervalAccuracy:
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.shape != y.shape:
        raise ValueError(f"predictions {pred.shape} and labels {y.shape} differ in length")
    if len(y) == 0:
        raise ValueError("interval_accuracy needs at least one sample")
    mem = memberships(y, partition)
    correct = pred == y
    per, counts = [], []
    for j in range(NUM_EXPERTS):
        sel = mem == j
        counts.append(int(sel.sum()))
        per.append(_rate(int(correct[sel].sum()), counts[-1]))
    return IntervalAccuracy(*per, overall=100.0 * int(correct.sum()) / len(y), counts=tuple(counts))


@dataclass
class F1Report:
    overall: float
    per_interval: dict[str, float]
    per_class: list[float]
    absent: list[int]   # classes with no support and no predictions among accepted samples


def pseudo_label_f1(pseudo: PseudoLabelBatch, y, partition: IntervalPartition
                    ) -> F1Report | None:
    """Macro F1 over masked-in samples; ``None`` when nothing is accepted."""
    y = np.asarray(y)
    if len(y) != len(pseudo):
        raise ValueError("pseudo-label batch and labels differ in length")
    if not pseudo.mask.any():
        return None
    pred, true = pseudo.y_hat[pseudo.mask], y[pseudo.mask]
    C = partition.num_classes
    per_class, absent = [], []
    for c in range(C):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        den = 2 * tp + fp + fn
        if den == 0:
            absent.append(c)
        per_class.append(0.0 if den == 0 else 100.0 * 2 * tp / den)
    per_class_arr = np.array(per_class)
    groups = (partition.head, partition.medium, partition.tail)
    per_interval = {name: float(per_class_arr[sorted(g)].mean())
                    for name, g in zip(INTERVAL_NAMES, groups)}
    return F1Report(float(per_class_arr.mean()), per_interval, per_class, absent)


def utilization(pseudo: PseudoLabelBatch) -> float:
    return 0.0 if len(pseudo) == 0 else pseudo.accepted / len(pseudo)


@dataclass
class ErrorMatrix:
    """``eps[i, j]``: error rate of labeler i among its accepted samples of interval j."""

    eps: np.ndarray
    accepted: np.ndarray
    errors: np.ndarray
    support: np.ndarray             # samples per true interval
    discrepancy: np.ndarray         # P(accept != correct) over all samples of interval j

    @property
    def defined(self) -> np.ndarray:
        return self.accepted > 0

    @property
    def undefined_count(self) -> int:
        return int((~self.defined).sum())

    def to_dict(self) -> dict:
        nan_to_none = lambda a: [[None if np.isnan(v) else float(v) for v in row] for row in a]
        return {"eps": nan_to_none(self.eps), "accepted": self.accepted.tolist(),
                "errors": self.errors.tolist(), "support": self.support.tolist(),
                "discrepancy": nan_to_none(self.discrepancy),
                "undefined_cells": self.undefined_count}


def from_eps(eps) -> ErrorMatrix:
    """Wrap a bare rate matrix (NaN = undefined) for the ε averages."""
    eps = np.asarray(eps, dtype=np.float64)
    ok = ~np.isnan(eps)
    return ErrorMatrix(eps, ok.astype(np.int64), np.zeros_like(eps, dtype=np.int64),
                       np.ones(eps.shape[1], dtype=np.int64), np.full_like(eps, np.nan))


def error_matrix(pseudos: Sequence[PseudoLabelBatch], y, true_membership) -> ErrorMatrix:
    y = np.asarray(y)
    mem = np.asarray(true_membership)
    Q = len(pseudos)
    if Q == 0:
        raise ValueError("error_matrix needs at least one labeler")
    acc = np.zeros((Q, NUM_EXPERTS), dtype=np.int64)
    err = np.zeros_like(acc)
    disc = np.full((Q, NUM_EXPERTS), np.nan)
    support = np.bincount(mem, minlength=NUM_EXPERTS)[:NUM_EXPERTS]
    for i, pl in enumerate(pseudos):
        if len(pl) != len(y):
            raise ValueError(f"labeler {pl.labeler} covers {len(pl)} samples, expected {len(y)}")
        wrong = pl.y_hat != y
        for j in range(NUM_EXPERTS):
            sel = mem == j
            acc[i, j] = int((pl.mask & sel).sum())
            err[i, j] = int((pl.mask & sel & wrong).sum())
            if support[j]:
                disc[i, j] = float((pl.mask[sel] != ~wrong[sel]).mean())
    with np.errstate(invalid="ignore", divide="ignore"):
        eps = np.where(acc > 0, err / np.maximum(acc, 1), np.nan)
    return ErrorMatrix(eps, acc, err, support, disc)


def _defined_mean(values: np.ndarray, what: str) -> float:
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise ValueError(f"{what}: every averaged cell is undefined")
    return float(values.mean())


def eps_cpe(m: ErrorMatrix) -> float:
    """Mean over all cells (all experts label all intervals)."""
    return _defined_mean(np.asarray(m.eps, dtype=np.float64).ravel(), "eps_cpe")


def eps_ours(m: ErrorMatrix) -> float:
    """Mean over the diagonal (expert i labels interval i only)."""
    return _defined_mean(np.diag(np.asarray(m.eps, dtype=np.float64)).copy(), "eps_ours")


def labeler_interval_error(pseudo: PseudoLabelBatch, y, true_membership) -> list[float | None]:
    """One labeler's error among accepted samples, per true interval."""
    row = error_matrix([pseudo], y, true_membership).eps[0]
    return [None if np.isnan(v) else float(v) for v in row]


def cpe_union_error(pseudos: Sequence[PseudoLabelBatch], y, true_membership
                    ) -> list[float | None]:
    """Per-interval error when all experts label simultaneously, pooled as a union.

    A sample counts as accepted when any expert accepts it and as an error
    when any accepting expert's label is wrong.
    """
    y, mem = np.asarray(y), np.asarray(true_membership)
    accepted = np.zeros(len(y), dtype=bool)
    wrong = np.zeros(len(y), dtype=bool)
    for pl in pseudos:
        accepted |= pl.mask
        wrong |= pl.mask & (pl.y_hat != y)
    out = []
    for j in range(NUM_EXPERTS):
        sel = mem == j
        out.append(_rate(int(wrong[sel].sum()), int(accepted[sel].sum()), scale=1.0))
    return out


@dataclass
class ModelOutputs:
    """Frozen numpy copies of one forward pass."""

    z: list[np.ndarray]
    w: np.ndarray
    agg_logits: np.ndarray
    taps: list[np.ndarray] = field(default_factory=list)

    def expert_probs(self, k: int) -> np.ndarray:
        return _softmax(self.z[k])

    @property
    def y_m(self) -> np.ndarray:
        return _softmax(self.agg_logits)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def collect_outputs(model, x) -> ModelOutputs:
    from ..objectives import forward_eval

    out = forward_eval(model, x)
    return ModelOutputs([z.data.copy() for z in out.z], out.w.data.copy(),
                        out.agg_logits.data.copy(), [t.data.copy() for t in out.taps])


def policy_predict(policy: str, outputs: ModelOutputs, oracle_membership=None,
                   cpe_mean_softmax: bool = False) -> np.ndarray:
    """Class predictions of one assignment policy.

    ``cpe`` predicts with the uniform expert (E2) by default, or with the
    mean of the three expert softmaxes when ``cpe_mean_softmax`` is set.
    ``upper_e`` routes each sample to the expert matching its true interval
    and therefore needs ``oracle_membership``.
    """
    if policy in EXPERT_POLICIES:
        return outputs.z[EXPERT_POLICIES.index(policy)].argmax(axis=1)
    if policy == "cpe":
        if cpe_mean_softmax:
            probs = sum(outputs.expert_probs(k) for k in range(NUM_EXPERTS)) / NUM_EXPERTS
            return probs.argmax(axis=1)
        return outputs.z[1].argmax(axis=1)
    if policy == "dea":
        return outputs.agg_logits.argmax(axis=1)
    if policy == "upper_e":
        if oracle_membership is None:
            raise ValueError("policy upper_e requires oracle memberships")
        mem = np.asarray(oracle_membership)
        if len(mem) != len(outputs.w):
            raise ValueError("oracle memberships and outputs differ in length")
        per_expert = np.stack([z.argmax(axis=1) for z in outputs.z])
        return per_expert[mem, np.arange(len(mem))]
    raise ValueError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")


def dea_confidence_profile(w, true_membership) -> np.ndarray:
    """Row j: mean router weights over samples whose true interval is j."""
    w, mem = np.asarray(w, dtype=np.float64), np.asarray(true_membership)
    prof = np.full((NUM_EXPERTS, w.shape[1]), np.nan)
    for j in range(NUM_EXPERTS):
        sel = mem == j
        if sel.any():
            prof[j] = w[sel].mean(axis=0)
    return prof


def diagonal_row_maxima(profile: np.ndarray) -> bool:
    """True when every defined row peaks (strictly) on its own expert."""
    for j, row in enumerate(np.asarray(profile)):
        if np.isnan(row).any():
            continue
        others = np.delete(row, j)
        if not (row[j] > others).all():
            return False
    return True
