"""Pseudo-labels and the four training losses.

Conventions shared by every loss here:

* pseudo-labels and confidence masks come from the weak view, the
  consistency cross-entropy is evaluated on the strong view;
* masked means divide by the full unlabeled batch size, so rejected samples
  contribute zero without shrinking the denominator;
* a sample is accepted when its confidence is strictly greater than ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import IntervalPartition, memberships
from .model import NUM_EXPERTS, ForwardOutput, MetaExpert
from .numerics import Tensor, add, cross_entropy_logits, no_grad, softmax

DEFAULT_THRESHOLD = 0.95


@dataclass
class PseudoLabelBatch:
    labeler: str          # "expert1".."expert3" or "aggregator"
    y_hat: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray      # bool, confidence > threshold
    threshold: float

    @property
    def accepted(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return len(self.y_hat)


def make_pseudo_labels(probs, t: float = DEFAULT_THRESHOLD,
                       labeler: str = "aggregator") -> PseudoLabelBatch:
    """Argmax labels, max-probability confidences and the ``> t`` mask."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probabilities must be (batch, classes), got shape {list(p.shape)}")
    y_hat = p.argmax(axis=1).astype(np.int64)
    conf = p.max(axis=1)
    return PseudoLabelBatch(labeler, y_hat, conf, conf > t, float(t))


@dataclass
class MembershipTargets:
    s: np.ndarray       # (B_l, 3) one-hot, interval of the true label
    s_hat: np.ndarray   # (B_u, 3) one-hot, interval of the aggregator's pseudo-label

    @classmethod
    def build(cls, labels: np.ndarray, pseudo: PseudoLabelBatch,
              partition: IntervalPartition) -> "MembershipTargets":
        eye = np.eye(NUM_EXPERTS)
        return cls(eye[memberships(labels, partition)], eye[memberships(pseudo.y_hat, partition)])

    @property
    def s_index(self) -> np.ndarray:
        return self.s.argmax(axis=1)

    @property
    def s_hat_index(self) -> np.ndarray:
        return self.s_hat.argmax(axis=1)


@dataclass
class LossReport:
    l_base: float
    l_dea: float
    l_meta: float
    l_overall: float
    parts: dict[str, float] = field(default_factory=dict)
    utilization: float = 0.0

    def row(self) -> dict:
        return {"l_base": self.l_base, "l_dea": self.l_dea, "l_meta": self.l_meta,
                "l_overall": self.l_overall, **self.parts, "utilization": self.utilization}


def log_prior(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if (pi <= 0).any():
        raise ValueError(f"label frequencies must be positive for log(pi), got {pi.tolist()}")
    return np.log(pi)


def base_loss(z_labeled: Sequence[Tensor], y: np.ndarray,
              probs_weak: Sequence[np.ndarray], z_strong: Sequence[Tensor],
              pi, tau: Sequence[float], t: float = DEFAULT_THRESHOLD
              ) -> tuple[Tensor, dict]:
    """Per-expert logit-adjusted supervised CE plus masked consistency CE.

    ``probs_weak[k]`` are expert k's own probabilities on the weak unlabeled
    view; they supply expert k's pseudo-labels and mask.
    """
    if not (len(z_labeled) == len(probs_weak) == len(z_strong) == len(tau)):
        raise ValueError("base_loss: one entry per expert expected in every argument")
    lp = log_prior(pi)
    sup_terms, unsup_terms, pseudo = [], [], []
    for k, (zl, pw, zs, tk) in enumerate(zip(z_labeled, probs_weak, z_strong, tau)):
        adjusted = add(zl, Tensor(float(tk) * lp))
        sup_terms.append(cross_entropy_logits(adjusted, y))
        pl = make_pseudo_labels(pw, t, labeler=f"expert{k + 1}")
        pseudo.append(pl)
        unsup_terms.append(cross_entropy_logits(zs, pl.y_hat, pl.mask, denom=len(pl)))
    sup = _sum(sup_terms)
    unsup = _sum(unsup_terms)
    diag = {"base_sup": sup.item(), "base_unsup": unsup.item(), "pseudo": pseudo}
    return add(sup, unsup), diag


def dea_loss(dea_logits_labeled: Tensor, targets: MembershipTargets,
             dea_logits_unlabeled: Tensor, mask: np.ndarray) -> tuple[Tensor, dict]:
    """Router CE against true memberships (labeled) and pseudo memberships
    (unlabeled, gated by the aggregator's mask)."""
    sup = cross_entropy_logits(dea_logits_labeled, targets.s_index)
    unsup = cross_entropy_logits(dea_logits_unlabeled, targets.s_hat_index, mask,
                                 denom=len(mask))
    return add(sup, unsup), {"dea_sup": sup.item(), "dea_unsup": unsup.item()}


def meta_loss(agg_logits_labeled: Tensor, y: np.ndarray, agg_logits_strong: Tensor,
              pseudo: PseudoLabelBatch) -> tuple[Tensor, dict]:
    sup = cross_entropy_logits(agg_logits_labeled, y)
    unsup = cross_entropy_logits(agg_logits_strong, pseudo.y_hat, pseudo.mask,
                                 denom=len(pseudo))
    return add(sup, unsup), {"meta_sup": sup.item(), "meta_unsup": unsup.item()}


def overall_loss(base: Tensor, dea: Tensor | None, meta: Tensor | None,
                 warmup: bool) -> tuple[Tensor, LossReport]:
    """``base`` alone while warming up, ``base + dea + meta`` afterwards."""
    if warmup or dea is None or meta is None:
        if not warmup:
            raise ValueError("overall_loss: DEA and META terms are required after warm-up")
        return base, LossReport(base.item(), 0.0, 0.0, base.item())
    total = add(add(base, dea), meta)
    return total, LossReport(base.item(), dea.item(), meta.item(), total.item())


def _sum(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


@dataclass
class Batch:
    x_labeled: np.ndarray     # weak view of the labeled samples
    y: np.ndarray
    x_weak: np.ndarray        # weak view of the unlabeled samples
    x_strong: np.ndarray      # strong view of the same unlabeled samples


@dataclass
class StepResult:
    loss: Tensor
    report: LossReport
    expert_pseudo: list[PseudoLabelBatch]
    agg_pseudo: PseudoLabelBatch | None


def compute_losses(model: MetaExpert, batch: Batch, pi, tau: Sequence[float],
                   partition: IntervalPartition, t: float = DEFAULT_THRESHOLD,
                   warmup: bool = False) -> StepResult:
    """One forward pass per view and the full loss for that batch.

    The weak unlabeled view is evaluated without recording (it only produces
    integer targets and masks). During warm-up the router is never run, so
    its parameters receive no gradient.
    """
    route = not warmup
    out_l = model.forward(batch.x_labeled, route=route)
    out_s = model.forward(batch.x_strong, route=route)
    with no_grad():
        out_w = model.forward(batch.x_weak, route=route)
    probs_weak = [softmax(z).data for z in out_w.z]

    base, bdiag = base_loss(out_l.z, batch.y, probs_weak, out_s.z, pi, tau, t)
    parts = {"base_sup": bdiag["base_sup"], "base_unsup": bdiag["base_unsup"]}

    agg_pseudo = None
    dea = meta = None
    if route:
        agg_pseudo = make_pseudo_labels(softmax(out_w.agg_logits), t, "aggregator")
        targets = MembershipTargets.build(batch.y, agg_pseudo, partition)
        dea, ddiag = dea_loss(out_l.dea_logits, targets, out_s.dea_logits, agg_pseudo.mask)
        meta, mdiag = meta_loss(out_l.agg_logits, batch.y, out_s.agg_logits, agg_pseudo)
        parts.update(ddiag)
        parts.update(mdiag)
    loss, report = overall_loss(base, dea, meta, warmup)
    report.parts = parts
    if agg_pseudo is not None:
        report.utilization = agg_pseudo.accepted / len(agg_pseudo)
    else:
        pls = bdiag["pseudo"]
        report.utilization = sum(p.accepted for p in pls) / sum(len(p) for p in pls)
    return StepResult(loss, report, bdiag["pseudo"], agg_pseudo)


def forward_eval(model: MetaExpert, x: np.ndarray) -> ForwardOutput:
    with no_grad():
        return model.forward(x, route=True)
