"""Full evaluation of a trained model and its text/JSON/CSV renderings.

Test-set metrics (policy accuracies, router profile, depth probe) use a
balanced held-out split. Pseudo-label metrics (error matrix, F1,
utilization) use the clean, un-augmented unlabeled training features and
their hidden true labels, at the training confidence threshold.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import INTERVAL_NAMES, IntervalPartition, SplitPair, TestSplit, memberships
from ..model import NUM_EXPERTS, MetaExpert
from ..objectives import DEFAULT_THRESHOLD, make_pseudo_labels
from .kmeans import depth_bias_probe
from .metrics import (
    EXPERT_POLICIES,
    POLICIES,
    ErrorMatrix,
    collect_outputs,
    cpe_union_error,
    dea_confidence_profile,
    eps_cpe,
    eps_ours,
    error_matrix,
    interval_accuracy,
    labeler_interval_error,
    policy_predict,
    pseudo_label_f1,
    utilization,
)

DEFAULT_POLICIES = ("expert1", "expert2", "expert3", "cpe", "dea")
ACCURACY_COLUMNS = ("Policy", "Head", "Medium", "Tail", "Overall")
PSEUDO_LABEL_COLUMNS = ("Labeler", "Head", "Medium", "Tail", "eps", "M_hat/M")


@dataclass
class EvalReport:
    accuracy: float                                  # DEA-routed overall test accuracy
    policies: dict[str, dict]                        # name -> head/medium/tail/overall/counts
    f1: dict[str, dict | None]                       # labeler -> macro F1 summary
    error_matrix: ErrorMatrix
    eps_cpe: float | None
    eps_ours: float | None
    utilization: dict[str, float]
    interval_error: dict[str, list]                  # pseudo-label error rows per labeler
    dea_profile: np.ndarray
    probe: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        nan = lambda a: [[None if np.isnan(v) else float(v) for v in r] for r in np.asarray(a)]
        return {
            "accuracy": self.accuracy,
            "policies": self.policies,
            "f1": self.f1,
            "error_matrix": self.error_matrix.to_dict(),
            "eps_cpe": self.eps_cpe,
            "eps_ours": self.eps_ours,
            "utilization": self.utilization,
            "interval_error": self.interval_error,
            "dea_profile": nan(self.dea_profile),
            "probe": self.probe,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def accuracy_table(self) -> str:
        rows = [[name] + [_fmt(p[k]) for k in ("head", "medium", "tail", "overall")]
                for name, p in self.policies.items()]
        return _aligned(ACCURACY_COLUMNS, rows)

    def pseudo_label_table(self) -> str:
        rows = []
        for name, errs in self.interval_error.items():
            rows.append([name] + [_fmt(None if e is None else 100 * e) for e in errs["by_interval"]]
                        + [_fmt(None if errs["eps"] is None else 100 * errs["eps"]),
                           _fmt(errs["utilization"], digits=3)])
        return _aligned(PSEUDO_LABEL_COLUMNS, rows)

    def text(self) -> str:
        prof = [[INTERVAL_NAMES[j]] + [_fmt(v, 3) for v in row] for j, row in enumerate(self.dea_profile)]
        parts = ["Test accuracy (%)", self.accuracy_table(), "",
                 "Pseudo-label error (%) and utilization on the unlabeled set", self.pseudo_label_table(), "",
                 "Mean router weight by true interval",
                 _aligned(("Interval", "w1", "w2", "w3"), prof)]
        if self.probe:
            rows = [[p["depth"]] + [_fmt(p[k]) for k in ("overall", "head", "medium", "tail", "gap")]
                    for p in self.probe]
            parts += ["", "k-means probe accuracy (%) by encoder depth",
                      _aligned(("Depth", "Overall", "Head", "Medium", "Tail", "Gap"), rows)]
        return "\n".join(parts) + "\n"

    def f1_csv(self) -> str:
        """Bar-chart data: F1 and utilization per labeler."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["labeler", "f1_overall", "f1_head", "f1_medium", "f1_tail", "utilization"])
        for name, f in self.f1.items():
            vals = [None] * 4 if f is None else [f["overall"], *(f["per_interval"][n] for n in INTERVAL_NAMES)]
            w.writerow([name, *("" if v is None else repr(float(v)) for v in vals),
                        repr(float(self.utilization[name]))])
        return buf.getvalue()

    def profile_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["interval", "w1", "w2", "w3"])
        for j, row in enumerate(self.dea_profile):
            w.writerow([INTERVAL_NAMES[j], *("" if np.isnan(v) else repr(float(v)) for v in row)])
        return buf.getvalue()


def _fmt(v, digits: int = 2) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def _aligned(header: Sequence[str], rows: list[list[str]]) -> str:
    table = [list(header)] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in table]
    return "\n".join(lines)


def _f1_summary(rep) -> dict | None:
    if rep is None:
        return None
    return {"overall": rep.overall, "per_interval": rep.per_interval,
            "per_class": rep.per_class, "absent": rep.absent}


def evaluate(model: MetaExpert, test: TestSplit, split: SplitPair,
             partition: IntervalPartition,
             policies: Sequence[str] = DEFAULT_POLICIES,
             oracle: bool = False, probe: bool = True,
             threshold: float = DEFAULT_THRESHOLD,
             cpe_mean_softmax: bool = False, probe_seed: int = 0) -> EvalReport:
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise ValueError(f"unknown policies {unknown}; expected a subset of {list(POLICIES)}")
    if "upper_e" in policies and not oracle:
        raise ValueError("policy upper_e needs oracle membership access (enable the oracle flag)")

    out = collect_outputs(model, test.x)
    test_mem = memberships(test.y, partition)
    pol = {}
    for name in policies:
        pred = policy_predict(name, out, test_mem if name == "upper_e" else None, cpe_mean_softmax)
        acc = interval_accuracy(pred, test.y, partition)
        pol[name] = {"head": acc.head, "medium": acc.medium, "tail": acc.tail,
                     "overall": acc.overall, "counts": list(acc.counts)}
    dea_acc = interval_accuracy(policy_predict("dea", out), test.y, partition).overall

    # pseudo-label quality on the unlabeled training set
    uo = collect_outputs(model, split.unlabeled_x)
    truth = split.unlabeled_truth
    u_mem = memberships(truth, partition)
    labelers = {name: make_pseudo_labels(uo.expert_probs(k), threshold, name)
                for k, name in enumerate(EXPERT_POLICIES)}
    labelers["aggregator"] = make_pseudo_labels(uo.y_m, threshold, "aggregator")
    experts = [labelers[n] for n in EXPERT_POLICIES]
    em = error_matrix(experts, truth, u_mem)
    try:
        e_cpe, e_ours = eps_cpe(em), eps_ours(em)
    except ValueError:
        e_cpe = e_ours = None
    util = {n: utilization(p) for n, p in labelers.items()}

    rows: dict[str, dict] = {}
    for k, name in enumerate(EXPERT_POLICIES):
        by = [None if np.isnan(v) else float(v) for v in em.eps[k]]
        defined = [v for v in by if v is not None]
        rows[name] = {"by_interval": by, "utilization": util[name],
                      "eps": float(np.mean(defined)) if defined else None}
    cpe_by = []
    for j in range(NUM_EXPERTS):
        col = em.eps[:, j][~np.isnan(em.eps[:, j])]
        cpe_by.append(float(col.mean()) if col.size else None)
    rows["cpe"] = {"by_interval": cpe_by, "eps": e_cpe,
                   "utilization": float(np.mean([util[n] for n in EXPERT_POLICIES])),
                   "union_by_interval": cpe_union_error(experts, truth, u_mem)}
    diag = [None if np.isnan(em.eps[j, j]) else float(em.eps[j, j]) for j in range(NUM_EXPERTS)]
    matched = np.stack([p.mask for p in experts])[u_mem, np.arange(len(truth))]
    rows["ours"] = {"by_interval": diag, "eps": e_ours,
                    "utilization": float(matched.mean()) if len(truth) else 0.0}
    rows["aggregator"] = {"by_interval": labeler_interval_error(labelers["aggregator"], truth, u_mem),
                          "utilization": util["aggregator"], "eps": None}
    agg_defined = [v for v in rows["aggregator"]["by_interval"] if v is not None]
    rows["aggregator"]["eps"] = float(np.mean(agg_defined)) if agg_defined else None

    probe_rows = []
    if probe:
        probe_rows = [p.as_dict() for p in depth_bias_probe(out.taps, test.y, partition,
                                                            seed=probe_seed)]
    return EvalReport(
        accuracy=dea_acc, policies=pol,
        f1={n: _f1_summary(pseudo_label_f1(p, truth, partition)) for n, p in labelers.items()},
        error_matrix=em, eps_cpe=e_cpe, eps_ours=e_ours, utilization=util,
        interval_error=rows, dea_profile=dea_confidence_profile(out.w, test_mem),
        probe=probe_rows, meta={"threshold": threshold, "partition": partition.as_dict(),
                                "policies": list(policies),
                                "test_size": int(len(test.y))},
    )
