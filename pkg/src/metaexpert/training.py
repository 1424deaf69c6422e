"""Warm-up then joint training, with bitwise-resumable checkpoints.

Every random draw in a run comes from a stream addressed by counters, never
from a generator carried across steps:

* labeled order for epoch ``e``: ``seeded_rng(seed, 11, e).permutation(N)``;
* unlabeled stream: global position ``i`` maps to pass ``i // M`` and slot
  ``i % M`` of ``seeded_rng(seed, 12, pass).permutation(M)``; step ``s``
  consumes positions ``[s * B_u, (s + 1) * B_u)``, recycling the set;
* augmentation for step ``s``: ``seeded_rng(seed, 13, s)``, drawing the weak
  labeled, weak unlabeled and strong unlabeled views in that order.

So the full random state of a run is ``(seed, epoch, global_step)`` and a
checkpoint taken between any two steps resumes bit-identically.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .data import AugmentationPolicy, IntervalPartition, SplitPair, augment_batch, default_partition
from .model import MetaExpert
from .numerics import OptimizerState, grad_norm, seeded_rng, sgd_step
from .objectives import Batch, compute_losses

CHECKPOINT_VERSION = 1
_LABELED_ORDER, _UNLABELED_ORDER, _AUGMENT = 11, 12, 13


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} ({value}) at step {step}")
        self.term, self.step, self.value = term, step, value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 18
    batch_labeled: int = 64
    batch_unlabeled: int = 128
    threshold: float = 0.95
    tau: tuple[float, float, float] = (0.0, 1.0, 2.0)
    seed: int = 0
    eval_every: int = 0
    learning_rate: float = 3e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch_labeled and batch_unlabeled must be >= 1")
        if len(self.tau) != 3:
            raise ValueError(f"tau needs one intensity per expert, got {list(self.tau)}")
        if not 0 <= self.threshold < 1:
            raise ValueError(f"threshold must lie in [0, 1), got {self.threshold}")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0")


@dataclass
class RunState:
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    epoch_sums: dict[str, float] = field(default_factory=dict)
    best: dict[str, float] = field(default_factory=dict)


_SUMMED = ("l_base", "l_dea", "l_meta", "l_overall", "utilization")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def dumps_row(row: dict) -> str:
    return json.dumps(_plain(row), sort_keys=True, allow_nan=True)


class Trainer:
    def __init__(self, model: MetaExpert, split: SplitPair, config: TrainConfig,
                 policy: AugmentationPolicy = AugmentationPolicy(),
                 partition: IntervalPartition | None = None,
                 optimizer: OptimizerState | None = None,
                 state: RunState | None = None,
                 eval_hook: Callable[[MetaExpert, int], dict] | None = None,
                 log_path: str | os.PathLike | None = None):
        if split.labeled_x.shape[1] != model.input_dim:
            raise ValueError(f"dataset feature width {split.labeled_x.shape[1]} does not match "
                             f"model input width {model.input_dim}")
        if split.spec.num_classes != model.num_classes:
            raise ValueError(f"dataset has {split.spec.num_classes} classes, model "
                             f"{model.num_classes}")
        self.model, self.split, self.config, self.policy = model, split, config, policy
        self.partition = partition or default_partition(model.num_classes)
        self.optimizer = optimizer or OptimizerState(config.learning_rate, config.momentum,
                                                     config.weight_decay)
        self.state = state or RunState()
        self.eval_hook = eval_hook
        self.log_path = Path(log_path) if log_path is not None else None
        self.rows: list[dict] = []
        self.fault_step: int | None = None  # test hook: poison the loss at this step
        self._perm_cache: dict[tuple[int, int], np.ndarray] = {}
        self.pi = split.pi

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.split.labeled_y) / self.config.batch_labeled)

    @property
    def done(self) -> bool:
        return self.state.epoch >= self.config.epochs

    def in_warmup(self, epoch: int | None = None) -> bool:
        e = self.state.epoch if epoch is None else epoch
        return e < self.config.warmup_epochs

    # -- batching ---------------------------------------------------------

    def _perm(self, stream: int, index: int, n: int) -> np.ndarray:
        key = (stream, index)
        perm = self._perm_cache.get(key)
        if perm is None:
            if len(self._perm_cache) > 8:
                self._perm_cache.clear()
            perm = seeded_rng(self.config.seed, stream, index).permutation(n)
            self._perm_cache[key] = perm
        return perm

    def batch_indices(self, epoch: int, step_in_epoch: int, global_step: int
                      ) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        n, m = len(self.split.labeled_y), len(self.split.unlabeled_x)
        order = self._perm(_LABELED_ORDER, epoch, n)
        lab = order[step_in_epoch * cfg.batch_labeled:(step_in_epoch + 1) * cfg.batch_labeled]
        pos = np.arange(global_step * cfg.batch_unlabeled, (global_step + 1) * cfg.batch_unlabeled)
        unl = np.empty(len(pos), dtype=np.int64)
        for p in np.unique(pos // m):
            sel = pos // m == p
            unl[sel] = self._perm(_UNLABELED_ORDER, int(p), m)[pos[sel] % m]
        return lab, unl

    def make_batch(self, epoch: int, step_in_epoch: int, global_step: int) -> Batch:
        lab, unl = self.batch_indices(epoch, step_in_epoch, global_step)
        rng = seeded_rng(self.config.seed, _AUGMENT, global_step)
        xl = augment_batch(self.split.labeled_x[lab], self.policy, "weak", rng)
        xu = self.split.unlabeled_x[unl]
        xw = augment_batch(xu, self.policy, "weak", rng)
        xs = augment_batch(xu, self.policy, "strong", rng)
        return Batch(xl, self.split.labeled_y[lab], xw, xs)

    # -- stepping ---------------------------------------------------------

    def _emit(self, row: dict) -> None:
        self.rows.append(row)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(dumps_row(row) + "\n")

    def step(self) -> dict:
        st, cfg = self.state, self.config
        warm = self.in_warmup()
        batch = self.make_batch(st.epoch, st.step_in_epoch, st.global_step)
        res = compute_losses(self.model, batch, self.pi, cfg.tau, self.partition,
                             cfg.threshold, warmup=warm)
        rep = res.report
        if self.fault_step is not None and st.global_step == self.fault_step:
            rep.l_base = float("nan")
        for term in ("l_base", "l_dea", "l_meta", "l_overall"):
            value = getattr(rep, term)
            if not math.isfinite(value):
                raise NonFiniteLossError(term, st.global_step, value)

        res.loss.backward()
        groups = self.model.param_groups()
        dea_norm = grad_norm(groups["dea"].values())
        active = {}
        for name, group in groups.items():
            if warm and name == "dea":
                continue
            active.update(group)
        sgd_step(active, self.optimizer)
        self.model.zero_grad()

        row = {"type": "step", "epoch": st.epoch, "step": st.global_step, "warmup": warm,
               **rep.row(), "dea_grad_norm": dea_norm}
        self._emit(row)
        for k in _SUMMED:
            st.epoch_sums[k] = st.epoch_sums.get(k, 0.0) + row[k]
        st.global_step += 1
        st.step_in_epoch += 1
        if st.step_in_epoch == self.steps_per_epoch:
            self._end_epoch()
        return row

    def _end_epoch(self) -> None:
        st, cfg = self.state, self.config
        n = st.step_in_epoch
        summary = {"type": "epoch", "epoch": st.epoch, "steps": n,
                   "warmup": self.in_warmup(),
                   **{f"mean_{k}": st.epoch_sums.get(k, 0.0) / n for k in _SUMMED}}
        if self.eval_hook is not None and cfg.eval_every and (st.epoch + 1) % cfg.eval_every == 0:
            metrics = self.eval_hook(self.model, st.epoch)
            summary["eval"] = metrics
            acc = metrics.get("accuracy")
            if acc is not None and acc > st.best.get("accuracy", -1.0):
                st.best = {"accuracy": acc, "epoch": st.epoch}
        self._emit(summary)
        st.epoch += 1
        st.step_in_epoch = 0
        st.epoch_sums = {}

    def run(self, max_steps: int | None = None,
            on_epoch_end: Callable[["Trainer"], None] | None = None) -> list[dict]:
        """Train until the configured epochs are done or ``max_steps`` steps ran."""
        taken = 0
        while not self.done and (max_steps is None or taken < max_steps):
            epoch = self.state.epoch
            self.step()
            taken += 1
            if on_epoch_end is not None and self.state.epoch != epoch:
                on_epoch_end(self)
        return self.rows

    # -- checkpoints ------------------------------------------------------

    def checkpoint(self, path: str | os.PathLike, extra_meta: dict | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"velocity/{k}": v for k, v in sorted(self.optimizer.velocity.items())})
        meta = {
            "model": self.model.config_dict(),
            "train": _plain(asdict(self.config)),
            "augment": asdict(self.policy),
            "partition": self.partition.as_dict(),
            "optimizer": {"learning_rate": self.optimizer.learning_rate,
                          "momentum": self.optimizer.momentum,
                          "weight_decay": self.optimizer.weight_decay},
            "run_state": _plain(asdict(self.state)),
            "dataset_spec": asdict(self.split.spec),
            **(extra_meta or {}),
        }
        container.write(path, b"CKPT", CHECKPOINT_VERSION, meta, arrays)

    @classmethod
    def resume(cls, path: str | os.PathLike, split: SplitPair, **kwargs) -> "Trainer":
        ckpt = load_checkpoint(path)
        if asdict(split.spec) != ckpt.meta["dataset_spec"]:
            raise ValueError("checkpoint was trained on a different dataset spec")
        return cls(ckpt.model, split, ckpt.train_config, ckpt.policy, ckpt.partition,
                   ckpt.optimizer, ckpt.state, **kwargs)


@dataclass
class Checkpoint:
    model: MetaExpert
    optimizer: OptimizerState
    state: RunState
    train_config: TrainConfig
    policy: AugmentationPolicy
    partition: IntervalPartition
    meta: dict


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read and fully validate a checkpoint before building anything from it."""
    meta, arrays = container.read(path, b"CKPT", CHECKPOINT_VERSION)
    model = MetaExpert.from_config_dict(meta["model"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
    model.load_state_dict(params)
    opt = OptimizerState(**meta["optimizer"], velocity={k: v.copy() for k, v in velocity.items()})
    state = RunState(**meta["run_state"])
    cfg = TrainConfig(**meta["train"])
    part = IntervalPartition(**meta["partition"])
    return Checkpoint(model, opt, state, cfg, AugmentationPolicy(**meta["augment"]), part, meta)


def train(config: TrainConfig, split: SplitPair, model: MetaExpert, **kwargs
          ) -> tuple[MetaExpert, list[dict]]:
    trainer = Trainer(model, split, config, **kwargs)
    rows = trainer.run()
    return trainer.model, rows


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def truncate_log(path: str | os.PathLike, state: RunState) -> None:
    """Drop log rows written after the checkpoint ``state`` was taken."""
    path = Path(path)
    if not path.exists():
        return
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row["type"] == "step" and row["step"] < state.global_step:
            keep.append(line)
        elif row["type"] == "epoch" and row["epoch"] < state.epoch:
            keep.append(line)
    path.write_text("".join(k + "\n" for k in keep), encoding="utf-8")


def model_for(split: SplitPair, seed: int = 0, **cfgs) -> MetaExpert:
    return MetaExpert(split.spec.feature_dim, split.spec.num_classes, seed=seed, **cfgs)


def dea_parameter_bytes(model: MetaExpert) -> bytes:
    return b"".join(p.data.tobytes() for p in model.param_groups()["dea"].values())


def parameter_names(model: MetaExpert, group: str) -> Sequence[str]:
    return list(model.param_groups()[group])
