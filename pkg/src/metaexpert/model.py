"""Encoder with three depth taps, multi-depth fusion, three experts and a router.

Data flow for a batch ``x``::

    x -> encoder layers (affine + ReLU) -> taps v1, v2, v3
    (v1, v2, v3) -> fusion -> v
    v -> expert heads -> z1, z2, z3
    [v, z1, z2, z3] -> router MLP -> softmax -> w
    softmax(w1 z1 + w2 z2 + w3 z3) -> y_m
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    gather,
    matmul,
    relu,
    row_scale,
    seeded_rng,
    softmax,
)

NUM_EXPERTS = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layer_widths: tuple[int, ...] = (64, 64, 64)
    tap_indices: tuple[int, int, int] = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "tap_indices", tuple(int(t) for t in self.tap_indices))
        if not self.layer_widths or min(self.layer_widths) < 1:
            raise ConfigError(f"layer_widths must be positive, got {list(self.layer_widths)}")
        taps = self.tap_indices
        if len(taps) != 3:
            raise ConfigError(f"tap_indices needs exactly three entries, got {list(taps)}")
        if not (0 <= taps[0] < taps[1] < taps[2] < len(self.layer_widths)):
            raise ConfigError(f"tap_indices must be strictly increasing within "
                              f"0..{len(self.layer_widths) - 1}, got {list(taps)}")
        if taps[2] != len(self.layer_widths) - 1:
            # layers past the deep tap would sit off every loss path
            raise ConfigError(f"deep tap must be the last layer ({len(self.layer_widths) - 1}), "
                              f"got {taps[2]}")

    def tap_widths(self) -> tuple[int, int, int]:
        return tuple(self.layer_widths[t] for t in self.tap_indices)


@dataclass(frozen=True)
class MFFConfig:
    strategy: str = "add"
    fused_dim: int | None = None  # None: width of the deep tap

    def __post_init__(self):
        if self.strategy not in ("add", "concat"):
            raise ConfigError(f"mff strategy must be 'add' or 'concat', got {self.strategy!r}")
        if self.fused_dim is not None and self.fused_dim < 1:
            raise ConfigError(f"fused_dim must be positive, got {self.fused_dim}")


@dataclass(frozen=True)
class DEAConfig:
    hidden_widths: tuple[int, ...] = (64,)
    detach_logits: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"DEA hidden widths must be positive, got {list(self.hidden_widths)}")


@dataclass
class FeatureTaps:
    v1: Tensor
    v2: Tensor
    v3: Tensor

    def __iter__(self) -> Iterator[Tensor]:
        return iter((self.v1, self.v2, self.v3))


@dataclass
class ForwardOutput:
    taps: FeatureTaps
    v: Tensor
    z: list[Tensor]
    dea_logits: Tensor | None = None
    w: Tensor | None = None
    agg_logits: Tensor | None = None

    @property
    def y_m(self) -> Tensor:
        return softmax(self.agg_logits)


class Linear:
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ConfigError(f"linear layer expects width {self.weight.shape[0]}, "
                              f"got input of shape {list(x.shape)}")
        return add(matmul(x, self.weight), self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def aggregate_logits(w: Tensor, zs: Sequence[Tensor]) -> Tensor:
    """``sum_k w[:, k] * z_k`` accumulated left to right."""
    rows = w.shape[0]
    acc = None
    for k, z in enumerate(zs):
        term = row_scale(z, gather(w, np.full(rows, k, dtype=np.int64)))
        acc = term if acc is None else add(acc, term)
    return acc


def aggregate(w: Tensor, z1: Tensor, z2: Tensor, z3: Tensor) -> Tensor:
    """Aggregator prediction ``y_m = softmax(sum_k w_k z_k)``."""
    return softmax(aggregate_logits(w, (z1, z2, z3)))


class MetaExpert:
    def __init__(self, input_dim: int, num_classes: int,
                 encoder: EncoderConfig = EncoderConfig(),
                 mff: MFFConfig = MFFConfig(),
                 dea: DEAConfig = DEAConfig(),
                 seed: int = 0):
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.encoder_cfg, self.mff_cfg, self.dea_cfg = encoder, mff, dea
        self.seed = int(seed)
        rng = seeded_rng(self.seed, 7)

        widths = (self.input_dim,) + encoder.layer_widths
        self.layers = [Linear(widths[i], widths[i + 1], rng) for i in range(len(encoder.layer_widths))]

        t1, t2, t3 = encoder.tap_widths()
        self.fused_dim = mff.fused_dim if mff.fused_dim is not None else t3
        F = self.fused_dim
        if mff.strategy == "add":
            self.align = {
                "shallow": Linear(t1, F, rng),
                "middle": Linear(t2, F, rng),
                "cascade": Linear(F, F, rng),
                "deep": Linear(t3, F, rng),
            }
        else:
            self.align = {"proj": Linear(t1 + t2 + t3, F, rng)}

        self.heads = [Linear(F, self.num_classes, rng) for _ in range(NUM_EXPERTS)]

        dims = (F + NUM_EXPERTS * self.num_classes,) + dea.hidden_widths + (NUM_EXPERTS,)
        self.router = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    # -- parameters ---------------------------------------------------------

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        groups = {"encoder": {}, "mff": {}, "experts": {}, "dea": {}}
        for i, layer in enumerate(self.layers):
            groups["encoder"].update(layer.params(f"encoder.{i}"))
        for name, layer in self.align.items():
            groups["mff"].update(layer.params(f"mff.{name}"))
        for k, head in enumerate(self.heads):
            groups["experts"].update(head.params(f"expert{k + 1}"))
        for i, layer in enumerate(self.router):
            groups["dea"].update(layer.params(f"dea.{i}"))
        return groups

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in self.param_groups().values():
            out.update(group)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"{name}: expected shape {list(p.data.shape)}, got {list(arr.shape)}")
            p.data = arr.copy()
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def config_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layer_widths": list(self.encoder_cfg.layer_widths),
            "tap_indices": list(self.encoder_cfg.tap_indices),
            "mff_strategy": self.mff_cfg.strategy,
            "fused_dim": self.mff_cfg.fused_dim,
            "dea_hidden": list(self.dea_cfg.hidden_widths),
            "detach_dea_logits": self.dea_cfg.detach_logits,
            "init_seed": self.seed,
        }

    @classmethod
    def from_config_dict(cls, cfg: dict) -> "MetaExpert":
        return cls(cfg["input_dim"], cfg["num_classes"],
                   EncoderConfig(tuple(cfg["layer_widths"]), tuple(cfg["tap_indices"])),
                   MFFConfig(cfg["mff_strategy"], cfg["fused_dim"]),
                   DEAConfig(tuple(cfg["dea_hidden"]), cfg["detach_dea_logits"]),
                   seed=cfg["init_seed"])

    # -- forward pieces -----------------------------------------------------

    def encode(self, x) -> FeatureTaps:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigError(f"encoder expects feature width {self.input_dim}, "
                              f"got batch of shape {list(x.shape)}")
        h, taps = x, []
        for i, layer in enumerate(self.layers):
            h = relu(layer(h))
            if i in self.encoder_cfg.tap_indices:
                taps.append(h)
        return FeatureTaps(*taps)

    def mff(self, taps: FeatureTaps) -> Tensor:
        if self.mff_cfg.strategy == "add":
            a = self.align
            u = add(a["shallow"](taps.v1), a["middle"](taps.v2))
            return add(a["cascade"](u), a["deep"](taps.v3))
        return self.align["proj"](concat([taps.v1, taps.v2, taps.v3]))

    def expert_logits(self, v: Tensor) -> list[Tensor]:
        if v.ndim != 2 or v.shape[1] != self.fused_dim:
            raise ConfigError(f"expert heads expect width {self.fused_dim}, got {list(v.shape)}")
        return [head(v) for head in self.heads]

    def dea_logits(self, v: Tensor, zs: Sequence[Tensor]) -> Tensor:
        if self.dea_cfg.detach_logits:
            zs = [z.detach() for z in zs]
        h = concat([v, *zs])
        for layer in self.router[:-1]:
            h = relu(layer(h))
        return self.router[-1](h)

    def dea_weights(self, v: Tensor, z1: Tensor, z2: Tensor, z3: Tensor) -> Tensor:
        return softmax(self.dea_logits(v, (z1, z2, z3)))

    def forward(self, x, route: bool = True) -> ForwardOutput:
        taps = self.encode(x)
        v = self.mff(taps)
        zs = self.expert_logits(v)
        out = ForwardOutput(taps, v, zs)
        if route:
            out.dea_logits = self.dea_logits(v, zs)
            out.w = softmax(out.dea_logits)
            out.agg_logits = aggregate_logits(out.w, zs)
        return out

    __call__ = forward
