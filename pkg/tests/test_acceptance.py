"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale trend criteria (6, 7) share one session fixture holding nine
trained runs (three unlabeled regimes, three seeds). Run with ``-s`` or look
for the ``[ACCEPTANCE]`` lines in ``pytest -v`` output.
"""

import time

import numpy as np
import pytest

from metaexpert import cli
from metaexpert.config import desk_preset
from metaexpert.data import default_partition, generate, make_test_split
from metaexpert.evaluation import (
    EXPERT_POLICIES,
    diagonal_row_maxima,
    eps_cpe,
    eps_ours,
    evaluate,
    from_eps,
)
from metaexpert.model import aggregate
from metaexpert.numerics import Tensor, no_grad, seeded_rng, softmax
from metaexpert.numerics.gradcheck import check_grads
from metaexpert.objectives import MembershipTargets, base_loss, dea_loss, make_pseudo_labels, meta_loss
from metaexpert.training import Trainer, dea_parameter_bytes, load_checkpoint, read_log, truncate_log

from test_numerics import _cases
from test_objectives import PI, tiny_batch, tiny_model

REGIMES = ("consistent", "uniform", "inverse")
SEEDS = (0, 1, 2)
RUN_BUDGET_S = 600.0


def announce(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[ACCEPTANCE] {'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")


def desk_run(regime, seed, **extra):
    cfg = desk_preset(regime, seed, **extra)
    t0 = time.perf_counter()
    split = generate(cfg.dataset)
    model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
    trainer = Trainer(model, split, cfg.train, cfg.augment, cfg.partition)
    trainer.run()
    report = evaluate(model, make_test_split(cfg.dataset, cfg.eval.test_per_class), split,
                      cfg.partition, cfg.eval.policies, oracle=True, threshold=cfg.train.threshold,
                      probe_seed=cfg.eval.probe_seed)
    report.meta.update(regime=regime, num_classes=cfg.dataset.num_classes,
                       mff_strategy=cfg.model.mff_strategy)
    return {"cfg": cfg, "trainer": trainer, "report": report,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk_grid():
    return {(r, s): desk_run(r, s) for r in REGIMES for s in SEEDS}


# --- 1 -------------------------------------------------------------------------------

def _loss_case(term, seed):
    model, batch = tiny_model(seed, detach_logits=False), tiny_batch(seed)
    part = default_partition(5)

    def fn():
        out_l = model.forward(batch.x_labeled)
        out_s = model.forward(batch.x_strong)
        with no_grad():
            out_w = model.forward(batch.x_weak)
        if term == "base":
            return base_loss(out_l.z, batch.y, [softmax(z).data for z in out_w.z], out_s.z, PI,
                             (0, 1, 2), 0.3)[0]
        agg = make_pseudo_labels(softmax(out_w.agg_logits), 0.2)
        if term == "dea":
            return dea_loss(out_l.dea_logits, MembershipTargets.build(batch.y, agg, part),
                            out_s.dea_logits, agg.mask)[0]
        return meta_loss(out_l.agg_logits, batch.y, out_s.agg_logits, agg)[0]

    groups = model.param_groups()
    params = list(groups["dea"].values())
    if term != "dea":
        params += [groups["encoder"]["encoder.0.weight"], groups["mff"]["mff.cascade.weight"],
                   groups["experts"]["expert1.weight"], groups["experts"]["expert3.bias"]]
    return fn, params


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    rng = seeded_rng(1, 2024)
    worst, cases = {}, 0
    for _ in range(100):
        for name, fn, inputs in _cases(rng):
            worst[name] = max(worst.get(name, 0.0), check_grads(fn, inputs, h=1e-5))
            cases += 1
    for term in ("base", "dea", "meta"):
        for seed in range(12):
            fn, params = _loss_case(term, seed)
            worst[term] = max(worst.get(term, 0.0), check_grads(fn, params, h=1e-5))
            cases += 1
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and cases >= 100 and elapsed < 60
    announce(capsys, 1, ok, f"{cases} cases, worst rel err {max(worst.values()):.2e} "
                            f"({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert ok, worst


# --- 2 -------------------------------------------------------------------------------

def test_criterion_2_router_algebra(capsys):
    worst_y = worst_w = 0.0
    bitwise = True
    x = seeded_rng(2, 0).normal(size=(6, 4))
    for draw in range(1000):
        model = tiny_model(draw)
        rng = seeded_rng(2, 1, draw)
        for p in model.parameters().values():
            p.data[...] = rng.normal(scale=rng.uniform(0.1, 3.0), size=p.shape)
        out = model.forward(x)
        worst_y = max(worst_y, np.abs(softmax(out.agg_logits).data.sum(1) - 1).max())
        worst_w = max(worst_w, np.abs(out.w.data.sum(1) - 1).max())
        k = draw % 3
        one_hot = Tensor(np.eye(3)[[k] * len(x)])
        bitwise &= aggregate(one_hot, *out.z).data.tobytes() == softmax(out.z[k]).data.tobytes()
    ok = worst_y <= 1e-9 and worst_w <= 1e-9 and bitwise
    announce(capsys, 2, ok, f"1000 draws, max |sum y_m - 1| {worst_y:.1e}, "
                            f"max |sum w - 1| {worst_w:.1e}, one-hot bitwise {bitwise}")
    assert ok


# --- 3 -------------------------------------------------------------------------------

def test_criterion_3_eps_algebra(capsys):
    const = from_eps(np.full((3, 3), 0.25))
    hand = from_eps(np.where(np.eye(3, dtype=bool), 0.1, 0.4))
    # independent oracle: plain arithmetic over the cells
    hand_ok = (eps_cpe(const) == eps_ours(const) == 0.25
               and eps_cpe(hand) == pytest.approx((3 * 0.1 + 6 * 0.4) / 9, abs=1e-15)
               and eps_ours(hand) == pytest.approx(0.1, abs=1e-15))
    rng = seeded_rng(3)
    held = 0
    for _ in range(1000):
        m = rng.uniform(0.0, 1.0, size=(3, 3))
        for j in range(3):   # diagonal is the smallest entry of its column
            m[j, j] = rng.uniform(0.0, np.delete(m[:, j], j).min())
        held += eps_ours(from_eps(m)) <= eps_cpe(from_eps(m))
    ok = hand_ok and held == 1000
    announce(capsys, 3, ok, f"hand matrices {'ok' if hand_ok else 'wrong'} "
                            f"(0.3 vs 0.1), column-dominant {held}/1000")
    assert ok


# --- 4 -------------------------------------------------------------------------------

def test_criterion_4_warmup_gate(capsys):
    cfg = desk_preset("consistent", 0, train={"epochs": "2", "warmup_epochs": "2"})
    split = generate(cfg.dataset)
    model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
    before = dea_parameter_bytes(model)
    Trainer(model, split, cfg.train, cfg.augment, cfg.partition).run()
    untouched = dea_parameter_bytes(model) == before

    cfg = desk_preset("consistent", 0, train={"epochs": "4", "warmup_epochs": "2"})
    model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
    steps = [r for r in Trainer(model, split, cfg.train, cfg.augment, cfg.partition).run()
             if r["type"] == "step"]
    warm = [r["dea_grad_norm"] for r in steps if r["warmup"]]
    post = [r["dea_grad_norm"] for r in steps if not r["warmup"]]
    ok = untouched and warm and all(g == 0.0 for g in warm) and any(g > 0 for g in post)
    announce(capsys, 4, ok, f"full warm-up bytes unchanged {untouched}; {len(warm)} warm-up steps "
                            f"all zero, {sum(g > 0 for g in post)}/{len(post)} later steps nonzero")
    assert ok


# --- 5 -------------------------------------------------------------------------------

def test_criterion_5_determinism(capsys, tmp_path):
    blobs = []
    for name in ("a", "b"):
        cfg = desk_preset("uniform", 1, train={"epochs": "4", "warmup_epochs": "2"})
        split = generate(cfg.dataset)
        model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
        tr = Trainer(model, split, cfg.train, cfg.augment, cfg.partition,
                     log_path=tmp_path / f"{name}.jsonl")
        tr.run()
        tr.checkpoint(tmp_path / f"{name}.bin")
        blobs.append(((tmp_path / f"{name}.jsonl").read_bytes(), (tmp_path / f"{name}.bin").read_bytes()))
    ok = blobs[0] == blobs[1]
    announce(capsys, 5, ok, f"logs identical {blobs[0][0] == blobs[1][0]}, "
                            f"checkpoints identical {blobs[0][1] == blobs[1][1]}")
    assert ok


# --- 6 -------------------------------------------------------------------------------

def _acc(run, policy):
    return run["report"].policies[policy]["overall"]


def test_criterion_6_runtime_budget(desk_grid, capsys):
    slowest = max(r["seconds"] for r in desk_grid.values())
    ok = slowest <= RUN_BUDGET_S
    announce(capsys, "6 (budget)", ok, f"slowest desk run {slowest:.1f}s of {RUN_BUDGET_S:.0f}s")
    assert ok


def test_criterion_6a_dea_beats_single_experts(desk_grid, capsys):
    ok, parts = True, []
    for regime in REGIMES:
        runs = [desk_grid[regime, s] for s in SEEDS]
        dea = np.mean([_acc(r, "dea") for r in runs])
        experts = {p: np.mean([_acc(r, p) for r in runs]) for p in EXPERT_POLICIES}
        ok &= all(dea >= v for v in experts.values())
        parts.append(f"{regime}: dea {dea:.2f} vs " + "/".join(f"{v:.2f}" for v in experts.values()))
    announce(capsys, "6a", ok, "; ".join(parts))
    assert ok


def test_criterion_6b_upper_e(desk_grid, capsys):
    exact = dominates = True
    for (regime, seed), run in desk_grid.items():
        pol = run["report"].policies
        for j, interval in enumerate(("head", "medium", "tail")):
            exact &= pol["upper_e"][interval] == pol[EXPERT_POLICIES[j]][interval]
        dominates &= all(pol["upper_e"]["overall"] >= pol[p]["overall"] for p in EXPERT_POLICIES)
    ok = exact and dominates
    announce(capsys, "6b", ok, f"per-interval equality {exact}, overall >= every expert {dominates} "
                               f"over {len(desk_grid)} runs")
    assert ok


def test_criterion_6c_eps_reduction(desk_grid, capsys):
    ok, parts = True, []
    for regime in REGIMES:
        wins = 0
        for s in SEEDS:
            rep = desk_grid[regime, s]["report"]
            wins += rep.eps_ours is not None and rep.eps_cpe is not None and rep.eps_ours <= rep.eps_cpe
        ok &= wins >= 2
        parts.append(f"{regime} {wins}/3")
    announce(capsys, "6c", ok, "eps_ours <= eps_cpe: " + ", ".join(parts))
    assert ok


def test_criterion_6d_router_profile(desk_grid, capsys):
    ok, parts = True, []
    for regime in REGIMES:
        hits = sum(diagonal_row_maxima(desk_grid[regime, s]["report"].dea_profile) for s in SEEDS)
        ok &= hits >= 2
        parts.append(f"{regime} {hits}/3")
    announce(capsys, "6d", ok, "diagonal row maxima: " + ", ".join(parts))
    assert ok


# --- 7 -------------------------------------------------------------------------------

def test_criterion_7_depth_probe(desk_grid, capsys):
    wins, parts = 0, []
    for s in SEEDS:
        probe = {p["depth"]: p for p in desk_grid["consistent", s]["report"].probe}
        deep, shallow = probe["deep"]["gap"], probe["shallow"]["gap"]
        wins += deep > shallow
        parts.append(f"seed {s}: deep {deep:.2f} vs shallow {shallow:.2f}")
    ok = wins >= 2
    announce(capsys, 7, ok, f"{wins}/3 seeds; " + "; ".join(parts))
    assert ok


# --- 8 -------------------------------------------------------------------------------

def test_criterion_8_mff_ablation(desk_grid, capsys):
    runs = {"add": desk_grid["consistent", 0],
            "concat": desk_run("consistent", 0, model={"mff_strategy": "concat"})}
    finite = all(np.isfinite(r["l_overall"]) for run in runs.values()
                 for r in run["trainer"].rows if r["type"] == "step")
    x = generate(runs["add"]["cfg"].dataset).unlabeled_x[:5]
    shapes = {k: run["trainer"].model.forward(x).v.shape for k, run in runs.items()}
    summary = cli.compare_runs([{"report": run["report"].to_dict()} for run in runs.values()])
    text = cli.format_summary(summary)
    emitted = {"consistent/add", "consistent/concat"} <= set(summary) and all(
        f"{summary[k]['dea'][0]:.2f}" in text for k in summary)
    ok = finite and shapes["add"] == shapes["concat"] and emitted
    announce(capsys, 8, ok, f"finite {finite}, fused shapes {shapes}, "
                            f"add {summary['consistent/add']['dea'][0]:.2f} "
                            f"concat {summary['consistent/concat']['dea'][0]:.2f}")
    assert ok


# --- 9 -------------------------------------------------------------------------------

def test_criterion_9_checkpoint_resume(capsys, tmp_path):
    cfg = desk_preset("inverse", 2, train={"epochs": "4", "warmup_epochs": "2"})
    split = generate(cfg.dataset)

    def fresh(log):
        model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
        return Trainer(model, split, cfg.train, cfg.augment, cfg.partition, log_path=log)

    full = fresh(tmp_path / "full.jsonl")
    full.run()
    full.checkpoint(tmp_path / "full.bin")

    stop = full.steps_per_epoch * 2 + 1   # just past the end of warm-up
    part = fresh(tmp_path / "part.jsonl")
    part.run(max_steps=stop)
    part.checkpoint(tmp_path / "mid.bin")
    ck = load_checkpoint(tmp_path / "mid.bin")
    x = split.unlabeled_x[:9]
    round_trip = (ck.model.forward(x).agg_logits.data.tobytes()
                  == part.model.forward(x).agg_logits.data.tobytes() and ck.state == part.state)

    resumed = Trainer.resume(tmp_path / "mid.bin", split, log_path=tmp_path / "part.jsonl")
    truncate_log(tmp_path / "part.jsonl", resumed.state)
    resumed.run()
    resumed.checkpoint(tmp_path / "resumed.bin")
    same_log = read_log(tmp_path / "part.jsonl") == read_log(tmp_path / "full.jsonl") and \
        (tmp_path / "part.jsonl").read_bytes() == (tmp_path / "full.jsonl").read_bytes()
    same_ckpt = (tmp_path / "resumed.bin").read_bytes() == (tmp_path / "full.bin").read_bytes()
    ok = round_trip and same_log and same_ckpt
    announce(capsys, 9, ok, f"round trip {round_trip}, resumed at step {stop}: "
                            f"log bitwise {same_log}, checkpoint bitwise {same_ckpt}")
    assert ok
