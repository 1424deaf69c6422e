"""Command line: ``metaexpert {gen-data,train,eval,compare}``.

Every command reads an INI experiment config (see :mod:`metaexpert.config`)
and writes under the run's ``output_dir``::

    dataset.bin               generated splits
    metrics.jsonl             per-step and per-epoch training log
    checkpoints/last.bin      latest resumable state
    checkpoints/epoch-NNNN.bin  periodic checkpoints (train.checkpoint_every)
    final.bin                 state after the last epoch
    reports/report.{json,txt}, reports/f1.csv, reports/profile.csv
    manifest.json             config hash, seeds, artifact paths, version

Exit codes: 0 success, 1 invalid input, 2 non-finite loss, 3 file errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigFileError, ExperimentConfig, desk_preset, dumps, loads
from .container import ContainerError
from .data import (
    SpecError,
    dataset_header,
    generate,
    make_test_split,
    read_dataset,
    read_dataset_header,
    write_dataset,
)
from .evaluation import POLICIES, evaluate
from .model import ConfigError
from .training import NonFiniteLossError, Trainer, TrainConfig, load_checkpoint, truncate_log

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# CLI flag -> TrainConfig field, one per field
TRAIN_FLAGS = [f.name for f in dataclasses.fields(TrainConfig)]


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = cfg.output_dir
    return {"dataset": out / "dataset.bin", "metrics": out / "metrics.jsonl",
            "last_checkpoint": out / "checkpoints" / "last.bin", "final": out / "final.bin",
            "report_json": out / "reports" / "report.json", "report_txt": out / "reports" / "report.txt",
            "f1_csv": out / "reports" / "f1.csv", "profile_csv": out / "reports" / "profile.csv",
            "config": out / "config.ini", "manifest": out / "manifest.json"}


def update_manifest(cfg: ExperimentConfig, command: str) -> dict:
    paths = _paths(cfg)
    manifest_path = paths["manifest"]
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    artifacts = {k: str(p) for k, p in paths.items() if k != "manifest" and p.exists()}
    ckpt_dir = cfg.output_dir / "checkpoints"
    if ckpt_dir.exists():
        for p in sorted(ckpt_dir.glob("epoch-*.bin")):
            artifacts[f"checkpoint_{p.stem}"] = str(p)
    manifest.update({
        "version": __version__,
        "config_hash": cfg.digest(),
        "seeds": {"dataset": cfg.dataset.seed, "init": cfg.model.init_seed, "train": cfg.train.seed,
                  "probe": cfg.eval.probe_seed},
        "artifacts": artifacts,
        "num_classes": cfg.dataset.num_classes,
        "unlabeled_regime": cfg.dataset.unlabeled_regime,
    })
    manifest.setdefault("commands", {})[command] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def _write_config(cfg: ExperimentConfig) -> None:
    path = _paths(cfg)["config"]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_ini(), encoding="utf-8")


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> str:
    path = _paths(cfg)["dataset"]
    split = generate(cfg.dataset)
    if path.exists() and not force:
        existing = read_dataset_header(path)
        if existing == dataset_header(split):
            return f"{path} is up to date (use --force to rewrite)"
        raise CommandError(f"{path} holds a different dataset; rerun with --force to replace it",
                           EXIT_INVALID)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, split)
    _write_config(cfg)
    update_manifest(cfg, "gen-data")
    counts = np.bincount(split.unlabeled_truth, minlength=cfg.dataset.num_classes)
    return (f"wrote {path}: {len(split.labeled_y)} labeled, {len(split.unlabeled_x)} unlabeled "
            f"(unlabeled counts {counts.tolist()})")


def cmd_train(cfg: ExperimentConfig, resume: bool = False, stop_after_steps: int | None = None,
              inject_nonfinite_at: int | None = None) -> str:
    paths = _paths(cfg)
    if not paths["dataset"].exists():
        raise CommandError(f"dataset {paths['dataset']} not found; run gen-data first", EXIT_IO)
    split = read_dataset(paths["dataset"])
    if split.spec != cfg.dataset:
        raise CommandError(f"{paths['dataset']} was generated from a different [dataset] config",
                           EXIT_INVALID)
    ckpt_dir = cfg.output_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if not paths["last_checkpoint"].exists():
            raise CommandError(f"no checkpoint to resume at {paths['last_checkpoint']}", EXIT_IO)
        trainer = Trainer.resume(paths["last_checkpoint"], split, log_path=paths["metrics"])
        truncate_log(paths["metrics"], trainer.state)
    else:
        model = cfg.model.build(cfg.dataset.feature_dim, cfg.dataset.num_classes)
        paths["metrics"].unlink(missing_ok=True)
        paths["metrics"].touch()
        trainer = Trainer(model, split, cfg.train, cfg.augment, cfg.partition,
                          log_path=paths["metrics"])
    trainer.fault_step = inject_nonfinite_at
    every = trainer.config.checkpoint_every

    def on_epoch_end(tr: Trainer) -> None:
        if every and tr.state.epoch % every == 0:
            tr.checkpoint(ckpt_dir / f"epoch-{tr.state.epoch:04d}.bin")

    _write_config(cfg)
    try:
        trainer.run(max_steps=stop_after_steps, on_epoch_end=on_epoch_end)
    except NonFiniteLossError as exc:
        update_manifest(cfg, "train")
        raise CommandError(f"training aborted: {exc}", EXIT_NUMERIC) from None
    trainer.checkpoint(paths["last_checkpoint"])
    if trainer.done:
        trainer.checkpoint(paths["final"])
    update_manifest(cfg, "train")
    state = trainer.state
    status = "finished" if trainer.done else "stopped"
    return f"{status} at epoch {state.epoch}, step {state.global_step}; log {paths['metrics']}"


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None = None) -> str:
    paths = _paths(cfg)
    if "upper_e" in cfg.eval.policies and not cfg.eval.oracle:
        raise CommandError("policy upper_e needs the oracle flag (--oracle or [eval] oracle = true)",
                           EXIT_INVALID)
    ckpt_path = checkpoint or paths["final"]
    if not Path(ckpt_path).exists():
        raise CommandError(f"checkpoint {ckpt_path} not found", EXIT_IO)
    if not paths["dataset"].exists():
        raise CommandError(f"dataset {paths['dataset']} not found", EXIT_IO)
    ckpt = load_checkpoint(ckpt_path)
    split = read_dataset(paths["dataset"])
    test = make_test_split(split.spec, cfg.eval.test_per_class)
    report = evaluate(ckpt.model, test, split, cfg.partition, cfg.eval.policies,
                      oracle=cfg.eval.oracle, probe=cfg.eval.probe,
                      threshold=ckpt.train_config.threshold,
                      cpe_mean_softmax=cfg.eval.cpe_mean_softmax, probe_seed=cfg.eval.probe_seed)
    report.meta.update({"checkpoint": str(ckpt_path), "epoch": ckpt.state.epoch,
                        "regime": split.spec.unlabeled_regime, "num_classes": split.spec.num_classes,
                        "mff_strategy": ckpt.model.mff_cfg.strategy})
    paths["report_json"].parent.mkdir(parents=True, exist_ok=True)
    paths["report_json"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["report_txt"].write_text(report.text(), encoding="utf-8")
    paths["f1_csv"].write_text(report.f1_csv(), encoding="utf-8")
    paths["profile_csv"].write_text(report.profile_csv(), encoding="utf-8")
    update_manifest(cfg, "eval")
    return report.text()


# -- compare ---------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())   # population std (ddof=0)


def load_run(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json" if run_dir.is_dir() else run_dir
    if not manifest_path.exists():
        raise CommandError(f"no manifest at {manifest_path}", EXIT_IO)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    report_path = manifest.get("artifacts", {}).get("report_json")
    if report_path is None or not Path(report_path).exists():
        raise CommandError(f"run {manifest_path.parent} has no evaluation report", EXIT_IO)
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    return {"manifest": manifest, "report": report, "path": str(manifest_path.parent)}


def compare_runs(runs: Sequence[dict]) -> dict:
    if not runs:
        raise CommandError("compare needs at least one run", EXIT_INVALID)
    classes = {r["report"]["meta"]["num_classes"] for r in runs}
    if len(classes) > 1:
        raise CommandError(f"runs disagree on the number of classes: {sorted(classes)}", EXIT_INVALID)
    groups: dict[str, list[dict]] = {}
    for r in runs:
        key = r["report"]["meta"]["regime"] + "/" + r["report"]["meta"].get("mff_strategy", "add")
        groups.setdefault(key, []).append(r)
    summary = {}
    for key, members in sorted(groups.items()):
        policies = sorted(set.intersection(*(set(m["report"]["policies"]) for m in members)),
                          key=POLICIES.index)
        row = {"runs": len(members)}
        for p in policies:
            row[p] = _mean_std([m["report"]["policies"][p]["overall"] for m in members])
        for k in ("eps_cpe", "eps_ours"):
            vals = [m["report"][k] for m in members if m["report"][k] is not None]
            row[k] = _mean_std(vals) if vals else None
        row["utilization"] = _mean_std([m["report"]["utilization"]["aggregator"] for m in members])
        summary[key] = row
    return summary


def format_summary(summary: dict) -> str:
    cols = []
    for row in summary.values():
        for k in row:
            if k != "runs" and k not in cols:
                cols.append(k)
    header = ["Setting", "Runs"] + cols
    lines = [header]
    for key, row in summary.items():
        cells = [key, str(row["runs"])]
        for c in cols:
            v = row.get(c)
            if v is None:
                cells.append("n/a")
            elif c in ("eps_cpe", "eps_ours", "utilization"):
                cells.append(f"{v[0]:.3f} ± {v[1]:.3f}")
            else:
                cells.append(f"{v[0]:.2f} ± {v[1]:.2f}")
        lines.append(cells)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(l, widths))) for l in lines) + "\n"


def cmd_compare(run_dirs: Sequence[Path], out: Path | None = None) -> str:
    summary = compare_runs([load_run(Path(d)) for d in run_dirs])
    text = format_summary(summary)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        out.with_suffix(".json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                                            encoding="utf-8")
    return text


# -- argument parsing -------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metaexpert",
                                     description="Long-tailed semi-supervised experts on synthetic blobs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
        p.add_argument("--desk", metavar="REGIME", help="start from the desk preset for REGIME")
        p.add_argument("--output-dir", help="override [run] output_dir")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate the labeled/unlabeled splits")
    common(p)
    p.add_argument("--regime", help="override [dataset] unlabeled_regime")
    p.add_argument("--dataset-seed", type=int, help="override [dataset] seed")
    p.add_argument("--force", action="store_true", help="rewrite an existing dataset")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    for name in TRAIN_FLAGS:
        p.add_argument(_flag(name), dest=f"train_{name}", metavar=name.upper(),
                       help=f"override [train] {name}")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.bin")
    p.add_argument("--stop-after-steps", type=int, help="stop (and checkpoint) after N steps")
    p.add_argument("--inject-nonfinite-at", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fresh balanced test split")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate (default final.bin)")
    p.add_argument("--policies", help="comma separated policy list")
    p.add_argument("--oracle", action="store_true", help="allow oracle membership (upper_e)")

    p = sub.add_parser("compare", help="summarize finished runs")
    p.add_argument("runs", nargs="+", type=Path, help="run directories or manifest files")
    p.add_argument("--out", type=Path, help="write the summary table here (and a .json twin)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, dict[str, str]] = {}

    def put(section, key, value):
        overrides.setdefault(section, {})[key] = str(value)

    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigFileError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        put(section.strip(), key.strip(), value)
    if args.output_dir:
        put("run", "output_dir", args.output_dir)
    if getattr(args, "regime", None):
        put("dataset", "unlabeled_regime", args.regime)
    if getattr(args, "dataset_seed", None) is not None:
        put("dataset", "seed", args.dataset_seed)
    for name in TRAIN_FLAGS:
        value = getattr(args, f"train_{name}", None)
        if value is not None:
            put("train", name, value)
    if getattr(args, "policies", None):
        put("eval", "policies", args.policies)
    if getattr(args, "oracle", False):
        put("eval", "oracle", "true")

    if args.config is not None and args.desk:
        raise ConfigFileError("--desk and --config are mutually exclusive")
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        base_text = args.config.read_text(encoding="utf-8")
    elif args.desk:
        base_text = dumps(desk_preset(args.desk))
    else:
        base_text = ""
    return loads(base_text, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:   # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    try:
        if args.command == "compare":
            print(cmd_compare(args.runs, args.out), end="")
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "gen-data":
            msg = cmd_gen_data(cfg, force=args.force)
        elif args.command == "train":
            msg = cmd_train(cfg, resume=args.resume, stop_after_steps=args.stop_after_steps,
                            inject_nonfinite_at=args.inject_nonfinite_at)
        else:
            msg = cmd_eval(cfg, args.checkpoint)
        print(msg if msg.endswith("\n") else msg + "\n", end="")
        return EXIT_OK
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SpecError as exc:
        print(f"error: invalid {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigFileError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
