"""Command-line entry points: synth, run, ablate, report.

Paths inside config files resolve against SEMCL_DATA_DIR when set, otherwise
against the config file's own directory. All commands are deterministic given
their flags and seeds; validation failures exit with status 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .embeddings import load_table, save_table
from .encoder import EncoderSpec
from .errors import ConfigError, SemclError
from .evaluator import RunReport
from .losses import LossWeights
from .protocol import (
    FeatureDataset,
    build_fewshot_stream,
    build_stream,
    build_stream_from_groups,
)
from .trainer import MODES, TrainConfig, run_stream
from .util import sha256_file

_MODE_CHAIN = ("ft", "sg-rl", "sg-rl+naive-kd", "full")


def _resolve(path: str, config_dir: Path) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get("SEMCL_DATA_DIR")
    if root:
        return Path(root) / p
    return config_dir / p


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _train_config(raw: dict, mode: str, seed: int) -> TrainConfig:
    known = {
        "lr", "momentum", "weight_decay", "batch_size", "epochs",
        "epochs_override", "alpha", "beta", "tau", "exemplars_per_class",
        "lambda1", "lambda2", "mu",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train fields: {sorted(unknown)}")
    weights = LossWeights(
        lambda1=raw.get("lambda1", 0.5),
        lambda2=raw.get("lambda2", 0.1),
        mu=raw.get("mu", 1.0),
    )
    kwargs = {k: raw[k] for k in raw if k not in ("lambda1", "lambda2", "mu")}
    if "epochs_override" in kwargs:
        kwargs["epochs_override"] = tuple(
            (str(k), int(v)) for k, v in dict(kwargs["epochs_override"]).items()
        )
    return TrainConfig(mode=mode, seed=seed, weights=weights, **kwargs)


def _encoder_spec(raw: dict | None, seed: int) -> EncoderSpec | None:
    if raw is None:
        return None
    known = {"kind", "input_dim", "feature_dim", "hidden", "trainable_tail", "init", "init_seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown encoder fields: {sorted(unknown)}")
    raw = dict(raw)
    if "hidden" in raw:
        raw["hidden"] = tuple(raw["hidden"])
    raw.setdefault("init_seed", seed)
    return EncoderSpec(**raw)


def _build_stream_from_config(split, dataset: FeatureDataset, seed: int, config_dir: Path):
    classes = list(dataset.classes)
    if isinstance(split, str) and split.endswith(".json"):
        groups = _load_json(_resolve(split, config_dir))
        stream = build_stream_from_groups(groups, all_labels=classes)
    elif isinstance(split, str):
        stream = build_stream(len(classes), split, seed, labels=classes)
    elif isinstance(split, list):
        stream = build_stream_from_groups(split, all_labels=classes)
    elif isinstance(split, dict) and "fewshot" in split:
        fs = split["fewshot"]
        stream = build_fewshot_stream(
            int(fs["base"]), int(fs["sessions"]), int(fs["ways"]), int(fs["shots"]),
            num_classes=len(classes), labels=classes, seed=seed,
        )
    else:
        raise ConfigError(f"unsupported split specification: {split!r}")
    return dataclasses.replace(stream, dataset_name=dataset.name)


def _load_experiment(config: dict, config_dir: Path, seed_override: int | None):
    for key in ("dataset", "embeddings", "split", "mode"):
        if key not in config:
            raise ConfigError(f"run config missing {key!r} field")
    if config["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {config['mode']!r}")
    seed = int(seed_override if seed_override is not None else config.get("seed", 1993))
    dataset = FeatureDataset.from_manifest(_resolve(config["dataset"], config_dir))
    table = load_table(_resolve(config["embeddings"], config_dir))
    stream = _build_stream_from_config(config["split"], dataset, seed, config_dir)
    cfg = _train_config(dict(config.get("train", {})), config["mode"], seed)
    spec = _encoder_spec(config.get("encoder"), seed)
    return dataset, table, stream, cfg, spec


def _print_table(headers: list[str], rows: list[list]) -> str:
    def fmt(v):
        return f"{v:.1f}" if isinstance(v, float) else str(v)

    cells = [[fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    lines = [
        "| " + " | ".join(h.ljust(w) for h, w in zip(headers, widths)) + " |",
        "|" + "|".join("-" * (w + 2) for w in widths) + "|",
    ]
    for row in cells:
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .protocol import synth_benchmark

    out_dir = Path(args.out)
    dataset, table = synth_benchmark(
        num_classes=args.classes,
        dim=args.dim,
        samples_per_class=args.samples_per_class,
        intra_spread=args.spread,
        semantic_clusters=args.clusters,
        seed=args.seed,
        test_per_class=args.test_per_class,
        modality_gap_deg=args.gap,
        cluster_angle_deg=args.cluster_angle,
    )
    dataset_manifest = dataset.save(out_dir, name=args.name)
    table_manifest = save_table(table, None, out_dir, name=f"{args.name}_embeddings")
    print(f"seed: {args.seed}")
    for path in (dataset_manifest, out_dir / f"{args.name}.bin",
                 table_manifest, out_dir / f"{args.name}_embeddings.bin"):
        print(f"sha256 {sha256_file(path)}  {path}")
    return 0


# ---------------------------------------------------------------------------
# run


def _execute_run(config: dict, config_dir: Path, out_root: Path, name: str,
                 seed_override: int | None) -> RunReport:
    dataset, table, stream, cfg, spec = _load_experiment(config, config_dir, seed_override)
    run_dir = out_root / name
    run_dir.mkdir(parents=True, exist_ok=True)
    report = run_stream(stream, cfg, dataset, table, spec, checkpoint_dir=run_dir)
    report.created_at = datetime.now(timezone.utc).isoformat()
    report.save_json(run_dir / "report.json")
    report.save_csv(run_dir / "accuracy.csv")
    return report


def cmd_run(args) -> int:
    config_path = Path(args.config)
    config = _load_json(config_path)
    name = config.get("name", config_path.stem)
    out_root = Path(args.out or config.get("out_dir", "runs"))

    if args.dry_run:
        dataset, table, stream, cfg, spec = _load_experiment(
            config, config_path.parent, args.seed
        )
        resolved = {
            "name": name,
            "dataset": dataset.name,
            "classes": len(dataset.classes),
            "embeddings_dim": table.dim,
            "stream": stream.describe(),
            "train": cfg.to_dict(),
            "encoder": None if spec is None else vars(spec) | {"hidden": list(spec.hidden)},
        }
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return 0

    report = _execute_run(config, config_path.parent, out_root, name, args.seed)
    run_dir = out_root / name
    rows = [
        [t["task_id"], t["seen_classes"], float(t["top1"]), float(t["top5"])]
        for t in report.per_task
    ]
    print(f"run: {name} (seed {report.seed})")
    print(_print_table(["task", "seen", "top1", "top5"], rows))
    print(f"Avg {report.avg:.1f}  Last {report.last:.1f}")
    print(f"report: {run_dir / 'report.json'}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.2))
        xs = [t["task_id"] for t in report.per_task]
        ax.plot(xs, [t["top1"] for t in report.per_task], marker="o", label="top-1")
        ax.plot(xs, [t["top5"] for t in report.per_task], marker="s", label="top-5")
        ax.set_xlabel("task")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(name)
        ax.legend()
        fig.tight_layout()
        fig.savefig(run_dir / "accuracy_curve.png", dpi=120)
        print(f"plot: {run_dir / 'accuracy_curve.png'}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def _plan_entries(plan: dict) -> list[dict]:
    """Expand a plan into run entries: explicit "runs", or modes x seeds."""
    if "runs" in plan:
        entries = [dict(e) for e in plan["runs"]]
        for e in entries:
            if "mode" not in e:
                raise ConfigError("every ablation run entry needs a 'mode'")
            e.setdefault("seed", int(plan.get("seed", 1993)))
            e.setdefault("name", f"{e['mode']}_seed{e['seed']}")
        return entries
    modes = list(plan.get("modes", []))
    if len(modes) < 2:
        raise ConfigError("ablation plan needs at least 2 modes to compare")
    if len(set(modes)) != len(modes):
        raise ConfigError("ablation plan repeats a mode")
    seeds = [int(s) for s in plan.get("seeds", [plan.get("seed", 1993)])]
    return [
        {"mode": mode, "seed": seed, "name": f"{mode}_seed{seed}"}
        for mode in modes
        for seed in seeds
    ]


def cmd_ablate(args) -> int:
    plan_path = Path(args.plan)
    plan = _load_json(plan_path)
    for key in ("dataset", "embeddings", "split"):
        if key not in plan:
            raise ConfigError(f"ablation plan missing {key!r} field")
    entries = _plan_entries(plan)
    if len(entries) < 2:
        raise ConfigError("ablation plan needs at least 2 runs to compare")
    bad = sorted({e["mode"] for e in entries} - set(MODES))
    if bad:
        raise ConfigError(f"unknown modes in plan: {bad}")
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError("ablation run names must be unique")
    streams = {
        json.dumps([e.get("dataset", plan["dataset"]), e.get("split", plan["split"])],
                   sort_keys=True)
        for e in entries
    }
    if len(streams) > 1:
        raise ConfigError("ablation entries disagree on dataset/split (must share one stream)")
    for key in ("dataset", "embeddings"):
        path = _resolve(plan[key], plan_path.parent)
        if not path.exists():
            raise ConfigError(f"plan references missing fixture {path}")

    out_root = Path(args.out or plan.get("out_dir", "runs/ablate"))
    last: dict[str, float] = {}
    for entry in entries:
        train = dict(plan.get("train", {}))
        train.update(entry.get("train", {}))
        config = {
            "dataset": plan["dataset"],
            "embeddings": plan["embeddings"],
            "split": plan["split"],
            "mode": entry["mode"],
            "seed": entry["seed"],
            "train": train,
            "encoder": plan.get("encoder"),
        }
        report = _execute_run(config, plan_path.parent, out_root, entry["name"], None)
        last[entry["name"]] = report.last

    by_mode: dict[str, list[tuple[int, float]]] = {}
    for entry in entries:
        by_mode.setdefault(entry["mode"], []).append((entry["seed"], last[entry["name"]]))
    multi_seed = any(len(v) > 1 for v in by_mode.values())
    headers = ["mode", "last_mean"] + (["last_min", "last_max"] if multi_seed else [])
    rows = []
    for mode, vals in by_mode.items():
        accs = [v for _, v in vals]
        row = [mode, float(np.mean(accs))]
        if multi_seed:
            row += [float(np.min(accs)), float(np.max(accs))]
        rows.append(row)
    table = _print_table(headers, rows)
    print(table)

    # Ordering verdict over the seeds every chained mode shares.
    chain = [m for m in _MODE_CHAIN if m in by_mode]
    verdict = ""
    if len(chain) >= 2:
        per_mode = {m: dict(by_mode[m]) for m in chain}
        shared = sorted(set.intersection(*(set(d) for d in per_mode.values())))
        if shared:
            holds = sum(
                all(per_mode[chain[i]][s] <= per_mode[chain[i + 1]][s]
                    for i in range(len(chain) - 1))
                for s in shared
            )
            verdict = f"ordering {' <= '.join(chain)} holds in {holds}/{len(shared)} seeds"
            print(verdict)

    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "ablation.csv", "w") as f:
        f.write("name,mode,seed,last\n")
        for entry in entries:
            f.write(f"{entry['name']},{entry['mode']},{entry['seed']},{last[entry['name']]!r}\n")
    (out_root / "ablation.md").write_text(table + ("\n" + verdict if verdict else "") + "\n")
    print(f"ablation table: {out_root / 'ablation.md'}")
    return 0


# ---------------------------------------------------------------------------
# report


_TASK_DIR = re.compile(r"^task\d+$")


def cmd_report(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        candidates = [
            p for p in sorted(path.rglob("report.json"))
            if not _TASK_DIR.match(p.parent.name)  # skip per-task checkpoint partials
        ]
        if not candidates:
            raise ConfigError(f"no report.json under {path}")
    else:
        candidates = [path]
    for rp in candidates:
        report = RunReport.from_json(rp)
        name = rp.parent.name
        rows = [
            [t["task_id"], t["seen_classes"], float(t["top1"]), float(t["top5"])]
            for t in report.per_task
        ]
        print(f"{name} (mode {report.config.get('mode')}, seed {report.seed})")
        print(_print_table(["task", "seen", "top1", "top5"], rows))
        print(f"Avg {report.avg:.1f}  Last {report.last:.1f}")
        if args.csv:
            out = rp.parent / "accuracy.csv"
            report.save_csv(out)
            print(f"csv: {out}")
        print()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcl",
        description="Continual-learning experiments guided by frozen label embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic clustered benchmark")
    p_synth.add_argument("--classes", type=int, default=20)
    p_synth.add_argument("--dim", type=int, default=64)
    p_synth.add_argument("--samples-per-class", type=int, default=50)
    p_synth.add_argument("--test-per-class", type=int, default=200)
    p_synth.add_argument("--spread", type=float, default=0.15,
                         help="Gaussian noise scale around each class prototype")
    p_synth.add_argument("--clusters", type=int, default=4)
    p_synth.add_argument("--gap", type=float, default=45.0,
                         help="modality gap: prototype-vs-embedding angle in degrees")
    p_synth.add_argument("--cluster-angle", type=float, default=25.0,
                         help="class-to-cluster-center angle in degrees (< 35.26)")
    p_synth.add_argument("--seed", type=int, default=1993)
    p_synth.add_argument("--name", default="synth")
    p_synth.add_argument("--out", default="fixtures")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output root (default: config out_dir or ./runs)")
    p_run.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p_run.add_argument("--plot", action="store_true", help="write accuracy_curve.png")
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="compare training modes on one stream")
    p_ablate.add_argument("plan")
    p_ablate.add_argument("--out", default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="print tables from saved report.json files")
    p_report.add_argument("report", help="report.json or a directory of runs")
    p_report.add_argument("--csv", action="store_true", help="(re)write accuracy.csv next to each report")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SemclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
