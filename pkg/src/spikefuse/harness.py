"""Command-line surface and experiment orchestration.

Subcommands:

    synth       generate a labeled moving-bar event corpus (EVS1 files)
    train       run one training config, writing a run directory
    ablate      train a (variant x seed) grid and aggregate a report table
    sweep-kappa train a (kappa x seed) grid for one variant
    robustness  evaluate a checkpoint under corruption sweeps
    complexity  parameter / mult-add counts and timed inference for an arch
    eval        evaluate a checkpoint on a corpus

Run directories are seed-keyed (never timestamped) and refuse to overwrite
an existing run unless --force is given. Tables are pure aggregations of
the per-run records, so they can be regenerated bitwise from disk.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ParameterError, SpikefuseError
from .events import (
    BAR_DIRECTIONS,
    CorruptionSpec,
    EventStream,
    read_events,
    synth_moving_bar,
    write_events,
)
from .network import (
    SpikingNetwork,
    count_mult_adds,
    count_parameters,
    load_checkpoint,
    parse_architecture,
    save_checkpoint,
)
from .rng import Rng
from .tensor import no_grad
from .training import (
    LabeledFrames,
    TrainConfig,
    config_from_dict,
    evaluate,
    frames_from_streams,
    train,
)

ARCH_PRESETS = {
    "dvs_gesture": (
        "Input-128C5S2-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2"
        "-512FC-VotingC11P5-AP"
    ),
    "sl_animals": (
        "Input-128C5S2-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2"
        "-DP-512FC-DP-VotingC19P5-AP"
    ),
    "mnist_dvs": "Input-32C7S2-BN-AP2-64C3-BN-AP2-128C3-BN-AP2-512FC-VotingC10P5-AP",
    "synth_bar": "Input-8C3-BN-AP2-16C3-BN-AP2-64FC-VotingC4P5-AP",
}

# Default per-dataset hyperparameters (epochs, batch, lr, decay, v_th,
# kappa, reduction, T, delta_t in ms).
HYPER_PRESETS = {
    "dvs_gesture": dict(epochs=200, batch_size=16, lr=0.002, lr_decay=0.98,
                        v_th=1.15, kappa=0.7, reduction=4, timesteps=10, delta_t_ms=125.0),
    "sl_animals": dict(epochs=200, batch_size=25, lr=0.0002, lr_decay=0.97,
                       v_th=1.5, kappa=0.4, reduction=4, timesteps=30, delta_t_ms=50.0),
    "mnist_dvs": dict(epochs=100, batch_size=100, lr=0.001, lr_decay=0.95,
                      v_th=0.8, kappa=0.5, reduction=4, timesteps=20, delta_t_ms=25.0),
    "synth_bar": dict(epochs=25, batch_size=16, lr=0.004, lr_decay=0.97,
                      v_th=1.15, kappa=0.7, reduction=4, timesteps=10, delta_t_ms=100.0),
}


# ---------------------------------------------------------------------------
# corpus IO


def synth_corpus(
    out_dir: Path,
    classes: int,
    n_per_class: int,
    height: int,
    width: int,
    duration_ms: float,
    rate: float,
    seed: int,
) -> List[dict]:
    """Write a deterministic labeled corpus plus manifest; returns rows."""
    if classes > len(BAR_DIRECTIONS):
        raise ParameterError(f"at most {len(BAR_DIRECTIONS)} motion classes available")
    out_dir.mkdir(parents=True, exist_ok=True)
    master = Rng(seed)
    rows = []
    for label in range(classes):
        for i in range(n_per_class):
            stream = synth_moving_bar(
                label, height, width, duration_ms, rate, master.split("sample", label, i)
            )
            name = f"stream_c{label}_{i:04d}.evs"
            write_events(out_dir / name, stream)
            rows.append({"filename": name, "label": label, "n_events": len(stream), "seed": seed})
    with open(out_dir / "manifest.tsv", "w") as fh:
        fh.write("filename\tlabel\tn_events\tseed\n")
        for row in rows:
            fh.write(f"{row['filename']}\t{row['label']}\t{row['n_events']}\t{row['seed']}\n")
    return rows


def load_corpus(corpus_dir) -> List[EventStream]:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.tsv"
    if not manifest.exists():
        raise ConfigError(f"no manifest.tsv under {corpus_dir}")
    streams = []
    with open(manifest) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        name_col, label_col = header.index("filename"), header.index("label")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                continue
            stream = read_events(corpus_dir / parts[name_col])
            if stream.label is None:
                stream.label = int(parts[label_col])
            streams.append(stream)
    return streams


def _load_dataset(cfg: TrainConfig, which: str) -> LabeledFrames:
    directory = getattr(cfg.data, which)
    if not directory:
        raise ConfigError("missing corpus directory", field=f"data.{which}")
    streams = load_corpus(directory)
    return frames_from_streams(
        streams,
        cfg.data.delta_t_ms,
        cfg.data.timesteps,
        binarize=cfg.data.binarize,
        dtype=np.float64 if cfg.precision == "f64" else np.float32,
    )


# ---------------------------------------------------------------------------
# experiment plans


@dataclass(frozen=True)
class ExperimentCell:
    variant: str
    kappa: float
    seed: int


@dataclass
class ExperimentPlan:
    base: dict  # TrainConfig document without variant/seed
    cells: List[ExperimentCell]

    def __post_init__(self):
        if len(set(self.cells)) != len(self.cells):
            raise ConfigError("experiment plan contains duplicate cells")
        for cell in self.cells:
            self.cell_config(cell)  # validates

    def cell_config(self, cell: ExperimentCell) -> TrainConfig:
        doc = json.loads(json.dumps(self.base))  # deep copy
        doc["variant"] = cell.variant
        doc["seed"] = cell.seed
        doc.setdefault("lif", {})["kappa"] = cell.kappa
        return config_from_dict(doc)


def plan_from_dict(doc: dict) -> ExperimentPlan:
    if "base_config" not in doc:
        raise ConfigError("missing required field", field="base_config")
    base = doc["base_config"]
    base_kappa = base.get("lif", {}).get("kappa")
    if "cells" in doc:
        cells = [ExperimentCell(str(v), float(k), int(s)) for v, k, s in doc["cells"]]
    else:
        variants = doc.get("variants", ["bl", "stfa", "ctfa", "sctfa"])
        seeds = doc.get("seeds", [1, 2, 3])
        if base_kappa is None:
            raise ConfigError("missing required field", field="base_config.lif.kappa")
        cells = [
            ExperimentCell(str(v), float(base_kappa), int(s)) for v in variants for s in seeds
        ]
    return ExperimentPlan(base=base, cells=cells)


@dataclass
class ReportRow:
    group: dict
    trials: int
    mean_acc: float
    std_acc: Optional[float]
    best_acc: float
    status: str


def summaries_from_run_dirs(out_dir) -> List[dict]:
    """Rebuild per-run summary dicts from persisted run_record.json files,
    so any table can be regenerated from disk alone. A run that stopped
    short of its configured epochs counts as diverged."""
    out = []
    for record_path in sorted(Path(out_dir).glob("run_*/run_record.json")):
        doc = json.loads(record_path.read_text())
        cfg = doc["config"]
        complete = len(doc["per_epoch"]) == cfg["epochs"]
        out.append({
            "variant": cfg["variant"],
            "kappa": cfg["lif"]["kappa"],
            "seed": cfg["seed"],
            "best_acc": doc["best_acc"],
            "status": "complete" if complete else "diverged",
            "run_dir": str(record_path.parent),
        })
    return out


def aggregate_records(records: Sequence[dict], group_key) -> List[ReportRow]:
    """Group run records and reduce to mean/std/best top-1 accuracy.

    Pure function of the records, so a table can always be regenerated
    bitwise from the persisted per-run files.
    """
    groups: dict = {}
    for rec in records:
        key = tuple(sorted(group_key(rec).items()))
        groups.setdefault(key, []).append(rec)
    rows = []
    for key, recs in sorted(groups.items()):
        accs = [r["best_acc"] for r in recs if r.get("status", "complete") == "complete"]
        incomplete = len(accs) != len(recs)
        rows.append(
            ReportRow(
                group=dict(key),
                trials=len(accs),
                mean_acc=float(statistics.fmean(accs)) if accs else float("nan"),
                std_acc=float(statistics.stdev(accs)) if len(accs) >= 2 else None,
                best_acc=max(accs) if accs else float("nan"),
                status="incomplete" if incomplete or not accs else "complete",
            )
        )
    return rows


def _write_table(path: Path, rows: List[ReportRow], group_cols: List[str], extra: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(group_cols + ["trials", "mean_acc", "std_acc", "best_acc", "status"]
                        + list(extra))
        for row in rows:
            writer.writerow(
                [row.group[c] for c in group_cols]
                + [row.trials, repr(row.mean_acc),
                   "" if row.std_acc is None else repr(row.std_acc),
                   repr(row.best_acc), row.status]
                + [extra[k] for k in extra]
            )


# ---------------------------------------------------------------------------
# single run


def run_training(cfg: TrainConfig, run_dir: Path, force: bool = False) -> dict:
    """Train one config into ``run_dir``; returns the record summary dict."""
    record_path = run_dir / "run_record.json"
    if record_path.exists() and not force:
        raise ConfigError(f"{run_dir} already contains a run; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    train_set = _load_dataset(cfg, "train_dir")
    test_set = _load_dataset(cfg, "test_dir")
    status = "complete"
    try:
        record, net = train(cfg, train_set, test_set)
    except DivergenceError as exc:
        record, net = exc.record, None
        status = "diverged"
    record_path.write_text(record.to_json() + "\n")
    (run_dir / "timing.json").write_text(record.timing_json() + "\n")
    if net is not None:
        save_checkpoint(
            run_dir / "checkpoint.bin",
            net,
            extra_config={
                "delta_t_ms": cfg.data.delta_t_ms,
                "binarize": cfg.data.binarize,
                "seed": cfg.seed,
            },
        )
    return {
        "variant": cfg.variant,
        "kappa": cfg.lif.kappa,
        "seed": cfg.seed,
        "best_acc": record.best_acc,
        "status": status,
        "run_dir": str(run_dir),
    }


def run_plan(plan: ExperimentPlan, out_dir: Path, threads: int = 1, force: bool = False):
    """Run every cell (bounded worker pool) and return its summary dicts."""
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(cell: ExperimentCell) -> dict:
        cfg = plan.cell_config(cell)
        run_dir = out_dir / f"run_{cell.variant}_k{cell.kappa:g}_s{cell.seed}"
        return run_training(cfg, run_dir, force=force)

    if threads <= 1:
        return [one(c) for c in plan.cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, plan.cells))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    rows = synth_corpus(
        Path(args.out), args.classes, args.n_per_class, args.height, args.width,
        args.duration_ms, args.rate, args.seed,
    )
    print(f"wrote {len(rows)} streams to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    doc = _apply_overrides(doc, args)
    cfg = config_from_dict(doc)
    run_dir = Path(args.out) / f"run_seed{cfg.seed}_{cfg.variant}"
    summary = run_training(cfg, run_dir, force=args.force)
    print(json.dumps(summary, sort_keys=True))
    return 0 if summary["status"] == "complete" else 1


def cmd_ablate(args) -> int:
    doc = json.loads(Path(args.plan).read_text())
    plan = plan_from_dict(doc)
    out_dir = Path(args.out)
    summaries = run_plan(plan, out_dir, threads=args.threads, force=args.force)
    rows = aggregate_records(summaries, lambda r: {"variant": r["variant"]})
    master_seed = doc.get("master_seed", plan.base.get("seed", 0))
    _write_table(out_dir / "table.csv", rows, ["variant"], {"master_seed": master_seed})
    for row in rows:
        std = "" if row.std_acc is None else f" +/- {row.std_acc:.4f}"
        print(f"{row.group['variant']:>6}: mean {row.mean_acc:.4f}{std}, "
              f"best {row.best_acc:.4f} ({row.trials} trials, {row.status})")
    return 0


def cmd_sweep_kappa(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    doc = _apply_overrides(doc, args)
    kappas = [float(k) for k in args.kappas.split(",")]
    for k in kappas:
        if not 0.0 <= k <= 1.0:
            raise ConfigError(f"kappa {k} outside [0, 1]", field="kappas")
    seeds = [int(s) for s in args.seeds.split(",")]
    variant = doc.get("variant", "sctfa")
    plan = ExperimentPlan(
        base=doc,
        cells=[ExperimentCell(variant, k, s) for k in kappas for s in seeds],
    )
    out_dir = Path(args.out)
    summaries = run_plan(plan, out_dir, threads=args.threads, force=args.force)
    rows = aggregate_records(summaries, lambda r: {"kappa": r["kappa"]})
    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "mean_acc", "std_acc", "best_acc"])
        for row in rows:
            writer.writerow([
                row.group["kappa"], repr(row.mean_acc),
                "" if row.std_acc is None else repr(row.std_acc), repr(row.best_acc),
            ])
    (out_dir / "sweep_meta.json").write_text(
        json.dumps({"master_seed": doc.get("seed", 0), "variant": variant}, sort_keys=True) + "\n"
    )
    for row in rows:
        print(f"kappa={row.group['kappa']:g}: mean {row.mean_acc:.4f}, best {row.best_acc:.4f}")
    return 0


_CORRUPTION_FLAGS = (
    ("noise", "poisson_noise"),
    ("event_loss", "event_loss"),
    ("frame_loss", "frame_loss"),
)


def cmd_robustness(args) -> int:
    net, config = load_checkpoint(args.checkpoint)
    streams = load_corpus(args.data)
    delta_t = float(config.get("delta_t_ms", 100.0))
    timesteps = int(config["timesteps"])
    binarize = bool(config.get("binarize", False))
    base = evaluate(net, streams, delta_t, timesteps, binarize=binarize)
    out_rows = [("clean", 0.0, "accuracy", base.accuracy)]
    master = Rng(args.seed)
    for flag, kind in _CORRUPTION_FLAGS:
        levels = getattr(args, flag)
        if not levels:
            continue
        for i, level in enumerate(float(x) for x in levels.split(",")):
            spec = CorruptionSpec(kind, level, master.derive_seed("robustness", kind, i))
            result = evaluate(net, streams, delta_t, timesteps, corruption=spec,
                              binarize=binarize)
            out_rows.append((kind, level, "accuracy", result.accuracy))
            if kind == "poisson_noise":
                out_rows.append((kind, level, "activation_distance",
                                 result.activation_distance))
            print(f"{kind} level={level:g}: acc {result.accuracy:.4f}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "robustness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "level", "metric", "value", "master_seed"])
        for kind, level, metric, value in out_rows:
            writer.writerow([kind, level, metric, repr(float(value)), args.seed])
    return 0


def cmd_complexity(args) -> int:
    arch = ARCH_PRESETS.get(args.arch, args.arch)
    spec = parse_architecture(
        arch,
        input_shape=(2, args.height, args.width),
        variant=args.variant,
        reduction=args.reduction,
        timesteps=args.timesteps,
    )
    params = count_parameters(spec)
    mult_adds = count_mult_adds(spec)
    print(f"parameters: {params}")
    print(f"mult_adds(T={spec.timesteps}): {mult_adds}")
    if spec.classes is not None and not args.no_timing:
        net = SpikingNetwork(spec, seed=args.seed)
        rng = Rng(args.seed).split("timing")
        frames = rng.poisson(
            0.5, size=(args.batch, spec.timesteps, *spec.input_shape)
        ).astype(np.float32)
        with no_grad():
            # warmup also initializes batch-norm statistics for eval mode
            net.forward(frames, training=True)
            laps = []
            for _ in range(10):
                t0 = time.perf_counter()
                net.forward(frames)
                laps.append((time.perf_counter() - t0) * 1e3)
        print(f"inference_ms_per_batch(batch={args.batch}): {statistics.median(laps):.3f}")
    return 0


def cmd_eval(args) -> int:
    net, config = load_checkpoint(args.checkpoint)
    streams = load_corpus(args.data)
    result = evaluate(
        net, streams,
        float(config.get("delta_t_ms", 100.0)), int(config["timesteps"]),
        binarize=bool(config.get("binarize", False)),
    )
    print(f"accuracy: {result.accuracy:.4f}")
    print("confusion:")
    for row in result.confusion.tolist():
        print("  " + " ".join(f"{v:4d}" for v in row))
    return 0


def _apply_overrides(doc: dict, args) -> dict:
    if getattr(args, "seed_override", None) is not None:
        doc["seed"] = args.seed_override
    if getattr(args, "precision", None):
        doc["precision"] = args.precision
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikefuse")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker pool size")
    common.add_argument("--force", action="store_true", help="overwrite existing run dirs")
    common.add_argument("--precision", choices=["f32", "f64"], default=None)
    common.add_argument("--seed", dest="seed_override", type=int, default=None,
                        help="override the config seed")

    p = sub.add_parser("synth", help="generate a moving-bar event corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--duration-ms", type=float, default=1000.0)
    p.add_argument("--rate", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="variant x seed grid")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-kappa", parents=[common], help="kappa x seed grid")
    p.add_argument("--config", required=True)
    p.add_argument("--kappas", default="0.3,0.4,0.5,0.6,0.7,0.8")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_kappa)

    p = sub.add_parser("robustness", help="corruption sweeps on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise", default="", help="comma list of poisson rates")
    p.add_argument("--event-loss", dest="event_loss", default="", help="comma list of rates")
    p.add_argument("--frame-loss", dest="frame_loss", default="", help="comma list of rates")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("complexity", help="count parameters and mult-adds")
    p.add_argument("--arch", required=True, help="architecture string or preset name")
    p.add_argument("--variant", default="bl", choices=["bl", "stfa", "ctfa", "sctfa"])
    p.add_argument("--timesteps", type=int, default=10)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--reduction", type=int, default=4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpikefuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
