"""Command-line surface: train, eval, infer, bench, sweep, synth-data.

stdout carries machine-readable records (JSONL by default, an aligned table
with ``--format table``); stderr carries human diagnostics. Reports are also
written to the output directory in both forms, with figures alongside.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 checkpoint mismatch,
5 infeasible budget.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import figures, reports
from .backbone import Backbone, load_checkpoint, load_into
from .config import RunConfig, load_config_with_overrides
from .corpus import read_wav, split_speaker_disjoint, save_corpus_cache, synth_corpus, write_manifest, write_wav
from .errors import (
    BudgetInfeasibleError,
    CheckpointError,
    ConfigError,
    ExitwiseError,
    NumericError,
)
from .exits import ExitSpec, attach_exits, load_multi_exit
from .losses import SIM_KINDS
from .runtime import Budget, ExitCatalog, bench_table, build_catalog, predict_at_exit, select_exit
from .study import (
    build_dataset,
    pretrain_teacher,
    run_self_distill_trial,
    trend_study,
    worker_count,
)
from .tensor import Tensor
from .trainer import (
    LayerwiseStudent,
    TruncatedClassifier,
    evaluate,
    fine_tune_truncated,
    fit_self_distill,
    layerwise_distill,
)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(records: list[dict], headers: list[str], rows: list[list], fmt: str) -> None:
    if fmt == "table":
        sys.stdout.write(reports.format_table(headers, rows))
    else:
        for r in records:
            print(reports.jsonl_line(r))


def _load_cfg(args) -> RunConfig:
    cfg = load_config_with_overrides(args.config, args.override or [])
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "refit_on_train_plus_dev", False):
        cfg = replace(cfg, refit_on_train_plus_dev=True)
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    cfg.validate_paths()
    return cfg


def _rebuild_model(cfg: RunConfig, checkpoint_path: str):
    """Reconstruct the trained model a checkpoint belongs to, per config mode."""
    if cfg.mode == "self-distill":
        return load_multi_exit(checkpoint_path, cfg.model, cfg.exits)
    if cfg.mode == "truncated":
        k = cfg.truncate_at or min((s.layer_index for s in cfg.exits), default=cfg.model.num_layers)
        model = TruncatedClassifier(Backbone(cfg.model), k)
        load_into(model, checkpoint_path, model.arch_hash())
        return model
    n = cfg.model.num_layers
    depth = cfg.student_depth or max(1, n // 3)
    predict = cfg.predict_layers or sorted({max(1, round(n / 3)), max(1, round(2 * n / 3)), n})
    model = LayerwiseStudent(Backbone(cfg.model), depth, predict)
    load_into(model, checkpoint_path, model.arch_hash())
    return model


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, dev, test = build_dataset(cfg)
    _err(f"dataset: {len(train)} train / {len(dev)} dev / {len(test)} test clips")

    log_lines: list[dict] = []

    def sink(record):
        doc = record.to_dict()
        log_lines.append(doc)
        print(reports.jsonl_line(doc), flush=True)

    if cfg.init_checkpoint:
        backbone = load_checkpoint(cfg.init_checkpoint, cfg.model, seed=cfg.train.seed)
    else:
        backbone = Backbone(cfg.model, seed=cfg.train.seed)

    phases = [(train, dev)]
    if cfg.refit_on_train_plus_dev:
        phases.append((train + dev, test))

    if cfg.mode == "self-distill":
        model = attach_exits(backbone, cfg.exits, seed=cfg.train.seed)
        for split in phases:
            model, _ = fit_self_distill(model, split, cfg.train, sink=sink)
    elif cfg.mode == "truncated":
        k = cfg.truncate_at or min((s.layer_index for s in cfg.exits), default=cfg.model.num_layers)
        model = None
        for split in phases:
            model, _ = fine_tune_truncated(backbone, k, split, cfg.train, sink=sink)
    else:
        n = cfg.model.num_layers
        depth = cfg.student_depth or max(1, n // 3)
        predict = cfg.predict_layers or sorted({max(1, round(n / 3)), max(1, round(2 * n / 3)), n})
        model = None
        for split in phases:
            model, _ = layerwise_distill(backbone, depth, predict, split, cfg.train, sink=sink)

    ckpt_path = out_dir / cfg.output.checkpoint
    model.save_checkpoint(ckpt_path)
    reports.write_jsonl(out_dir / cfg.output.log, log_lines)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.output.figures:
        fig_dir = out_dir / "figures"
        figures.loss_curves(log_lines, fig_dir / "loss_curves.png")
        if any(r.get("uar_dev") for r in log_lines):
            figures.uar_curves(log_lines, fig_dir / "uar_curves.png")
    _err(f"checkpoint written to {ckpt_path}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model = _rebuild_model(cfg, args.checkpoint)
    train, dev, test = build_dataset(cfg)
    clips = {"train": train, "dev": dev, "test": test}[args.split]
    result = evaluate(model, clips, batch_size=cfg.train.batch_size,
                      include_exits=args.per_exit, fuse_exits=args.fusion)
    records = []
    rows = []
    order = sorted(result.per_exit, key=lambda n: (n == "teacher", n))
    for name in order:
        info = result.per_exit[name]
        records.append({"exit": name, "split": args.split, "uar": info["uar"], "confusion": info["confusion"]})
        rows.append([name, info["uar"]])
    if result.fusion is not None:
        records.append({"exit": "fusion", "split": args.split,
                        "uar": result.fusion["uar"], "confusion": result.fusion["confusion"]})
        rows.append(["fusion", result.fusion["uar"]])
    out_dir = Path(cfg.output.dir)
    reports.write_jsonl(out_dir / f"eval_{args.split}.jsonl", records)
    reports.write_table(out_dir / f"eval_{args.split}.txt", ["exit", "uar"], rows)
    if cfg.output.figures:
        fig_dir = out_dir / "figures"
        figures.uar_bars({r[0]: r[1] for r in rows}, fig_dir / f"uar_{args.split}.png",
                         title=f"UAR by exit ({args.split})")
        for rec in records:
            figures.confusion_heatmap(rec["confusion"], cfg.data.class_names,
                                      fig_dir / f"confusion_{args.split}_{rec['exit']}.png",
                                      title=f"{rec['exit']} ({args.split})")
    _emit(records, ["exit", "uar"], rows, args.format)
    return 0


# -- infer -----------------------------------------------------------------------


def parse_budget(text: str) -> Budget:
    kind, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"budget {text!r} must look like kind=limit, e.g. params=8e7")
    raw = raw.strip()
    try:
        if "^" in raw:
            base, exponent = raw.split("^", 1)
            limit = float(base) ** float(exponent)
        else:
            limit = float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse budget limit {raw!r}") from exc
    return Budget(kind=kind.strip(), limit=limit)


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    if cfg.mode != "self-distill":
        raise ConfigError("infer needs a self-distill (multi-exit) checkpoint")
    model = _rebuild_model(cfg, args.checkpoint)
    if args.input:
        samples, rate = read_wav(args.input)
        if rate != cfg.data.sample_rate:
            raise ConfigError(f"input rate {rate} Hz does not match configured {cfg.data.sample_rate} Hz")
        x = samples[None, :]
    else:
        raise ConfigError("--input WAV path is required")
    if args.catalog:
        catalog = ExitCatalog.load(args.catalog)
    else:
        catalog = build_catalog(model, frames=model.backbone.config.frames_for(x.shape[1]))
    if args.exit:
        exit_id = args.exit
        catalog.by_id(exit_id)  # validate
    elif args.budget:
        exit_id = select_exit(catalog, parse_budget(args.budget))
    else:
        exit_id = "teacher"
    probs = predict_at_exit(model, x, exit_id)[0]
    label = int(probs.argmax())
    entry = catalog.by_id(exit_id)
    record = {
        "label": label,
        "class_name": cfg.data.class_names[label],
        "probabilities": [float(p) for p in probs],
        "exit": exit_id,
        "cost": {"params": entry.param_count, "flops": entry.flops_per_frame,
                 "latency_us": entry.latency_us, "depth": entry.layer_index},
    }
    rows = [[record["exit"], record["label"], record["class_name"], f"{probs[label]:.4f}"]]
    _emit([record], ["exit", "label", "class", "confidence"], rows, args.format)
    return 0


# -- bench -----------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    if cfg.mode != "self-distill":
        raise ConfigError("bench needs a self-distill (multi-exit) checkpoint")
    model = _rebuild_model(cfg, args.checkpoint)
    shape = (args.batch, cfg.data.length)
    outcome = bench_table(model, shape, args.repeats)
    catalog: ExitCatalog = outcome["catalog"]
    detail = outcome["detail"]
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    catalog.save(out_dir / "catalog.json")
    records = []
    rows = []
    for entry in catalog.entries:
        d = detail[entry.exit_id]
        records.append({"exit": entry.exit_id, "layer": entry.layer_index,
                        "params": entry.param_count, "flops": entry.flops_per_frame,
                        "median_us": d["median_us"], "p95_us": d["p95_us"]})
        rows.append([entry.exit_id, entry.layer_index, entry.param_count,
                     d["median_us"], d["p95_us"]])
    reports.write_jsonl(out_dir / "bench.jsonl", records)
    reports.write_table(out_dir / "bench.txt", ["exit", "layer", "params", "median_us", "p95_us"], rows)
    if cfg.output.figures:
        figures.latency_bars(detail, out_dir / "figures" / "latency_by_exit.png")
    _err(f"catalog written to {out_dir / 'catalog.json'}")
    _emit(records, ["exit", "layer", "params", "median_us", "p95_us"], rows, args.format)
    return 0


# -- sweep -----------------------------------------------------------------------


def _grid_for_axis(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    if axis == "exits":
        kind = cfg.exits[0].block_kind if cfg.exits else "conv1x1"
        return [
            (f"layer{ai}", replace(cfg, exits=[ExitSpec(ai, block_kind=kind)]))
            for ai in range(1, cfg.model.num_layers)
        ]
    if axis == "blocks":
        return [
            (kind, replace(cfg, exits=[replace(s, block_kind=kind) for s in cfg.exits]))
            for kind in ("conv1x1", "lstm", "gru")
        ]
    if axis == "simloss":
        out = []
        for kind in SIM_KINDS:
            loss = replace(cfg.loss, sim_kind=kind)
            out.append((kind, replace(cfg, loss=loss, train=replace(cfg.train, weights=loss))))
        return out
    raise ConfigError(f"unknown sweep axis {axis!r}, expected exits, blocks, or simloss")


def _sweep_point(job):
    label, cfg, pretrained, splits = job
    result, _ = run_self_distill_trial(cfg, pretrained, splits, cfg.train.seed)
    row = {"label": label}
    for name, value in sorted(result.dev_uar.items()):
        row[f"{name}_dev"] = value
    for name, value in sorted(result.test_uar.items()):
        row[f"{name}_test"] = value
    return row


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = build_dataset(cfg)
    if cfg.init_checkpoint:
        pretrained = cfg.init_checkpoint
    else:
        pretrained = str(out_dir / "pretrained.ckpt")
        _err("no init_checkpoint configured; pretraining the teacher once for the sweep")
        pretrain_teacher(cfg, (splits[0], splits[1]), pretrained)
    grid = _grid_for_axis(cfg, args.axis)
    jobs = [(label, variant, pretrained, splits) for label, variant in grid]
    workers = worker_count(limit=len(jobs))
    _err(f"sweep over {len(jobs)} grid points with {workers} worker(s)")
    if workers == 1:
        rows = [_sweep_point(job) for job in jobs]
    else:
        import multiprocessing

        with multiprocessing.get_context("fork").Pool(workers) as pool:
            rows = pool.map(_sweep_point, jobs)
    headers = sorted({key for row in rows for key in row if key != "label"})
    table_rows = [[row["label"]] + [row.get(h, "") for h in headers] for row in rows]
    reports.write_jsonl(out_dir / f"sweep_{args.axis}.jsonl", rows)
    reports.write_table(out_dir / f"sweep_{args.axis}.txt", ["label"] + headers, table_rows)
    if cfg.output.figures:
        fig = out_dir / "figures" / f"sweep_{args.axis}.png"
        if args.axis == "exits":
            fig_rows = []
            for row in rows:
                layer = int(row["label"].removeprefix("layer"))
                fig_rows.append({
                    "layer": layer,
                    "exit_dev": row.get(f"layer{layer}_dev"),
                    "teacher_dev": row.get("teacher_dev"),
                    "exit_test": row.get(f"layer{layer}_test"),
                    "teacher_test": row.get("teacher_test"),
                })
            figures.depth_sweep(fig_rows, fig, title="single-exit depth sweep")
        else:
            names = sorted({key.removesuffix("_dev") for row in rows for key in row if key.endswith("_dev")})
            figures.sweep_grid(rows, names, fig, title=f"sweep over {args.axis}")
    _emit(rows, ["label"] + headers, table_rows, args.format)
    return 0


# -- synth-data --------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _load_cfg(args)
    d = cfg.data
    corpus = synth_corpus(d.seed, d.n_per_class, d.classes, d.length, d.sample_rate,
                          d.speakers, d.overlap)
    out_dir = Path(args.out or cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = {}
    if args.format_out in ("wav", "both"):
        rows = []
        for i, clip in enumerate(corpus):
            rel = f"clip_{i:05d}.wav"
            write_wav(out_dir / rel, clip.samples, clip.sample_rate)
            rows.append((rel, d.class_names[clip.label], clip.speaker_id))
        write_manifest(out_dir / "manifest.tsv", rows)
        wrote["manifest"] = str(out_dir / "manifest.tsv")
    if args.format_out in ("cache", "both"):
        cache_path = out_dir / "corpus.cache"
        save_corpus_cache(cache_path, corpus)
        wrote["cache"] = str(cache_path)
    train, dev, test = split_speaker_disjoint(corpus, d.split, d.seed)
    record = {"clips": len(corpus), "classes": d.classes, "sample_rate": d.sample_rate,
              "split_sizes": [len(train), len(dev), len(test)], **wrote}
    print(reports.jsonl_line(record))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitwise",
        description="Self-distillation training and anytime inference for multi-exit sequence classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", default=None, help="JSON run config (defaults apply when omitted)")
        p.add_argument("--override", action="append", metavar="SEC.KEY=VAL",
                       help="dotted-path config override, last wins")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--format", choices=("jsonl", "table"), default="jsonl",
                       help="stdout payload format")

    p = sub.add_parser("train", help="train (self-distill by default, or a baseline mode)")
    common(p)
    p.add_argument("--mode", choices=("self-distill", "truncated", "layerwise"), default=None)
    p.add_argument("--refit-on-train-plus-dev", action="store_true",
                   help="after the main fit, continue on train+dev validated on test")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: per-exit UAR, confusion, fusion")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--per-exit", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--fusion", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one clip at a chosen or budgeted exit")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="mono WAV file")
    p.add_argument("--exit", default=None, help="exit id, e.g. layer2 or teacher")
    p.add_argument("--budget", default=None, metavar="KIND=LIMIT",
                   help="params|flops|latency_us|depth budget, e.g. params=8e7")
    p.add_argument("--catalog", default=None, help="exit catalog JSON (from bench)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="measure per-exit latency and write the exit catalog")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="grid study over exits, block kinds, or similarity losses")
    common(p)
    p.add_argument("--axis", choices=("exits", "blocks", "simloss"), required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus as WAV+manifest or cache")
    common(p)
    p.add_argument("--format-out", choices=("wav", "cache", "both"), default="wav")
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except NumericError as exc:
        _err(f"numeric failure: {exc}")
        return 3
    except CheckpointError as exc:
        _err(f"checkpoint error: {exc}")
        return 4
    except BudgetInfeasibleError as exc:
        _err(f"infeasible budget: {exc}")
        return 5
    except ExitwiseError as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
