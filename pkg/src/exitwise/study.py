"""Experiment pipeline: datasets from config, teacher pretraining as the
stand-in for a released pretrained backbone, single trials of each training
mode, and the multi-seed trend study used by the sweep command and the
acceptance suite.

Each trial is internally single-threaded and fully determined by its seed;
trials only ever run in parallel across processes.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import Backbone, load_trunk
from .config import RunConfig
from .corpus import (
    LabeledClip,
    load_corpus_cache,
    load_wav_corpus,
    split_speaker_disjoint,
    synth_corpus,
    synth_pretext_corpus,
)
from .errors import ConfigError
from .exits import ExitSpec, attach_exits
from .losses import LossWeights
from .trainer import (
    TrainConfig,
    TrainLog,
    evaluate,
    fine_tune_truncated,
    fit_self_distill,
    layerwise_distill,
)


def worker_count(limit: int | None = None) -> int:
    env = os.environ.get("EXITWISE_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if limit is not None:
        cap = min(cap, limit)
    return max(1, cap)


def build_dataset(cfg: RunConfig) -> tuple[list[LabeledClip], list[LabeledClip], list[LabeledClip]]:
    d = cfg.data
    if d.source == "synth":
        corpus = synth_corpus(d.seed, d.n_per_class, d.classes, d.length, d.sample_rate,
                              d.speakers, d.overlap)
    elif d.source == "wav-manifest":
        corpus = load_wav_corpus(d.manifest, d.class_names)
    else:
        corpus = load_corpus_cache(d.cache)
    return split_speaker_disjoint(corpus, d.split, d.seed)


# Pretraining stands in for starting from a released pretrained backbone. To
# mirror that setting, the trunk is pretrained on a pretext corpus: same
# signal domain, different randomly drawn families, so it learns general
# acoustic features without ever seeing the target class boundaries. Only
# the trunk of the resulting checkpoint is loaded; task heads start fresh.
PRETRAIN_LR = 7e-4
PRETRAIN_EPOCHS = 14
PRETRAIN_SEED = 7
PRETEXT_FAMILIES = 24
PRETEXT_PER_FAMILY = 60


def pretrain_teacher(cfg: RunConfig, data, path, epochs: int = PRETRAIN_EPOCHS,
                     lr: float = PRETRAIN_LR, seed: int = PRETRAIN_SEED, sink=None) -> TrainLog:
    """Train the bare teacher on the pretext corpus; write its checkpoint."""
    del data  # the pretext corpus replaces the task data entirely
    d = cfg.data
    pretext = synth_pretext_corpus(seed, PRETEXT_PER_FAMILY, PRETEXT_FAMILIES,
                                   d.length, d.sample_rate, d.speakers)
    pretext_cfg = replace(cfg.model, head_dims=(cfg.model.head_dims[0], PRETEXT_FAMILIES))
    backbone = Backbone(pretext_cfg, seed=seed)
    model = attach_exits(backbone, [], seed=seed)
    tc = TrainConfig(
        lr=lr, epochs=epochs, batch_size=cfg.train.batch_size, seed=seed,
        weights=LossWeights(alpha=0.0, beta=0.0, gamma=0.0), grad_clip=1.0,
    )
    _, log = fit_self_distill(model, (pretext, None), tc, sink=sink)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    backbone.save_checkpoint(path)
    return log


def init_backbone(cfg: RunConfig, pretrained_path, seed: int) -> Backbone:
    """Fresh task backbone with its trunk initialized from a checkpoint."""
    backbone = Backbone(cfg.model, seed=seed)
    load_trunk(backbone, pretrained_path)
    return backbone


@dataclass
class TrialResult:
    mode: str
    seed: int
    dev_uar: dict[str, float]      # per exit name, plus "teacher" (+ "fusion" when present)
    test_uar: dict[str, float]
    epochs_by_phase: dict[str, int]
    log: TrainLog | None = None


def _uars(model, clips, batch_size: int) -> dict[str, float]:
    result = evaluate(model, clips, batch_size=batch_size)
    out = {name: info["uar"] for name, info in result.per_exit.items()}
    if result.fusion is not None:
        out["fusion"] = result.fusion["uar"]
    return out


def run_self_distill_trial(cfg: RunConfig, pretrained_path, splits, seed: int,
                           eval_test: bool = True, sink=None) -> tuple[TrialResult, object]:
    train, dev, test = splits
    backbone = init_backbone(cfg, pretrained_path, seed)
    model = attach_exits(backbone, cfg.exits, seed=seed)
    tc = replace(cfg.train, seed=seed, weights=cfg.loss)
    _, log = fit_self_distill(model, (train, dev), tc, sink=sink, eval_dev=False)
    result = TrialResult(
        mode="self-distill", seed=seed,
        dev_uar=_uars(model, dev, tc.batch_size),
        test_uar=_uars(model, test, tc.batch_size) if eval_test else {},
        epochs_by_phase=log.epochs_by_phase(),
        log=log,
    )
    return result, model


def run_truncated_trial(cfg: RunConfig, pretrained_path, splits, seed: int, k: int,
                        eval_test: bool = True, sink=None) -> tuple[TrialResult, object]:
    train, dev, test = splits
    backbone = init_backbone(cfg, pretrained_path, seed)
    tc = replace(cfg.train, seed=seed, weights=cfg.loss)
    model, log = fine_tune_truncated(backbone, k, (train, dev), tc, sink=sink, eval_dev=False)
    result = TrialResult(
        mode=f"truncated@{k}", seed=seed,
        dev_uar=_uars(model, dev, tc.batch_size),
        test_uar=_uars(model, test, tc.batch_size) if eval_test else {},
        epochs_by_phase=log.epochs_by_phase(),
        log=log,
    )
    return result, model


def run_layerwise_trial(cfg: RunConfig, pretrained_path, splits, seed: int,
                        eval_test: bool = True, sink=None) -> tuple[TrialResult, object]:
    train, dev, test = splits
    teacher = init_backbone(cfg, pretrained_path, seed)
    n = cfg.model.num_layers
    depth = cfg.student_depth or max(1, n // 3)
    predict = cfg.predict_layers or sorted({max(1, round(n / 3)), max(1, round(2 * n / 3)), n})
    tc = replace(cfg.train, seed=seed, weights=cfg.loss)
    student, log = layerwise_distill(teacher, depth, predict, (train, dev), tc, sink=sink, eval_dev=False)
    result = TrialResult(
        mode=f"layerwise@{depth}", seed=seed,
        dev_uar=_uars(student, dev, tc.batch_size),
        test_uar=_uars(student, test, tc.batch_size) if eval_test else {},
        epochs_by_phase=log.epochs_by_phase(),
        log=log,
    )
    return result, student


_TRIAL_RUNNERS = {
    "self-distill": lambda cfg, path, splits, seed: run_self_distill_trial(cfg, path, splits, seed)[0],
    "truncated": lambda cfg, path, splits, seed: run_truncated_trial(
        cfg, path, splits, seed, cfg.truncate_at or min(s.layer_index for s in cfg.exits)
    )[0],
    "layerwise": lambda cfg, path, splits, seed: run_layerwise_trial(cfg, path, splits, seed)[0],
}


def _run_one(job) -> TrialResult:
    mode, cfg, path, splits, seed = job
    result = _TRIAL_RUNNERS[mode](cfg, path, splits, seed)
    result.log = None  # keep the payload small across the process boundary
    return result


@dataclass
class TrendStudy:
    results: list[TrialResult]

    def median_dev(self, mode_prefix: str, exit_name: str) -> float:
        values = [
            r.dev_uar[exit_name]
            for r in self.results
            if r.mode.startswith(mode_prefix) and exit_name in r.dev_uar
        ]
        if not values:
            raise ConfigError(f"no trials for mode {mode_prefix!r} exit {exit_name!r}")
        return float(np.median(values))


def trend_study(cfg: RunConfig, pretrained_path, splits, seeds: list[int],
                modes: tuple[str, ...] = ("self-distill", "truncated", "layerwise"),
                workers: int | None = None) -> TrendStudy:
    """Run each requested mode once per seed, in parallel worker processes."""
    jobs = [(mode, cfg, pretrained_path, splits, seed) for mode in modes for seed in seeds]
    n_workers = worker_count(limit=len(jobs)) if workers is None else max(1, workers)
    if n_workers == 1 or len(jobs) == 1:
        results = [_run_one(job) for job in jobs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(n_workers) as pool:
            results = pool.map(_run_one, jobs)
    return TrendStudy(results=results)
