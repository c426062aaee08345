"""Anytime inference: run the model only as deep as a chosen exit, pick exits
under resource budgets, fuse exit distributions, and account cost per exit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import BudgetInfeasibleError, ConfigError, ContractError
from .exits import MultiExitModel
from .tensor import Tensor

BUDGET_KINDS = ("params", "flops", "latency_us", "depth")


@dataclass
class ExitEntry:
    exit_id: str           # "layer<k>" or "teacher"
    layer_index: int
    param_count: int
    flops_per_frame: int
    latency_us: float | None = None


@dataclass
class ExitCatalog:
    """Per-exit cost table; entries are kept sorted by layer index."""

    entries: list[ExitEntry] = field(default_factory=list)

    def __post_init__(self):
        self.entries.sort(key=lambda e: e.layer_index)
        counts = [e.param_count for e in self.entries]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"param counts must strictly increase with depth, got {counts}")

    def by_id(self, exit_id: str) -> ExitEntry:
        for e in self.entries:
            if e.exit_id == exit_id:
                return e
        raise ContractError(f"unknown exit {exit_id!r}; have {[e.exit_id for e in self.entries]}")

    def to_dict(self) -> dict:
        return {
            e.exit_id: {
                "layer": e.layer_index,
                "params": e.param_count,
                "flops": e.flops_per_frame,
                "latency_us": e.latency_us,
            }
            for e in self.entries
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExitCatalog":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = [
            ExitEntry(exit_id=k, layer_index=v["layer"], param_count=v["params"],
                      flops_per_frame=v["flops"], latency_us=v.get("latency_us"))
            for k, v in doc.items()
        ]
        return cls(entries=entries)


@dataclass
class Budget:
    kind: str
    limit: float

    def __post_init__(self):
        if self.kind not in BUDGET_KINDS:
            raise ConfigError(f"budget kind must be one of {BUDGET_KINDS}, got {self.kind!r}")
        if self.limit <= 0:
            raise ConfigError(f"budget limit must be positive, got {self.limit}")


def _cost(entry: ExitEntry, kind: str) -> float:
    if kind == "params":
        return entry.param_count
    if kind == "flops":
        return entry.flops_per_frame
    if kind == "depth":
        return entry.layer_index
    if entry.latency_us is None:
        raise ConfigError(f"catalog has no measured latency for {entry.exit_id!r}; run bench first")
    return entry.latency_us


def select_exit(catalog: ExitCatalog, budget: Budget) -> str:
    """Deepest exit whose cost fits the budget (inclusive comparison)."""
    if not catalog.entries:
        raise ContractError("empty exit catalog")
    feasible = [e for e in catalog.entries if _cost(e, budget.kind) <= budget.limit]
    if not feasible:
        cheapest = min(catalog.entries, key=lambda e: _cost(e, budget.kind))
        raise BudgetInfeasibleError(
            f"no exit fits {budget.kind} <= {budget.limit:g}; cheapest is "
            f"{cheapest.exit_id!r} at {_cost(cheapest, budget.kind):g}"
        )
    return max(feasible, key=lambda e: e.layer_index).exit_id


def predict_at_exit(model: MultiExitModel, x: np.ndarray, exit_id) -> np.ndarray:
    """Class probabilities from one exit; layers past it never execute."""
    n = model.backbone.config.num_layers
    with T.no_grad():
        model.eval()
        if exit_id == "teacher":
            states = model.backbone.forward_to_layer(Tensor(x), n, {n})
            logits, _, _ = model.backbone.teacher_head(states.states[n])
        else:
            ai = int(str(exit_id).removeprefix("layer"))
            branch = model.branch_at(ai)
            states = model.backbone.forward_to_layer(Tensor(x), ai, {ai})
            logits = branch(states.states[ai]).logits
        return T.softmax(logits, axis=1).data


def fuse(probabilities: list[np.ndarray], method: str = "mean") -> np.ndarray:
    """Combine exit distributions; the default is their unweighted mean."""
    if not probabilities:
        raise ContractError("fuse needs at least one distribution")
    shapes = {p.shape for p in probabilities}
    if len(shapes) != 1:
        raise ContractError(f"fuse got mismatched shapes {sorted(shapes)}")
    stacked = np.stack(probabilities)
    if method == "mean":
        return stacked.mean(axis=0)
    if method == "vote":
        votes = stacked.argmax(axis=2)
        b, c = probabilities[0].shape
        out = np.zeros((b, c), dtype=probabilities[0].dtype)
        for j in range(b):
            counts = np.bincount(votes[:, j], minlength=c)
            out[j, counts.argmax()] = 1.0  # ties break toward the lowest class index
        return out
    raise ConfigError(f"unknown fusion method {method!r}, expected 'mean' or 'vote'")


# -- cost accounting -------------------------------------------------------------


def _needed_prefixes(model: MultiExitModel, exit_id) -> tuple[tuple[str, ...], int]:
    n = model.backbone.config.num_layers
    if exit_id == "teacher":
        return ("encoder.", "encoder_norm.", "layer.", "head."), n
    ai = int(str(exit_id).removeprefix("layer"))
    if ai not in model.exit_indices:
        raise ContractError(f"no exit at layer {ai}; have {model.exit_indices}")
    layers = tuple(f"layer.{j}." for j in range(ai))
    return ("encoder.", "encoder_norm.") + layers + (f"exit.{ai}.",), ai


def count_params(model: MultiExitModel, exit_id) -> int:
    """Exact number of scalar parameters needed to evaluate ``exit_id``."""
    prefixes, _ = _needed_prefixes(model, exit_id)
    return sum(
        p.size for name, p in model.parameters().items()
        if any(name.startswith(pre) for pre in prefixes)
    )


def estimate_flops(model: MultiExitModel, exit_id, frames: int = 32, samples: int | None = None) -> int:
    """Multiply-accumulate count per final frame for one exit's forward pass.

    Counts matmuls, convolutions, and recurrent cells only; norms and
    activations are ignored so figures stay comparable across runs.
    """
    cfg = model.backbone.config
    if samples is None:
        # invert the stride schedule so `frames` final frames are produced
        s = frames
        for _, kernel, stride in reversed(cfg.encoder_convs):
            s = (s - 1) * stride + kernel
        samples = s
    total = 0
    length = samples
    c_in = 1
    for c_out, kernel, stride in cfg.encoder_convs:
        length = (length - kernel) // stride + 1
        total += length * kernel * c_in * c_out
        c_in = c_out
    f = length
    r = cfg.hidden
    _, depth = _needed_prefixes(model, exit_id)
    per_layer = 4 * f * r * r + 2 * f * f * r + 2 * f * r * cfg.ff_dim
    total += depth * per_layer
    d1, d2 = cfg.head_dims
    if exit_id == "teacher":
        total += r * d1 + d1 * d2
    else:
        ai = int(str(exit_id).removeprefix("layer"))
        spec = next(s for s in model.specs if s.layer_index == ai)
        width = spec.block_width or r
        if spec.block_kind == "conv1x1":
            total += f * r * width
        elif spec.block_kind == "conv1x1_collapse":
            total += f * r
            width = 1
        elif spec.block_kind == "lstm":
            total += f * 4 * width * (r + width)
        elif spec.block_kind == "gru":
            total += f * 3 * width * (r + width)
        total += width * d1 + d1 * d2
    return total // max(1, f)


def build_catalog(model: MultiExitModel, frames: int = 32) -> ExitCatalog:
    entries = []
    for ai in model.exit_indices:
        entries.append(
            ExitEntry(
                exit_id=f"layer{ai}", layer_index=ai,
                param_count=count_params(model, f"layer{ai}"),
                flops_per_frame=estimate_flops(model, f"layer{ai}", frames),
            )
        )
    n = model.backbone.config.num_layers
    entries.append(
        ExitEntry(
            exit_id="teacher", layer_index=n,
            param_count=count_params(model, "teacher"),
            flops_per_frame=estimate_flops(model, "teacher", frames),
        )
    )
    return ExitCatalog(entries=entries)


def bench(model: MultiExitModel, sample_shape: tuple[int, int], repeats: int,
          catalog: ExitCatalog | None = None, seed: int = 0) -> ExitCatalog:
    """Measure per-exit wall-clock latency and write it into the catalog.

    Reports the median and stores it as latency_us; the p95 rides along in
    the returned mapping from :func:`bench_table`.
    """
    if repeats < 3:
        raise ConfigError(f"bench needs repeats >= 3, got {repeats}")
    if catalog is None:
        catalog = build_catalog(model, frames=model.backbone.config.frames_for(sample_shape[1]))
    x = np.random.default_rng(seed).normal(0.0, 0.3, size=sample_shape).astype(np.float32)
    for entry in catalog.entries:
        predict_at_exit(model, x, entry.exit_id)  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            predict_at_exit(model, x, entry.exit_id)
            times.append((time.perf_counter() - t0) * 1e6)
        entry.latency_us = float(np.median(times))
    return catalog


def bench_table(model: MultiExitModel, sample_shape: tuple[int, int], repeats: int, seed: int = 0) -> dict:
    """Like :func:`bench` but returns {exit_id: {"median_us", "p95_us"}} detail."""
    if repeats < 3:
        raise ConfigError(f"bench needs repeats >= 3, got {repeats}")
    x = np.random.default_rng(seed).normal(0.0, 0.3, size=sample_shape).astype(np.float32)
    out = {}
    catalog = build_catalog(model, frames=model.backbone.config.frames_for(sample_shape[1]))
    for entry in catalog.entries:
        predict_at_exit(model, x, entry.exit_id)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            predict_at_exit(model, x, entry.exit_id)
            times.append((time.perf_counter() - t0) * 1e6)
        entry.latency_us = float(np.median(times))
        out[entry.exit_id] = {"median_us": float(np.median(times)), "p95_us": float(np.percentile(times, 95))}
    return {"catalog": catalog, "detail": out}
