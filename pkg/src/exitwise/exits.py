"""Exit branches: a block over an intermediate layer's frames, then pooling
and a two-linear-layer head, producing logits shaped exactly like the
teacher's so every output/embedding pairing in the losses is well-formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .backbone import Backbone, HiddenStates
from .errors import ConfigError, ContractError
from .modules import Head, Linear, Module
from .tensor import Tensor

BLOCK_KINDS = ("conv1x1", "lstm", "gru", "conv1x1_collapse")


@dataclass
class ExitSpec:
    """Placement and shape of one exit branch.

    ``block_width`` defaults to the backbone hidden size; widths other than
    that (and the literal single-channel conv reading) only support the
    linear-level similarity loss because the pooled block output is no
    longer comparable to the final transformer layer's embedding.
    ``sim_level`` optionally overrides the loss-wide setting for this exit.
    """

    layer_index: int
    block_kind: str = "conv1x1"
    block_width: int | None = None
    head_dims: tuple[int, int] | None = None
    sim_level: str | None = None

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.block_kind!r}, expected one of {BLOCK_KINDS}")
        if self.layer_index < 1:
            raise ConfigError(f"exit layer index must be >= 1, got {self.layer_index}")
        if self.sim_level not in (None, "embedding", "linear"):
            raise ConfigError(f"sim_level must be 'embedding' or 'linear', got {self.sim_level!r}")
        if self.head_dims is not None:
            self.head_dims = tuple(self.head_dims)

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "block_kind": self.block_kind,
            "block_width": self.block_width,
            "head_dims": list(self.head_dims) if self.head_dims else None,
            "sim_level": self.sim_level,
        }


class Conv1x1Block(Module):
    """Pointwise channel map over (B, F, R) frames, initialized to identity."""

    def __init__(self, width: int, out_width: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if width == out_width:
            w = np.eye(width)
        else:
            w = rng.normal(0.0, width**-0.5, size=(width, out_width))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_width, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LSTMBlock(Module):
    """Single unidirectional LSTM layer emitting per-step hidden states."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "hidden", hidden)
        self.wx = Tensor(rng.normal(0.0, width**-0.5, size=(width, 4 * hidden)).astype(dtype), requires_grad=True)
        self.wh = Tensor(rng.normal(0.0, hidden**-0.5, size=(hidden, 4 * hidden)).astype(dtype), requires_grad=True)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0  # forget-gate bias keeps early memory open
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, f, _ = x.shape
        h = self.hidden
        xp = x @ self.wx + self.bias  # (B, F, 4H), input projection hoisted out of the loop
        state = Tensor(np.zeros((b, h), dtype=x.dtype))
        cell = Tensor(np.zeros((b, h), dtype=x.dtype))
        steps = []
        for t in range(f):
            gates = xp[:, t, :] + state @ self.wh
            i = T.sigmoid(gates[:, 0:h])
            fg = T.sigmoid(gates[:, h : 2 * h])
            g = T.tanh(gates[:, 2 * h : 3 * h])
            o = T.sigmoid(gates[:, 3 * h : 4 * h])
            cell = fg * cell + i * g
            state = o * T.tanh(cell)
            steps.append(state)
        return T.stack(steps, axis=1)


class GRUBlock(Module):
    """Single unidirectional GRU layer; gate layout is reset, update, candidate."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "hidden", hidden)
        self.wx = Tensor(rng.normal(0.0, width**-0.5, size=(width, 3 * hidden)).astype(dtype), requires_grad=True)
        self.wh = Tensor(rng.normal(0.0, hidden**-0.5, size=(hidden, 3 * hidden)).astype(dtype), requires_grad=True)
        self.bias_x = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True)
        self.bias_h = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, f, _ = x.shape
        h = self.hidden
        xp = x @ self.wx + self.bias_x
        state = Tensor(np.zeros((b, h), dtype=x.dtype))
        steps = []
        for t in range(f):
            hp = state @ self.wh + self.bias_h
            r = T.sigmoid(xp[:, t, 0:h] + hp[:, 0:h])
            z = T.sigmoid(xp[:, t, h : 2 * h] + hp[:, h : 2 * h])
            n = T.tanh(xp[:, t, 2 * h : 3 * h] + r * hp[:, 2 * h : 3 * h])
            state = (1.0 - z) * n + z * state
            steps.append(state)
        return T.stack(steps, axis=1)


def make_block(kind: str, width: int, out_width: int, rng: np.random.Generator, dtype=np.float32) -> Module:
    if kind == "conv1x1":
        return Conv1x1Block(width, out_width, rng, dtype)
    if kind == "conv1x1_collapse":
        return Conv1x1Block(width, 1, rng, dtype)
    if kind == "lstm":
        return LSTMBlock(width, out_width, rng, dtype)
    if kind == "gru":
        return GRUBlock(width, out_width, rng, dtype)
    raise ConfigError(f"unknown block kind {kind!r}, expected one of {BLOCK_KINDS}")


@dataclass
class ExitOutputs:
    logits: Tensor    # (B, D2)
    pooled: Tensor    # (B, block width), pooled block output
    linear: Tensor    # (B, D1), first-linear activation


class ExitBranch(Module):
    def __init__(self, spec: ExitSpec, hidden: int, head_dims: tuple[int, int], seed: int, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        rng = np.random.default_rng(seed)
        width = spec.block_width or hidden
        dims = spec.head_dims or head_dims
        self.block = make_block(spec.block_kind, hidden, width, rng, dtype)
        out_width = 1 if spec.block_kind == "conv1x1_collapse" else width
        self.head = Head(out_width, dims[0], dims[1], rng, dtype)

    def __call__(self, frames: Tensor) -> ExitOutputs:
        pooled = T.mean_pool(self.block(frames))
        logits, linear_act = self.head(pooled)
        return ExitOutputs(logits=logits, pooled=pooled, linear=linear_act)


@dataclass
class ForwardOutputs:
    """Everything one multi-exit forward pass produces."""

    teacher_logits: Tensor
    teacher_linear: Tensor
    teacher_pooled: Tensor
    exit_logits: dict[int, Tensor]
    exit_linear: dict[int, Tensor]
    exit_pooled: dict[int, Tensor]


class MultiExitModel(Module):
    """Backbone plus exit branches, evaluated in one shared forward pass."""

    def __init__(self, backbone: Backbone, specs: list[ExitSpec], seed: int = 0):
        super().__init__()
        n = backbone.config.num_layers
        indices = [s.layer_index for s in specs]
        for spec in specs:
            if spec.layer_index >= n:
                raise ContractError(f"exit at layer {spec.layer_index} not strictly below depth {n}")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ConfigError(f"exit layer indices must be strictly increasing, got {indices}")
        object.__setattr__(self, "specs", list(specs))
        self.backbone = backbone
        self.branches = [
            ExitBranch(spec, backbone.config.hidden, backbone.config.head_dims, seed=seed + spec.layer_index,
                       dtype=backbone.dtype)
            for spec in specs
        ]

    @property
    def exit_indices(self) -> list[int]:
        return [s.layer_index for s in self.specs]

    def branch_at(self, layer_index: int) -> ExitBranch:
        for spec, branch in zip(self.specs, self.branches):
            if spec.layer_index == layer_index:
                return branch
        raise ContractError(f"no exit at layer {layer_index}; have {self.exit_indices}")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.backbone.parameters(prefix)
        for spec, branch in zip(self.specs, self.branches):
            out.update(branch.parameters(f"{prefix}exit.{spec.layer_index}."))
        return out

    def train(self, mode: bool = True) -> "MultiExitModel":
        self.backbone.train(mode)
        for branch in self.branches:
            branch.train(mode)
        object.__setattr__(self, "training", mode)
        return self

    def forward(self, wave: Tensor, rng: np.random.Generator | None = None) -> ForwardOutputs:
        n = self.backbone.config.num_layers
        retain = set(self.exit_indices) | {n}
        states: HiddenStates = self.backbone.forward_to_layer(wave, n, retain, rng)
        logits, linear_act, pooled = self.backbone.teacher_head(states.states[n])
        exit_logits: dict[int, Tensor] = {}
        exit_linear: dict[int, Tensor] = {}
        exit_pooled: dict[int, Tensor] = {}
        for spec, branch in zip(self.specs, self.branches):
            outs = branch(states.states[spec.layer_index])
            exit_logits[spec.layer_index] = outs.logits
            exit_linear[spec.layer_index] = outs.linear
            exit_pooled[spec.layer_index] = outs.pooled
        return ForwardOutputs(
            teacher_logits=logits,
            teacher_linear=linear_act,
            teacher_pooled=pooled,
            exit_logits=exit_logits,
            exit_linear=exit_linear,
            exit_pooled=exit_pooled,
        )

    def arch_description(self) -> dict:
        return {
            "backbone": self.backbone.config.to_dict(),
            "exits": [s.to_dict() for s in self.specs],
        }

    def arch_hash(self) -> int:
        return ckpt.arch_hash(self.arch_description())

    def save_checkpoint(self, path) -> None:
        tensors = {name: p.data for name, p in self.parameters().items()}
        ckpt.write_tensor_file(path, tensors, self.arch_hash())


def attach_exits(backbone: Backbone, specs: list[ExitSpec], seed: int = 0) -> MultiExitModel:
    """Compose a backbone with exit branches; an empty spec list degenerates
    to plain teacher fine-tuning."""
    return MultiExitModel(backbone, specs, seed=seed)


def load_multi_exit(path, config, specs: list[ExitSpec], seed: int = 0, dtype=np.float32) -> MultiExitModel:
    from .backbone import load_into

    model = MultiExitModel(Backbone(config, seed=seed, dtype=dtype), specs, seed=seed)
    load_into(model, path, model.arch_hash())
    return model
