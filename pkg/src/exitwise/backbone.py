"""Teacher network: conv feature encoder, transformer stack, classifier head.

The forward pass can stop at any transformer layer; layers past the stop
index are never executed, which is what makes early exits actually cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractError,
    ShapeError,
)
from .modules import Conv1d, Head, LayerNorm, Module, TransformerLayer, gelu, sinusoidal_encoding
from .tensor import Tensor


@dataclass
class BackboneConfig:
    num_layers: int = 6
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 128
    head_dims: tuple[int, int] = (32, 7)
    dropout: float = 0.0
    # (out_channels, kernel, stride) per encoder conv; None -> two stride-2 convs
    encoder_convs: list[tuple[int, int, int]] | None = None

    def __post_init__(self):
        if self.encoder_convs is None:
            self.encoder_convs = [(self.hidden, 5, 2), (self.hidden, 5, 2)]
        self.encoder_convs = [tuple(c) for c in self.encoder_convs]
        self.head_dims = tuple(self.head_dims)
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2 to admit a shallower exit")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.encoder_convs[-1][0] != self.hidden:
            raise ConfigError("last encoder conv must emit `hidden` channels")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if len(self.head_dims) != 2 or min(self.head_dims) < 1:
            raise ConfigError("head_dims must be two positive integers")

    @property
    def num_classes(self) -> int:
        return self.head_dims[1]

    def min_input_length(self) -> int:
        need = 1
        for _, kernel, stride in reversed(self.encoder_convs):
            need = (need - 1) * stride + kernel
        return need

    def frames_for(self, s: int) -> int:
        for _, kernel, stride in self.encoder_convs:
            s = (s - kernel) // stride + 1
        return s

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "head_dims": list(self.head_dims),
            "dropout": self.dropout,
            "encoder_convs": [list(c) for c in self.encoder_convs],
        }


@dataclass
class HiddenStates:
    """Activations retained from a partial forward pass."""

    computed_to: int
    states: dict[int, Tensor] = field(default_factory=dict)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "dtype", np.dtype(dtype).type)
        object.__setattr__(self, "layer_calls", 0)  # instrumentation: transformer layers executed
        rng = np.random.default_rng(seed)
        convs = []
        c_in = 1
        for c_out, kernel, stride in config.encoder_convs:
            convs.append(Conv1d(c_in, c_out, kernel, stride, rng, dtype))
            c_in = c_out
        self.encoder = convs
        self.encoder_norm = LayerNorm(config.hidden, dtype)
        layers = [
            TransformerLayer(config.hidden, config.heads, config.ff_dim, rng, dtype, config.dropout)
            for _ in range(config.num_layers)
        ]
        object.__setattr__(self, "layers", layers)
        for i, layer in enumerate(layers):
            self.register_child(f"layer.{i}", layer)  # checkpoint names are layer.<i>.*
        self.head = Head(config.hidden, config.head_dims[0], config.head_dims[1], rng, dtype)

    # -- forward pieces ----------------------------------------------------

    def feature_encode(self, wave: Tensor) -> Tensor:
        """(B, S) raw signal -> (B, F, R) frames with positional information added."""
        if wave.ndim != 2:
            raise ShapeError(f"expected (batch, samples), got {wave.shape}")
        s = wave.shape[1]
        min_s = self.config.min_input_length()
        if s < min_s:
            raise ShapeError(f"input length {s} shorter than the encoder minimum {min_s}")
        x = wave.reshape(wave.shape[0], s, 1)
        for conv in self.encoder:
            x = gelu(conv(x))
        x = self.encoder_norm(x)
        pe = sinusoidal_encoding(x.shape[1], self.config.hidden, self.dtype)
        return x + Tensor(pe)

    def forward_to_layer(self, wave: Tensor, k: int, retain: set[int] | None = None,
                         rng: np.random.Generator | None = None) -> HiddenStates:
        """Run the encoder plus transformer layers 1..k; layers past k never execute."""
        n = self.config.num_layers
        if not 1 <= k <= n:
            raise ContractError(f"layer index {k} outside 1..{n}")
        retain = set(retain) if retain is not None else {k}
        if not retain <= set(range(1, k + 1)):
            raise ContractError(f"retain set {sorted(retain)} not within 1..{k}")
        x = self.feature_encode(wave)
        out = HiddenStates(computed_to=k)
        for i in range(k):
            x = self.layers[i](x, rng)
            object.__setattr__(self, "layer_calls", self.layer_calls + 1)
            if (i + 1) in retain:
                out.states[i + 1] = x
        return out

    def teacher_head(self, h_final: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Final hidden states -> (logits, first-linear activation, pooled embedding)."""
        pooled = T.mean_pool(h_final)
        logits, linear_act = self.head(pooled)
        return logits, linear_act, pooled

    def forward(self, wave: Tensor, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
        n = self.config.num_layers
        states = self.forward_to_layer(wave, n, {n}, rng)
        return self.teacher_head(states.states[n])

    # -- persistence ---------------------------------------------------------

    def arch_description(self) -> dict:
        return {"backbone": self.config.to_dict()}

    def arch_hash(self) -> int:
        return ckpt.arch_hash(self.arch_description())

    def save_checkpoint(self, path) -> None:
        tensors = {name: p.data for name, p in self.parameters().items()}
        ckpt.write_tensor_file(path, tensors, self.arch_hash())


def load_into(model: Module, path, expected_hash: int) -> None:
    """Load a tensor table into ``model``, validating hash and full table coverage."""
    _, architecture, table = ckpt.read_tensor_file(path)
    if architecture != expected_hash:
        raise CheckpointMismatchError(
            f"architecture hash {architecture:#010x} does not match expected {expected_hash:#010x}"
        )
    params = model.parameters()
    missing = sorted(set(params) - set(table))
    extra = sorted(set(table) - set(params))
    if missing or extra:
        raise CheckpointMismatchError(f"tensor table mismatch: missing {missing[:4]}, extra {extra[:4]}")
    for name, arr in table.items():
        if tuple(arr.shape) != params[name].shape:
            raise CheckpointMismatchError(
                f"tensor {name!r}: shape {tuple(arr.shape)} vs model {params[name].shape}"
            )
    model.set_parameters(table)


def load_checkpoint(path, config: BackboneConfig, seed: int = 0, dtype=np.float32) -> Backbone:
    """Rebuild a Backbone from ``config`` and restore its parameters from ``path``."""
    model = Backbone(config, seed=seed, dtype=dtype)
    load_into(model, path, model.arch_hash())
    return model


TRUNK_PREFIXES = ("encoder.", "encoder_norm.", "layer.")


def load_trunk(backbone: Backbone, path) -> None:
    """Initialize the encoder and transformer stack from any checkpoint whose
    trunk matches this architecture; classifier heads stay freshly initialized.

    This is the initialization path for pretrained backbones: the pretext
    task's head (whatever it was) is ignored, only the trunk must line up.
    """
    _, _, table = ckpt.read_tensor_file(path)
    params = backbone.parameters()
    trunk = {n: p for n, p in params.items() if n.startswith(TRUNK_PREFIXES)}
    missing = sorted(n for n in trunk if n not in table)
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks trunk tensors: {missing[:4]}")
    for name, p in trunk.items():
        arr = table[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointMismatchError(
                f"trunk tensor {name!r}: shape {tuple(arr.shape)} vs model {p.shape}"
            )
        p.data = arr.astype(p.dtype).copy()
