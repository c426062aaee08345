"""Composite self-distillation objective.

total = supervised CE on the teacher
      + gamma * mean of supervised CE over the exits
      + alpha * mean over exits of KL(teacher distribution || exit distribution)
      + beta  * mean over exits of a feature-similarity penalty

The KL and similarity terms treat the teacher side as a constant by default
(students chase the teacher; the teacher never degrades toward a student),
which is overridable through ``LossWeights.detach_teacher``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError, NumericError, ShapeError
from .exits import ForwardOutputs
from .tensor import Tensor

SIM_KINDS = ("l1", "l2", "cosine", "l1+cosine", "l2+cosine")
SIM_LEVELS = ("embedding", "linear")
_LOG_FLOOR = 1e-8


@dataclass
class LossWeights:
    alpha: float = 1.0   # KL weight
    beta: float = 1.0    # similarity weight
    gamma: float = 1.0   # exit cross-entropy weight
    sim_kind: str = "l2"
    sim_level: str = "embedding"
    detach_teacher: bool = True
    kl_temperature: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.sim_kind not in SIM_KINDS:
            raise ConfigError(f"sim_kind must be one of {SIM_KINDS}, got {self.sim_kind!r}")
        if self.sim_level not in SIM_LEVELS:
            raise ConfigError(f"sim_level must be one of {SIM_LEVELS}, got {self.sim_level!r}")
        if self.kl_temperature <= 0:
            raise ConfigError("kl_temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "sim_kind": self.sim_kind, "sim_level": self.sim_level,
            "detach_teacher": self.detach_teacher, "kl_temperature": self.kl_temperature,
        }


@dataclass
class LossReport:
    """Scalar decomposition of one loss evaluation (plain floats, detached)."""

    total: float = 0.0
    ce_teacher: float = 0.0
    ce_exits: float = 0.0  # mean over exits, before gamma
    kl: float = 0.0        # mean over exits, before alpha
    sim: float = 0.0       # mean over exits, before beta
    per_exit: dict = field(default_factory=dict)  # {"ce": {...}, "kl": {...}, "sim": {...}}

    def to_dict(self) -> dict:
        return {
            "total": self.total, "ce_teacher": self.ce_teacher, "ce_exits": self.ce_exits,
            "kl": self.kl, "sim": self.sim,
            "per_exit": {k: {str(i): v for i, v in d.items()} for k, d in self.per_exit.items()},
        }

    def first_non_finite(self) -> str | None:
        for name in ("ce_teacher", "ce_exits", "kl", "sim", "total"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise LabelError(f"label {bad} outside [0, {c})")
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    return T.tsum(T.log_softmax(logits, axis=1) * Tensor(onehot)) * (-1.0 / b)


def composite_cross_entropy(
    teacher_logits: Tensor, exit_logits: dict[int, Tensor], labels: np.ndarray, gamma: float
) -> tuple[Tensor, float, float, dict[int, float]]:
    """Teacher CE plus gamma times the mean of the exit CEs.

    Returns (loss tensor, teacher CE, mean exit CE, per-exit CE floats).
    """
    ce_t = cross_entropy(teacher_logits, labels)
    per_exit: dict[int, float] = {}
    if not exit_logits:
        return ce_t, ce_t.item(), 0.0, per_exit
    terms = []
    for ai, logits in sorted(exit_logits.items()):
        term = cross_entropy(logits, labels)
        per_exit[ai] = term.item()
        terms.append(term)
    mean_exits = terms[0]
    for term in terms[1:]:
        mean_exits = mean_exits + term
    mean_exits = mean_exits * (1.0 / len(terms))
    total = ce_t + mean_exits * gamma
    return total, ce_t.item(), mean_exits.item(), per_exit


def kl_to_teacher(
    teacher_logits: Tensor,
    exit_logits: dict[int, Tensor],
    temperature: float = 1.0,
    detach_teacher: bool = True,
) -> tuple[Tensor, dict[int, float]]:
    """Mean over exits and batch of KL(teacher || exit) on softmaxed logits.

    A small floor inside the teacher's log guards underflow; softmax keeps
    every finite input valid, so the result is always finite and >= 0.
    """
    if not exit_logits:
        return Tensor(np.zeros((), dtype=teacher_logits.dtype)), {}
    b = teacher_logits.shape[0]
    inv_t = 1.0 / temperature
    teacher = teacher_logits.detach() if detach_teacher else teacher_logits
    p = T.softmax(teacher * inv_t, axis=1)
    log_p = T.log(p + _LOG_FLOOR)
    per_exit: dict[int, float] = {}
    terms = []
    for ai, logits in sorted(exit_logits.items()):
        log_q = T.log_softmax(logits * inv_t, axis=1)
        term = T.tsum(p * (log_p - log_q)) * (1.0 / b)
        per_exit[ai] = term.item()
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms)), per_exit


def _sim_pair(kind: str, teacher_feat: Tensor, exit_feat: Tensor) -> Tensor:
    if teacher_feat.shape != exit_feat.shape:
        raise ShapeError(
            f"similarity pair shapes disagree: teacher {teacher_feat.shape} vs exit {exit_feat.shape}"
        )
    diff = teacher_feat - exit_feat
    if kind == "l1":
        return T.tmean(T.absolute(diff))
    if kind == "l2":
        return T.tmean(diff * diff)
    if kind == "cosine":
        return T.tmean(T.cosine_rows(teacher_feat, exit_feat)) * -1.0
    if kind == "l1+cosine":
        return _sim_pair("l1", teacher_feat, exit_feat) + _sim_pair("cosine", teacher_feat, exit_feat)
    if kind == "l2+cosine":
        return _sim_pair("l2", teacher_feat, exit_feat) + _sim_pair("cosine", teacher_feat, exit_feat)
    raise ConfigError(f"sim_kind must be one of {SIM_KINDS}, got {kind!r}")


def similarity_loss(
    kind: str,
    level: str,
    teacher_pooled: Tensor,
    teacher_linear: Tensor,
    exit_pooled: dict[int, Tensor],
    exit_linear: dict[int, Tensor],
    detach_teacher: bool = True,
    level_overrides: dict[int, str] | None = None,
) -> tuple[Tensor, dict[int, float]]:
    """Mean over exits of the chosen feature penalty.

    ``level`` selects which tensors are paired: the pooled block output
    against the pooled final transformer embedding, or the two first-linear
    activations. Per-exit overrides take precedence when given.
    """
    if level not in SIM_LEVELS:
        raise ConfigError(f"sim_level must be one of {SIM_LEVELS}, got {level!r}")
    if not exit_pooled:
        return Tensor(np.zeros((), dtype=teacher_pooled.dtype)), {}
    t_pool = teacher_pooled.detach() if detach_teacher else teacher_pooled
    t_lin = teacher_linear.detach() if detach_teacher else teacher_linear
    per_exit: dict[int, float] = {}
    terms = []
    for ai in sorted(exit_pooled):
        lvl = (level_overrides or {}).get(ai) or level
        if lvl == "embedding":
            term = _sim_pair(kind, t_pool, exit_pooled[ai])
        else:
            term = _sim_pair(kind, t_lin, exit_linear[ai])
        per_exit[ai] = term.item()
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms)), per_exit


def total_loss(
    outputs: ForwardOutputs, labels: np.ndarray, weights: LossWeights,
    level_overrides: dict[int, str] | None = None,
) -> tuple[Tensor, LossReport]:
    """Assemble the full objective and its decomposed report.

    The report reconstruction (total == ce_teacher + gamma*ce_exits +
    alpha*kl + beta*sim) is asserted on every call.
    """
    ce_total, ce_t, ce_x, ce_each = composite_cross_entropy(
        outputs.teacher_logits, outputs.exit_logits, labels, weights.gamma
    )
    kl_total, kl_each = kl_to_teacher(
        outputs.teacher_logits, outputs.exit_logits, weights.kl_temperature, weights.detach_teacher
    )
    sim_total, sim_each = similarity_loss(
        weights.sim_kind, weights.sim_level,
        outputs.teacher_pooled, outputs.teacher_linear,
        outputs.exit_pooled, outputs.exit_linear,
        weights.detach_teacher, level_overrides,
    )
    loss = ce_total + kl_total * weights.alpha + sim_total * weights.beta
    report = LossReport(
        total=loss.item(),
        ce_teacher=ce_t,
        ce_exits=ce_x,
        kl=kl_total.item(),
        sim=sim_total.item(),
        per_exit={"ce": ce_each, "kl": kl_each, "sim": sim_each},
    )
    recon = report.ce_teacher + weights.gamma * report.ce_exits + weights.alpha * report.kl + weights.beta * report.sim
    scale = max(abs(report.total), 1e-6)
    if np.isfinite(report.total) and abs(recon - report.total) / scale > 1e-5:
        raise NumericError(
            f"loss report does not reconstruct: total={report.total!r} vs parts={recon!r}"
        )
    return loss, report
