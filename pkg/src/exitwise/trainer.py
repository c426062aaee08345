"""Joint fine-tuning of the teacher plus exits, the two comparison baselines
(truncated fine-tuning and two-stage layer-wise distillation), Adam, and
evaluation. Every run is bit-reproducible from (seed, config, data) in
single-threaded mode: batch order, parameter init, and update order are all
pure functions of the seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .corpus import LabeledClip, as_arrays, batches
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .exits import ForwardOutputs, MultiExitModel
from .losses import LossReport, LossWeights, cross_entropy, similarity_loss, total_loss
from .metrics import ConfusionMatrix, uar
from .modules import Head, Linear, Module
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 3e-5
    epochs: int = 20
    batch_size: int = 16
    seed: int = 1234
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_encoder: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        d = {
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "freeze_encoder": self.freeze_encoder, "grad_clip": self.grad_clip,
        }
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss: LossReport
    uar_train: dict[str, float]
    uar_dev: dict[str, float] | None
    seconds: float

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "epoch": self.epoch,
            "loss": self.loss.to_dict(),
            "uar_train": self.uar_train,
            "uar_dev": self.uar_dev,
            "seconds": self.seconds,
        }


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord, sink=None) -> None:
        self.records.append(record)
        if sink is not None:
            sink(record)

    def epochs_by_phase(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.phase] = max(out.get(r.phase, 0), r.epoch)
        return out

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


class Adam:
    """Adam with bias correction; moment buffers are zero on first use."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.steps
        bias2 = 1.0 - b2**self.steps
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, Tensor], optimizer: Adam) -> None:
    """One optimizer step over already-populated gradients."""
    del params
    optimizer.step()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total**0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def _check_finite(report: LossReport) -> None:
    bad = report.first_non_finite()
    if bad is not None:
        raise NumericError(f"non-finite loss: first bad term is {bad!r}")


def _exit_name(ai) -> str:
    return "teacher" if ai == "teacher" else f"layer{ai}"


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalResult:
    per_exit: dict[str, dict]  # name -> {"uar": float, "confusion": [[...]]}
    fusion: dict | None

    def uar_of(self, name: str) -> float:
        if name == "fusion":
            return self.fusion["uar"]
        return self.per_exit[name]["uar"]

    def to_dict(self) -> dict:
        return {"per_exit": self.per_exit, "fusion": self.fusion}


def evaluate(model, clips: list[LabeledClip], batch_size: int = 32,
             include_exits: bool = True, fuse_exits: bool = True) -> EvalResult:
    """Per-exit confusion matrices and UAR plus the student-fusion UAR.

    Pure: never mutates parameters; two calls yield identical results.
    """
    from .runtime import fuse

    if not clips:
        raise DataError("evaluate needs a non-empty dataset")
    multi = isinstance(model, MultiExitModel)
    classes = (model.backbone if multi else model).config.num_classes
    names: list = []
    if multi and include_exits:
        names.extend(model.exit_indices)
    names.append("teacher")
    cms = {_exit_name(n): ConfusionMatrix(classes) for n in names}
    fusion_cm = ConfusionMatrix(classes) if (multi and include_exits and fuse_exits and model.exit_indices) else None
    model.eval()
    with T.no_grad():
        for batch in batches(clips, batch_size):
            x, y = as_arrays(batch)
            if multi:
                outputs = model.forward(Tensor(x))
                probs = {ai: T.softmax(logits, axis=1).data for ai, logits in outputs.exit_logits.items()}
                if include_exits:
                    for ai, p in probs.items():
                        cms[_exit_name(ai)].add(y, p.argmax(axis=1))
                teacher_probs = T.softmax(outputs.teacher_logits, axis=1).data
                cms["teacher"].add(y, teacher_probs.argmax(axis=1))
                if fusion_cm is not None:
                    fused = fuse([probs[ai] for ai in sorted(probs)])
                    fusion_cm.add(y, fused.argmax(axis=1))
            else:
                logits = model.forward(Tensor(x))[0]
                cms["teacher"].add(y, logits.data.argmax(axis=1))
    per_exit = {name: {"uar": uar(cm), "confusion": cm.to_lists()} for name, cm in cms.items()}
    fusion = {"uar": uar(fusion_cm), "confusion": fusion_cm.to_lists()} if fusion_cm is not None else None
    return EvalResult(per_exit=per_exit, fusion=fusion)


# -- the main training loop -----------------------------------------------------


def _run_epochs(
    model,
    forward_loss,
    train_clips: list[LabeledClip],
    dev_clips: list[LabeledClip] | None,
    cfg: TrainConfig,
    trainable: dict[str, Tensor],
    log: TrainLog,
    phase: str,
    sink=None,
    eval_dev: bool = True,
) -> None:
    """Shared epoch loop: seeded batch order, Adam updates, per-epoch records.

    ``forward_loss(x, y) -> (loss Tensor, LossReport, predictions)`` defines
    what one step computes; predictions feed the running train-UAR estimate.
    """
    optimizer = Adam(trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, epoch))
        model.train(True)
        sums: dict[str, float] = {}
        steps = 0
        train_cms: dict[str, ConfusionMatrix] = {}
        for batch in batches(train_clips, cfg.batch_size, rng):
            x, y = as_arrays(batch)
            loss, report, preds = forward_loss(x, y)
            _check_finite(report)
            optimizer.zero_grads()
            T.backward(loss)
            if cfg.grad_clip is not None:
                clip_gradients(trainable, cfg.grad_clip)
            optimizer.step()
            steps += 1
            for key, value in report.to_dict().items():
                if isinstance(value, float):
                    sums[key] = sums.get(key, 0.0) + value
            for name, (yy, pp, c) in preds.items():
                if name not in train_cms:
                    train_cms[name] = ConfusionMatrix(c)
                train_cms[name].add(yy, pp)
        mean_report = LossReport(**{k: v / steps for k, v in sums.items()})
        uar_train = {name: uar(cm) for name, cm in train_cms.items()}
        uar_dev = None
        if dev_clips and eval_dev:
            result = evaluate(model, dev_clips, batch_size=cfg.batch_size)
            uar_dev = {name: info["uar"] for name, info in result.per_exit.items()}
            if result.fusion is not None:
                uar_dev["fusion"] = result.fusion["uar"]
        log.append(
            EpochRecord(
                phase=phase,
                epoch=epoch,
                loss=mean_report,
                uar_train=uar_train,
                uar_dev=uar_dev,
                seconds=time.perf_counter() - start,
            ),
            sink,
        )


def fit_self_distill(
    model: MultiExitModel,
    data,
    cfg: TrainConfig,
    sink=None,
    eval_dev: bool = True,
) -> tuple[MultiExitModel, TrainLog]:
    """Jointly fine-tune the teacher and every exit branch under the
    composite objective. ``data`` is (train clips, dev clips or None)."""
    train_clips, dev_clips = data
    trainable = model.parameters()
    if cfg.freeze_encoder:
        trainable = {k: v for k, v in trainable.items() if not k.startswith("encoder.")}
    level_overrides = {s.layer_index: s.sim_level for s in model.specs if s.sim_level}
    classes = model.backbone.config.num_classes

    def forward_loss(x, y):
        outputs: ForwardOutputs = model.forward(Tensor(x))
        loss, report = total_loss(outputs, y, cfg.weights, level_overrides or None)
        preds = {"teacher": (y, outputs.teacher_logits.data.argmax(axis=1), classes)}
        for ai, logits in outputs.exit_logits.items():
            preds[_exit_name(ai)] = (y, logits.data.argmax(axis=1), classes)
        return loss, report, preds

    log = TrainLog()
    _run_epochs(model, forward_loss, train_clips, dev_clips, cfg, trainable, log,
                phase="self-distill", sink=sink, eval_dev=eval_dev)
    return model, log


# -- baseline 1: truncated fine-tuning -------------------------------------------


class TruncatedClassifier(Module):
    """First k backbone layers plus a fresh head; deeper layers never exist here."""

    def __init__(self, backbone: Backbone, k: int, seed: int = 0):
        super().__init__()
        n = backbone.config.num_layers
        if not 1 <= k <= n:
            raise ContractError(f"truncation depth {k} outside 1..{n}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "config", backbone.config)
        object.__setattr__(self, "full_backbone", backbone)  # kept for freeze assertions
        rng = np.random.default_rng((seed, 555, k))
        self.head = Head(backbone.config.hidden, backbone.config.head_dims[0],
                         backbone.config.head_dims[1], rng, backbone.dtype)

    def forward(self, wave: Tensor, rng=None) -> tuple[Tensor, Tensor, Tensor]:
        states = self.full_backbone.forward_to_layer(wave, self.k, {self.k}, rng)
        pooled = T.mean_pool(states.states[self.k])
        logits, linear_act = self.head(pooled)
        return logits, linear_act, pooled

    def train(self, mode: bool = True):
        self.full_backbone.train(mode)
        self.head.train(mode)
        object.__setattr__(self, "training", mode)
        return self

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        full = self.full_backbone.parameters(prefix)
        for name, p in full.items():
            if name.startswith(f"{prefix}layer."):
                idx = int(name[len(prefix) + 6 :].split(".")[0])
                if idx >= self.k:
                    continue
            elif name.startswith(f"{prefix}head."):
                continue
            out[name] = p
        out.update(self.head.parameters(prefix + "head."))
        return out

    def arch_description(self) -> dict:
        return {"backbone": self.config.to_dict(), "truncated_at": self.k}

    def arch_hash(self) -> int:
        from . import checkpoint as ckpt

        return ckpt.arch_hash(self.arch_description())

    def save_checkpoint(self, path) -> None:
        from . import checkpoint as ckpt

        ckpt.write_tensor_file(path, {n: p.data for n, p in self.parameters().items()}, self.arch_hash())


def fine_tune_truncated(backbone: Backbone, k: int, data, cfg: TrainConfig,
                        sink=None, eval_dev: bool = True) -> tuple[TruncatedClassifier, TrainLog]:
    """Baseline: classifier from layers 1..k with a fresh head, trained with
    plain CE; layers above k are never executed."""
    train_clips, dev_clips = data
    model = TruncatedClassifier(backbone, k, seed=cfg.seed)
    trainable = model.parameters()
    if cfg.freeze_encoder:
        trainable = {kk: v for kk, v in trainable.items() if not kk.startswith("encoder.")}
    classes = model.config.num_classes

    def forward_loss(x, y):
        logits, _, _ = model.forward(Tensor(x))
        ce = cross_entropy(logits, y)
        report = LossReport(total=ce.item(), ce_teacher=ce.item())
        return ce, report, {"teacher": (y, logits.data.argmax(axis=1), classes)}

    log = TrainLog()
    _run_epochs(model, forward_loss, train_clips, dev_clips, cfg, trainable, log,
                phase=f"truncated@{k}", sink=sink, eval_dev=eval_dev)
    return model, log


# -- baseline 2: two-stage layer-wise distillation --------------------------------


class LayerwiseStudent(Module):
    """Shallow copy of the backbone prefix with per-target prediction heads
    (stage 1) and a classification head (stage 2)."""

    def __init__(self, teacher: Backbone, depth: int, predict_layers: list[int], seed: int = 0):
        super().__init__()
        cfg = teacher.config
        if not predict_layers:
            raise ConfigError("predict_layers must not be empty")
        if any(not 1 <= t <= cfg.num_layers for t in predict_layers):
            raise ContractError(f"predict layers {predict_layers} outside 1..{cfg.num_layers}")
        if not 1 <= depth <= cfg.num_layers:
            raise ContractError(f"student depth {depth} outside 1..{cfg.num_layers}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "predict_layers", sorted(predict_layers))
        object.__setattr__(self, "config", cfg)
        trunk_cfg = BackboneConfig(
            num_layers=max(2, depth), hidden=cfg.hidden, heads=cfg.heads, ff_dim=cfg.ff_dim,
            head_dims=cfg.head_dims, dropout=cfg.dropout, encoder_convs=cfg.encoder_convs,
        )
        trunk = Backbone(trunk_cfg, seed=seed, dtype=teacher.dtype)
        # the student trunk *is* the pretrained prefix of the teacher
        teacher_params = teacher.parameters()
        for name, p in trunk.parameters().items():
            if name.startswith("layer."):
                idx = int(name.split(".")[1])
                if idx >= depth:
                    continue
            if name.startswith("head."):
                continue  # stage-2 head starts fresh
            p.data = teacher_params[name].data.copy()
        self.trunk = trunk
        rng = np.random.default_rng((seed, 777))
        self.pred_heads = [Linear(cfg.hidden, cfg.hidden, rng, teacher.dtype) for _ in self.predict_layers]

    def encode(self, wave: Tensor) -> Tensor:
        states = self.trunk.forward_to_layer(wave, self.depth, {self.depth})
        return states.states[self.depth]

    def predictions(self, wave: Tensor) -> dict[int, Tensor]:
        frames = self.encode(wave)
        return {t: head(frames) for t, head in zip(self.predict_layers, self.pred_heads)}

    def classify(self, wave: Tensor) -> Tensor:
        pooled = T.mean_pool(self.encode(wave))
        logits, _ = self.trunk.head(pooled)
        return logits

    def forward(self, wave: Tensor, rng=None):
        logits = self.classify(wave)
        return logits, None, None

    def train(self, mode: bool = True):
        self.trunk.train(mode)
        for h in self.pred_heads:
            h.train(mode)
        object.__setattr__(self, "training", mode)
        return self

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.trunk.parameters(prefix).items():
            if name.startswith(f"{prefix}layer."):
                idx = int(name[len(prefix) + 6 :].split(".")[0])
                if idx >= self.depth:
                    continue
            out[name] = p
        for t, head in zip(self.predict_layers, self.pred_heads):
            out.update(head.parameters(f"{prefix}predict.{t}."))
        return out

    def trunk_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.parameters().items() if not n.startswith(("predict.", "head."))}

    def arch_description(self) -> dict:
        return {"backbone": self.config.to_dict(), "layerwise_depth": self.depth,
                "predict_layers": self.predict_layers}

    def arch_hash(self) -> int:
        from . import checkpoint as ckpt

        return ckpt.arch_hash(self.arch_description())

    def save_checkpoint(self, path) -> None:
        from . import checkpoint as ckpt

        ckpt.write_tensor_file(path, {n: p.data for n, p in self.parameters().items()}, self.arch_hash())


def layerwise_distill(
    teacher: Backbone,
    student_depth: int,
    predict_layers: list[int],
    data,
    cfg: TrainConfig,
    sink=None,
    eval_dev: bool = True,
) -> tuple[LayerwiseStudent, TrainLog]:
    """Two-stage baseline: (1) the frozen teacher's hidden layers are
    regressed by a shallow student with one head per target layer, under the
    configured similarity kind; (2) a fresh classification head is attached
    and the student fine-tunes with plain CE. Each stage runs cfg.epochs.

    The teacher is frozen, so its per-clip hidden targets are precomputed
    once and reused across stage-1 epochs (identical numbers, less work).
    """
    train_clips, dev_clips = data
    student = LayerwiseStudent(teacher, student_depth, predict_layers, seed=cfg.seed)
    targets = student.predict_layers
    classes = teacher.config.num_classes

    cache: dict[int, dict[int, np.ndarray]] = {}
    teacher.eval()
    with T.no_grad():
        for start in range(0, len(train_clips), cfg.batch_size):
            chunk = train_clips[start : start + cfg.batch_size]
            x, _ = as_arrays(chunk)
            states = teacher.forward_to_layer(Tensor(x), max(targets), set(targets))
            for j, clip in enumerate(chunk):
                cache[id(clip)] = {t: states.states[t].data[j] for t in targets}

    stage1 = {n: p for n, p in student.parameters().items() if not n.startswith("head.")}
    log = TrainLog()

    # stage 1: regression onto cached teacher states
    optimizer = Adam(stage1, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    for epoch in range(1, cfg.epochs + 1):
        start_t = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, epoch))
        student.train(True)
        total_sum = 0.0
        steps = 0
        for batch in batches(train_clips, cfg.batch_size, rng):
            x, _ = as_arrays(batch)
            predicted = student.predictions(Tensor(x))
            terms = []
            for t in targets:
                goal = Tensor(np.stack([cache[id(clip)][t] for clip in batch]))
                b, f, r = goal.shape
                pair_kind = cfg.weights.sim_kind
                pred2 = predicted[t].reshape(b * f, r)
                goal2 = goal.reshape(b * f, r)
                from .losses import _sim_pair

                terms.append(_sim_pair(pair_kind, goal2, pred2))
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            loss = loss * (1.0 / len(terms))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError("non-finite loss: first bad term is 'sim'")
            optimizer.zero_grads()
            T.backward(loss)
            if cfg.grad_clip is not None:
                clip_gradients(stage1, cfg.grad_clip)
            optimizer.step()
            total_sum += value
            steps += 1
        log.append(
            EpochRecord(
                phase="layerwise-stage1", epoch=epoch,
                loss=LossReport(total=total_sum / steps, sim=total_sum / steps),
                uar_train={}, uar_dev=None, seconds=time.perf_counter() - start_t,
            ),
            sink,
        )

    # stage 2: plain CE fine-tuning with the fresh classification head
    stage2 = {n: p for n, p in student.parameters().items() if not n.startswith("predict.")}

    def forward_loss(x, y):
        logits = student.classify(Tensor(x))
        ce = cross_entropy(logits, y)
        report = LossReport(total=ce.item(), ce_teacher=ce.item())
        return ce, report, {"teacher": (y, logits.data.argmax(axis=1), classes)}

    _run_epochs(student, forward_loss, train_clips, dev_clips, cfg, stage2, log,
                phase="layerwise-stage2", sink=sink, eval_dev=eval_dev)
    return student, log
