"""Two-stage incremental training with feature distillation and replay.

Each incremental step starts from the previous model, trains everything on
new data plus stored exemplars (cross entropy + adaptively weighted feature
distillation against the frozen old model), herds exemplars for the new
classes with the stage-1 model, then finetunes the classifier alone on the
class-balanced exemplar set. The first step is plain supervised training.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_batch, hflip, one_hot
from .data import LabeledDataset, ProtocolConfig, build_protocol
from .errors import ConfigError, TrainingDiverged
from .memory import ExemplarStore, herding_select, per_class_budget
from .metrics import StepReport, evaluate, old_to_new_bias_rate
from .model import (ModelSpec, ModelState, clamp_temperature, clone_state,
                    cosine_logits, cosine_scores, expand_classifier,
                    forward_features, init_model)
from .optim import AdamW, ParamGroup, ScheduleConfig, lr_at_epoch, zero_grads
from .rng import SplitMix64
from .tensor import Tensor

LOG_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass
class TrainSettings:
    """Everything about optimization that is not part of the protocol."""

    batch_size: int = 64
    backbone_lr: float = 8e-3             # at the 512 reference batch
    classifier_lr_multiplier: float = 10.0
    weight_decay: float = 0.24
    warmup_epochs: int = 2
    min_lr: float = 1e-5
    lambda_base: float = 3.0
    epochs_finetune: int = 20
    finetune_lr_scale: float = 0.1
    balanced_finetune: bool = True        # the bias-correction stage switch
    grad_clip: float = 0.0
    eta_init: float = 10.0
    margin_ranking: bool = False
    margin: float = 0.5
    margin_top_k: int = 2
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.margin_ranking and (self.augment.mixup or self.augment.cutmix):
            raise ConfigError(
                "margin_ranking requires hard labels and conflicts with "
                "augment.mixup/augment.cutmix; disable one side")
        if self.lambda_base <= 0:
            raise ConfigError("lambda_base must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class StepContext:
    """One incremental step's inputs; the old snapshot never mutates."""

    step: int
    old_class_ids: list[int]
    new_class_ids: list[int]
    old_state: ModelState | None
    state: ModelState
    store: ExemplarStore
    new_images: np.ndarray
    new_labels: np.ndarray
    label_map: np.ndarray              # original class id -> model index
    settings: TrainSettings
    epochs_stage1: int
    stream: SplitMix64

    def __post_init__(self):
        if set(self.old_class_ids) & set(self.new_class_ids):
            raise ConfigError("old and new class sets overlap")


@dataclass
class StageTrace:
    loss_trace: list[float]
    eta_trace: list[float]
    first_distill: float | None = None


# ---------------------------------------------------------------------------
# losses

def adaptive_lambda(lambda_base: float, n_old: int, n_new: int) -> float:
    """lambda_base * sqrt(n_old / n_new); zero before any old classes exist."""
    if n_new < 1:
        raise ConfigError("n_new must be >= 1")
    if n_old == 0:
        return 0.0
    return lambda_base * math.sqrt(n_old / n_new)


def distill_loss(f_old: Tensor, f_new: Tensor) -> Tensor:
    """Mean over the batch of 1 - cos(old feature, new feature).

    Gradient reaches f_new only; pass the old features as a constant tensor.
    """
    for name, t in (("old", f_old), ("new", f_new)):
        zero = int((np.linalg.norm(t.data, axis=-1) < NORM_EPS).sum())
        if zero:
            warnings.warn(f"distill_loss: {zero} zero-norm {name} feature row(s)",
                          RuntimeWarning)
    cos = T.sum_(T.mul(T.l2_normalize(f_old, axis=-1, eps=NORM_EPS),
                       T.l2_normalize(f_new, axis=-1, eps=NORM_EPS)), axis=1)
    return T.mean(1.0 - cos)


def cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean soft-label cross entropy; log is guarded against underflow."""
    return T.mean(T.neg(T.sum_(T.mul(Tensor(targets), T.log(probs + LOG_EPS)),
                               axis=1)))


def margin_ranking_loss(state: ModelState, features: Tensor,
                        hard_labels: np.ndarray, n_old: int,
                        margin: float, top_k: int) -> Tensor:
    """Hinge on the top-K new-class cosine scores for old-class samples."""
    labels = np.asarray(hard_labels, dtype=np.int64)
    rows = np.nonzero(labels < n_old)[0]
    n_new = state.spec.num_classes - n_old
    if len(rows) == 0 or n_new < 1:
        return Tensor(0.0)
    k = min(top_k, n_new)
    scores = cosine_scores(state, features)
    sel = T.take(scores, rows, axis=0)
    y_score = T.take_along_axis(sel, labels[rows][:, None], axis=1)
    new_block = sel[:, n_old:]
    topk = np.argsort(-new_block.data, axis=1)[:, :k]
    negatives = T.take_along_axis(new_block, topk, axis=1)
    hinge = T.relu(margin - y_score + negatives)
    return T.mean(T.sum_(hinge, axis=1))


def total_loss(ctx: StepContext, images: Tensor, targets: np.ndarray,
               hard_labels: np.ndarray | None = None,
               f_old: Tensor | None = None,
               lam: float = 0.0) -> tuple[Tensor, float | None]:
    """Stage-1 objective; returns (loss, distill value or None)."""
    feats = forward_features(ctx.state, images, mode="train")
    probs = cosine_logits(ctx.state, feats)
    loss = cross_entropy(probs, targets)
    if ctx.settings.margin_ranking and hard_labels is not None:
        mr = margin_ranking_loss(ctx.state, feats, hard_labels,
                                 len(ctx.old_class_ids), ctx.settings.margin,
                                 ctx.settings.margin_top_k)
        loss = loss + mr
    dis_value = None
    if f_old is not None and lam > 0.0:
        dis = distill_loss(f_old, feats)
        dis_value = dis.item()
        loss = loss + lam * dis
    return loss, dis_value


# ---------------------------------------------------------------------------
# parameter groups

BACKBONE_GROUPS = ("backbone", "backbone_nodecay")
CLASSIFIER_GROUPS = ("classifier", "classifier_nodecay")


def _is_nodecay(name: str) -> bool:
    # normalization gains and the temperature are exempt from weight decay
    return name.endswith("gain") or name.endswith("temperature")


def build_param_groups(state: ModelState, settings: TrainSettings,
                       freeze_backbone: bool = False) -> list[ParamGroup]:
    names = state.named_parameters()
    backbone = [n for n in names if n.startswith("backbone.")]
    classifier = [n for n in names if n.startswith("classifier.")]
    clf_lr = settings.backbone_lr * settings.classifier_lr_multiplier
    return [
        ParamGroup("backbone", [n for n in backbone if not _is_nodecay(n)],
                   base_lr=settings.backbone_lr,
                   weight_decay=settings.weight_decay, frozen=freeze_backbone),
        ParamGroup("backbone_nodecay", [n for n in backbone if _is_nodecay(n)],
                   base_lr=settings.backbone_lr, weight_decay=0.0,
                   frozen=freeze_backbone),
        ParamGroup("classifier", [n for n in classifier if not _is_nodecay(n)],
                   base_lr=clf_lr, weight_decay=settings.weight_decay),
        ParamGroup("classifier_nodecay", [n for n in classifier if _is_nodecay(n)],
                   base_lr=clf_lr, weight_decay=0.0),
    ]


def _schedule(groups: list[ParamGroup], settings: TrainSettings,
              total_epochs: int, warmup: int, batch_size: int) -> ScheduleConfig:
    peaks = {g.name: g.base_lr for g in groups}
    scaled = [lr * batch_size / 512 for lr in peaks.values()]
    return ScheduleConfig(peak_lr=peaks, total_epochs=total_epochs,
                          warmup_epochs=min(warmup, max(total_epochs - 1, 0)),
                          min_lr=min([settings.min_lr] + scaled),
                          batch_size=batch_size)


# ---------------------------------------------------------------------------
# training stages

def _training_arrays(ctx: StepContext) -> tuple[np.ndarray, np.ndarray]:
    """Replay exemplars concatenated with the new classes' training data."""
    if ctx.store.class_ids():
        ex_images, ex_labels = ctx.store.as_arrays()
        images = np.concatenate([ex_images, ctx.new_images], axis=0)
        labels = np.concatenate([ex_labels, ctx.new_labels], axis=0)
    else:
        images, labels = ctx.new_images, ctx.new_labels
    return images, ctx.label_map[labels]


def _epoch_batches(n: int, batch_size: int, order_stream: SplitMix64):
    perm = order_stream.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def run_stage1(ctx: StepContext) -> StageTrace:
    """Train all parameters on replay + new data; returns per-epoch traces."""
    settings = ctx.settings
    images_u8, labels = _training_arrays(ctx)
    n = len(labels)
    num_classes = ctx.state.spec.num_classes
    lam = adaptive_lambda(settings.lambda_base, len(ctx.old_class_ids),
                          len(ctx.new_class_ids))

    groups = build_param_groups(ctx.state, settings)
    params = ctx.state.named_parameters()
    opt = AdamW(params, groups, grad_clip=settings.grad_clip)
    sched = _schedule(groups, settings, ctx.epochs_stage1,
                      settings.warmup_epochs, settings.batch_size)
    augment_stream = ctx.stream.child("augment")
    order_stream = ctx.stream.child("order")

    trace = StageTrace(loss_trace=[], eta_trace=[])
    for epoch in range(ctx.epochs_stage1):
        lrs = {g.name: lr_at_epoch(sched, g.name, epoch) for g in groups}
        epoch_losses = []
        for batch_no, idx in enumerate(_epoch_batches(n, settings.batch_size,
                                                      order_stream)):
            raw = images_u8[idx].astype(np.float64) / 255.0
            batch = augment_batch(raw, labels[idx], num_classes,
                                  settings.augment, augment_stream)
            f_old = None
            if ctx.old_state is not None and lam > 0.0:
                # constant: computed outside the tape, in eval mode
                f_old = Tensor(forward_features(ctx.old_state,
                                                Tensor(batch.images),
                                                mode="eval").data)
            with T.Tape() as tape:
                loss, dis_value = total_loss(ctx, Tensor(batch.images),
                                             batch.targets,
                                             hard_labels=labels[idx],
                                             f_old=f_old, lam=lam)
            if epoch == 0 and batch_no == 0:
                trace.first_distill = dis_value
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at step {ctx.step}, epoch {epoch}, "
                    f"batch {batch_no}", step=ctx.step, epoch=epoch,
                    batch=batch_no)
            T.backward(tape, loss)
            opt.step(lrs)
            zero_grads(params)
            clamp_temperature(ctx.state)
            epoch_losses.append(value)
        trace.loss_trace.append(float(np.mean(epoch_losses)))
        trace.eta_trace.append(ctx.state.temperature)
    return trace


def run_balanced_finetune(ctx: StepContext) -> StageTrace:
    """Classifier-only training on the balanced exemplar set (CE only).

    The backbone groups are frozen and features are extracted in eval mode,
    so backbone parameters and batch-norm buffers stay bit-identical.
    """
    settings = ctx.settings
    counts = ctx.store.counts()
    if len(set(counts.values())) > 1:
        raise ConfigError(
            f"balanced finetune needs equal per-class exemplar counts, got {counts}")
    images_u8, orig_labels = ctx.store.as_arrays()
    labels = ctx.label_map[orig_labels]
    n = len(labels)
    num_classes = ctx.state.spec.num_classes

    finetune_settings = replace(settings,
                                backbone_lr=settings.backbone_lr *
                                settings.finetune_lr_scale)
    groups = build_param_groups(ctx.state, finetune_settings,
                                freeze_backbone=True)
    params = ctx.state.named_parameters()
    opt = AdamW(params, groups, grad_clip=settings.grad_clip)
    sched = _schedule(groups, settings, settings.epochs_finetune, 0,
                      settings.batch_size)
    flip_stream = ctx.stream.child("finetune_flip")
    order_stream = ctx.stream.child("finetune_order")

    trace = StageTrace(loss_trace=[], eta_trace=[])
    for epoch in range(settings.epochs_finetune):
        lrs = {g.name: lr_at_epoch(sched, g.name, epoch) for g in groups}
        epoch_losses = []
        for batch_no, idx in enumerate(_epoch_batches(n, settings.batch_size,
                                                      order_stream)):
            imgs = images_u8[idx].astype(np.float64) / 255.0
            if settings.augment.hflip:
                imgs = hflip(imgs, flip_stream.uniforms(len(idx)) < 0.5)
            targets = one_hot(labels[idx], num_classes,
                              smoothing=settings.augment.label_smoothing)
            with T.Tape() as tape:
                feats = forward_features(ctx.state, Tensor(imgs), mode="eval")
                probs = cosine_logits(ctx.state, feats)
                loss = cross_entropy(probs, targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite finetune loss at step {ctx.step}, epoch "
                    f"{epoch}, batch {batch_no}", step=ctx.step, epoch=epoch,
                    batch=batch_no)
            T.backward(tape, loss)
            opt.step(lrs)
            zero_grads(params)
            clamp_temperature(ctx.state)
            epoch_losses.append(value)
        trace.loss_trace.append(float(np.mean(epoch_losses)))
        trace.eta_trace.append(ctx.state.temperature)
    return trace


def construct_exemplars(state: ModelState, dataset: LabeledDataset,
                        class_ids, budget: int,
                        batch_size: int = 512) -> dict[int, np.ndarray]:
    """Herd each class's training images with the current (stage-1) model."""
    out: dict[int, np.ndarray] = {}
    for cid in class_ids:
        idx = dataset.class_indices("train", int(cid))
        feats = []
        for start in range(0, len(idx), batch_size):
            chunk = dataset.images[idx[start:start + batch_size]]
            chunk = chunk.astype(np.float64) / 255.0
            feats.append(forward_features(state, Tensor(chunk), mode="eval").data)
        f = np.concatenate(feats, axis=0)
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), NORM_EPS)
        order = herding_select(f, budget)
        out[int(cid)] = dataset.images[idx[order]]
    return out


# ---------------------------------------------------------------------------
# protocol runner

def run_protocol(protocol: ProtocolConfig, dataset: LabeledDataset,
                 settings: TrainSettings, model_spec: ModelSpec, seed: int,
                 step_callback=None) -> list[StepReport]:
    """Execute the full incremental protocol; one StepReport per step."""
    if protocol.total_classes > dataset.num_classes:
        raise ConfigError(
            f"protocol needs {protocol.total_classes} classes, dataset has "
            f"{dataset.num_classes}")
    plan = build_protocol(protocol)
    label_map = np.full(dataset.num_classes, -1, dtype=np.int64)
    for model_idx, cid in enumerate(plan.class_order):
        label_map[cid] = model_idx

    root = SplitMix64(seed)
    spec = replace(model_spec, num_classes=protocol.initial_classes)
    state = init_model(spec, root.child("model"), eta_init=settings.eta_init)
    store = ExemplarStore(protocol.budget)
    reports: list[StepReport] = []

    for t, class_ids in enumerate(plan.steps, start=1):
        started = time.perf_counter()
        step_stream = root.child(f"step{t}")
        new_images, new_labels = dataset.subset("train", class_ids)
        old_ids = [c for step in plan.steps[:t - 1] for c in step]
        n_seen = plan.seen_counts[t - 1]

        try:
            if t == 1:
                old_state = None
                epochs = protocol.epochs_initial
            else:
                old_state = clone_state(state, requires_grad=False)
                state = expand_classifier(state, protocol.increment, step_stream)
                epochs = protocol.epochs_step
            ctx = StepContext(step=t, old_class_ids=old_ids,
                              new_class_ids=list(class_ids),
                              old_state=old_state, state=state, store=store,
                              new_images=new_images, new_labels=new_labels,
                              label_map=label_map, settings=settings,
                              epochs_stage1=epochs, stream=step_stream)
            stage1 = run_stage1(ctx)
            budget = per_class_budget(protocol.budget, n_seen)
            store.add_and_trim(
                construct_exemplars(state, dataset, class_ids, budget), n_seen)
            finetune = StageTrace(loss_trace=[], eta_trace=[])
            if t > 1 and settings.balanced_finetune:
                finetune = run_balanced_finetune(ctx)
        except TrainingDiverged as exc:
            exc.step = exc.step if exc.step is not None else t
            raise

        seen_ids = plan.class_order[:n_seen]
        test_images, test_labels = dataset.subset("test", seen_ids)
        top1, cm = evaluate(state, test_images, label_map[test_labels], n_seen)
        report = StepReport(
            step=t, n_classes=n_seen, top1=top1, confusion=cm,
            bias_rate=old_to_new_bias_rate(cm, len(old_ids)),
            eta=state.temperature, loss_trace=stage1.loss_trace,
            eta_trace=stage1.eta_trace,
            finetune_loss_trace=finetune.loss_trace,
            first_distill=stage1.first_distill,
            wall_clock=time.perf_counter() - started)
        reports.append(report)
        if step_callback is not None:
            step_callback(report, state, store)
    return reports
