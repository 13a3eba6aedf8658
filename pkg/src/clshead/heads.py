"""Head architectures and the fine-tuning loop.

Two head kinds are built from exported features:

* proposed: the pretrained 1000-way classification layer followed by a
  freshly appended layer of width = target class count, ReLU-activated,
  both fine-tuned. Input is the classification layer's own input features.
* baseline: the classification layer is replaced by a fresh layer sized
  to the target classes; where the backbone has a 4096-wide FC layer
  (VGG19's fc7) that layer is fine-tuned too, otherwise only the
  replacement trains (ResNet18 has no such layer).

Training runs mini-batch SGD with step decay and optional early
stopping, and reports test accuracy (TA, percent) and training time
(TT, wall-clock seconds around the epoch loop only).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DivergedError, ValidationError
from .features import FeatureSet
from .layers import (
    AffineParams,
    Rng,
    affine_backward,
    affine_forward,
    init_uniform,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .optim import EarlyStopConfig, SgdConfig, early_stop_check, init_early_stop, sgd_step, step_lr
from .seeding import make_rng

log = logging.getLogger(__name__)

PROPOSED = "proposed"
BASELINE = "baseline"

# Fine-tuning recipes: appended-layer head at 1e-2 without momentum,
# replaced-layer head at 1e-3 with momentum 0.9; both decay 10x every
# 7 epochs, never any weight decay, 25-epoch budget.
PROPOSED_SGD = SgdConfig(base_lr=1e-2, momentum=0.0)
BASELINE_SGD = SgdConfig(base_lr=1e-3, momentum=0.9)


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    layer_dims: tuple[tuple[int, int], ...]
    layer_init: tuple[str, ...]  # "pretrained" | "uniform"
    activation_after: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.layer_dims)
        if not (n == len(self.layer_init) == len(self.activation_after)) or n == 0:
            raise ValidationError("layer descriptions must align and be non-empty")
        for (_, out_prev), (in_next, _) in zip(self.layer_dims, self.layer_dims[1:]):
            if out_prev != in_next:
                raise ValidationError(
                    f"layer dims do not chain: {self.layer_dims}"
                )
        if self.kind == PROPOSED:
            if self.layer_dims[-1][0] != 1000 or not self.activation_after[-1]:
                raise ValidationError(
                    "proposed head must append a ReLU-activated layer after the "
                    "1000-way classification layer"
                )
            if n < 2 or self.layer_init[-2] != "pretrained":
                raise ValidationError(
                    "proposed head must keep the pretrained classification layer"
                )
        elif self.kind == BASELINE:
            if self.layer_init[-1] != "uniform":
                raise ValidationError("baseline head must replace the final layer")
        else:
            raise ValidationError(f"unknown head kind {self.kind!r}")


@dataclass
class Head:
    spec: HeadSpec
    layers: list[AffineParams]

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].fan_out


@dataclass(frozen=True)
class TrainConfig:
    sgd: SgdConfig
    max_epochs: int = 25
    batch_size: int = 16
    early_stop: EarlyStopConfig | None = field(default_factory=EarlyStopConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")


def default_train_config(kind: str, *, seed: int = 0, threads: int = 1, **overrides) -> TrainConfig:
    sgd = PROPOSED_SGD if kind == PROPOSED else BASELINE_SGD
    if kind not in (PROPOSED, BASELINE):
        raise ValidationError(f"unknown head kind {kind!r}")
    return TrainConfig(sgd=sgd, seed=seed, threads=threads, **overrides)


@dataclass
class TrainResult:
    train_time_s: float
    epochs_run: int
    param_count: int
    loss_curve: list[float]
    val_loss_curve: list[float]
    lr_curve: list[float]
    best_epoch: int
    stopped_early: bool
    test_accuracy_pct: float | None = None


def build_proposed_head(
    pretrained_classifier: AffineParams, n_classes: int, rng: Rng
) -> Head:
    """Pretrained classification layer plus a fresh uniform-init layer of
    width n_classes, ReLU after the new layer, both trainable."""
    if pretrained_classifier.fan_out != 1000:
        raise ValidationError(
            f"pretrained classifier must be 1000-way, got fan_out="
            f"{pretrained_classifier.fan_out}"
        )
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    appended = init_uniform(1000, n_classes, rng)
    spec = HeadSpec(
        kind=PROPOSED,
        layer_dims=((pretrained_classifier.fan_in, 1000), (1000, n_classes)),
        layer_init=("pretrained", "uniform"),
        activation_after=(False, True),
    )
    return Head(spec, [pretrained_classifier.clone(), appended])


def build_baseline_head(
    pretrained_penultimate: AffineParams | None,
    feature_dim: int,
    n_classes: int,
    rng: Rng,
) -> Head:
    """Fresh classifier of width n_classes; fine-tunes the pretrained
    4096-wide FC layer too when the backbone has one."""
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    if feature_dim < 1:
        raise ValidationError(f"feature_dim must be >= 1, got {feature_dim}")
    if pretrained_penultimate is not None:
        if pretrained_penultimate.fan_in != feature_dim:
            raise ValidationError(
                f"penultimate layer expects {pretrained_penultimate.fan_in} "
                f"inputs but features have dim {feature_dim}"
            )
        hidden = pretrained_penultimate.fan_out
        spec = HeadSpec(
            kind=BASELINE,
            layer_dims=((feature_dim, hidden), (hidden, n_classes)),
            layer_init=("pretrained", "uniform"),
            activation_after=(True, False),
        )
        return Head(
            spec, [pretrained_penultimate.clone(), init_uniform(hidden, n_classes, rng)]
        )
    # No 4096-or-wider FC layer to fine-tune (ResNet18-style backbone):
    # only the replaced classification layer trains.
    log.info(
        "baseline head: backbone has no wide FC layer, training only the "
        "replaced %d-way classifier", n_classes,
    )
    spec = HeadSpec(
        kind=BASELINE,
        layer_dims=((feature_dim, n_classes),),
        layer_init=("uniform",),
        activation_after=(False,),
    )
    return Head(spec, [init_uniform(feature_dim, n_classes, rng)])


def count_params(head: Head) -> int:
    """Total weight + bias elements over the trainable layers."""
    return sum(p.n_params for p in head.layers)


def head_forward(head: Head, x: np.ndarray, *, want_cache: bool = False):
    """Scores after the final activation; optional per-layer cache for backward."""
    cache = [] if want_cache else None
    out = x
    for params, act in zip(head.layers, head.spec.activation_after):
        layer_in = out
        out = affine_forward(out, params)
        mask = None
        if act:
            out, mask = relu_forward(out)
        if want_cache:
            cache.append((layer_in, mask))
    return (out, cache) if want_cache else out


def head_loss_and_grads(head: Head, x: np.ndarray, labels: np.ndarray) -> float:
    """One forward/backward pass; gradients land in each layer's buffers."""
    scores, cache = head_forward(head, x, want_cache=True)
    loss, d = softmax_cross_entropy(scores, labels)
    for i in reversed(range(len(head.layers))):
        layer_in, mask = cache[i]
        if mask is not None:
            d = relu_backward(d, mask)
        d = affine_backward(layer_in, head.layers[i], d, need_dx=i > 0)
    return loss


def _dead_output_fraction(scores: np.ndarray) -> float:
    return float((scores <= 0).all(axis=0).mean())


def _validate_features(head: Head, fs: FeatureSet, what: str) -> None:
    if fs.n_images == 0:
        raise ValidationError(f"{what} feature set is empty")
    if fs.dim != head.input_dim:
        raise ValidationError(
            f"{what} features have dim {fs.dim}, head expects {head.input_dim}"
        )
    if fs.labels.max() >= head.n_classes:
        raise ValidationError(
            f"{what} labels reach {fs.labels.max()} but head has "
            f"{head.n_classes} classes"
        )


def _mean_loss(head: Head, fs: FeatureSet, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, fs.n_images, chunk):
        rows = slice(start, min(start + chunk, fs.n_images))
        scores = head_forward(head, fs.data[rows, 0, :])
        loss, _ = softmax_cross_entropy(scores, fs.labels[rows])
        total += loss * (rows.stop - rows.start)
    return total / fs.n_images


def train_head(head: Head, train: FeatureSet, val: FeatureSet, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD with step decay and early stopping.

    Deterministic for a fixed seed and thread count: the per-epoch order
    comes from the seeded generator, and the augmentation variant used
    for every image in epoch e is e mod V. TT covers the epoch loop only.
    Input feature sets are never mutated.
    """
    _validate_features(head, train, "train")
    _validate_features(head, val, "val")

    rng = make_rng(cfg.seed)
    n = train.n_images
    n_variants = train.n_variants
    es_state = init_early_stop(cfg.early_stop) if cfg.early_stop else None
    best_snapshot = None

    loss_curve: list[float] = []
    val_loss_curve: list[float] = []
    lr_curve: list[float] = []
    epochs_run = 0
    stopped = False
    first_batch = True

    with threadpool_limits(limits=cfg.threads):
        t0 = time.perf_counter()
        for epoch in range(cfg.max_epochs):
            lr = step_lr(cfg.sgd.base_lr, epoch, cfg.sgd.step_size, cfg.sgd.gamma)
            lr_curve.append(lr)
            order = rng.permutation(n)
            variant = epoch % n_variants
            epoch_loss = 0.0
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                x = train.data[batch, variant, :]
                y = train.labels[batch]
                for p in head.layers:
                    p.zero_grads()
                if first_batch and head.spec.kind == PROPOSED:
                    scores = head_forward(head, x)
                    dead = _dead_output_fraction(scores)
                    if dead > 0.5:
                        log.warning(
                            "%.0f%% of output neurons are dead on the first "
                            "batch; the appended layer's ReLU may stall training",
                            100 * dead,
                        )
                first_batch = False
                loss = head_loss_and_grads(head, x, y)
                if not math.isfinite(loss):
                    raise DivergedError(
                        f"non-finite training loss at epoch {epoch}", epoch=epoch
                    )
                for p in head.layers:
                    sgd_step(p, lr, cfg.sgd.momentum)
                epoch_loss += loss * len(batch)
            loss_curve.append(epoch_loss / n)

            val_loss = _mean_loss(head, val)
            if not math.isfinite(val_loss):
                raise DivergedError(
                    f"non-finite validation loss at epoch {epoch}", epoch=epoch
                )
            val_loss_curve.append(val_loss)
            epochs_run = epoch + 1

            if es_state is not None:
                es_state, stop = early_stop_check(es_state, val_loss)
                if es_state.best_epoch == epoch:
                    best_snapshot = [(p.weight.copy(), p.bias.copy()) for p in head.layers]
                if stop:
                    stopped = True
                    break
        train_time = time.perf_counter() - t0

    if stopped and best_snapshot is not None:
        for p, (w, b) in zip(head.layers, best_snapshot):
            np.copyto(p.weight, w)
            np.copyto(p.bias, b)

    return TrainResult(
        train_time_s=train_time,
        epochs_run=epochs_run,
        param_count=count_params(head),
        loss_curve=loss_curve,
        val_loss_curve=val_loss_curve,
        lr_curve=lr_curve,
        best_epoch=es_state.best_epoch if es_state is not None else epochs_run - 1,
        stopped_early=stopped,
    )


def evaluate(head: Head, test: FeatureSet, chunk: int = 1024) -> float:
    """Percent of argmax-correct predictions; ties go to the lowest class index.

    Scores are taken after the head's final activation, so the proposed
    head is judged on its post-ReLU outputs, same as in training.
    """
    _validate_features(head, test, "test")
    correct = 0
    for start in range(0, test.n_images, chunk):
        rows = slice(start, min(start + chunk, test.n_images))
        scores = head_forward(head, test.data[rows, 0, :])
        correct += int((scores.argmax(axis=1) == test.labels[rows]).sum())
    return 100.0 * correct / test.n_images
