"""SGD with momentum, step learning-rate decay, and early stopping.

The two fine-tuning recipes share this machinery: the appended-layer
recipe runs SGD at 1e-2 with no momentum, the replaced-layer recipe at
1e-3 with momentum 0.9; both decay the rate by 10x every 7 epochs and
never use weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ValidationError
from .layers import AffineParams


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0  # fixed at 0, kept explicit for the record
    step_size: int = 7
    gamma: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay != 0.0:
            raise ValidationError("weight_decay is fixed at 0 in this engine")
        if self.step_size < 1:
            raise ValidationError(f"step_size must be >= 1, got {self.step_size}")
        if self.gamma <= 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")


def sgd_step(params: AffineParams, lr: float, momentum: float = 0.0) -> AffineParams:
    """v <- momentum * v + grad; param <- param - lr * v (in place).

    With momentum = 0 this is exactly the textbook param - lr * grad.
    """
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
    for vel, grad, param in (
        (params.vel_weight, params.grad_weight, params.weight),
        (params.vel_bias, params.grad_bias, params.bias),
    ):
        vel *= momentum
        vel += grad
        param -= lr * vel
    return params


def step_lr(base_lr: float, epoch: int, step_size: int, gamma: float) -> float:
    """base_lr * gamma ** floor(epoch / step_size), epoch 0-based."""
    if step_size < 1:
        raise ValidationError(f"step_size must be >= 1, got {step_size}")
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if base_lr <= 0:
        raise ValidationError(f"base_lr must be positive, got {base_lr}")
    return base_lr * gamma ** (epoch // step_size)


@dataclass(frozen=True)
class EarlyStopConfig:
    """Stop once validation loss has not improved by min_delta for more
    than `patience` consecutive epochs; best-epoch weights are restored."""

    patience: int = 3
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.patience < 0:
            raise ValidationError(f"patience must be >= 0, got {self.patience}")
        if self.min_delta < 0:
            raise ValidationError(f"min_delta must be >= 0, got {self.min_delta}")


@dataclass(frozen=True)
class EarlyStopState:
    patience: int
    min_delta: float
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    n_evals: int = 0


def init_early_stop(cfg: EarlyStopConfig) -> EarlyStopState:
    return EarlyStopState(patience=cfg.patience, min_delta=cfg.min_delta)


def early_stop_check(
    state: EarlyStopState, val_loss: float
) -> tuple[EarlyStopState, bool]:
    """Feed one validation loss; returns (updated state, stop?).

    An improvement is best_val_loss - val_loss > min_delta. Stop is
    signalled only after the counter exceeds patience, i.e. never before
    patience + 1 consecutive non-improving epochs.
    """
    if not math.isfinite(val_loss):
        raise ValidationError(f"val_loss must be finite, got {val_loss}")
    epoch = state.n_evals
    if state.best_val_loss - val_loss > state.min_delta:
        new = replace(
            state,
            best_val_loss=val_loss,
            best_epoch=epoch,
            epochs_since_improvement=0,
            n_evals=epoch + 1,
        )
        return new, False
    count = state.epochs_since_improvement + 1
    new = replace(state, epochs_since_improvement=count, n_evals=epoch + 1)
    return new, count > state.patience
