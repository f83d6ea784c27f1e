"""Adam optimizer and per-stage learning-rate schedules.

Each training stage owns a fresh AdamState covering exactly its trainable
parameters.  Learning rates come from a StageSchedule evaluated per epoch:
the pretraining schedule halves every 20 epochs, refinement and fine-tuning
hold constant rates, and the from-scratch schedule runs the refinement rate
then switches to the fine-tuning rate at the stage boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PRETRAIN_LR = 1e-3
PRETRAIN_HALVE_EVERY = 20
PRETRAIN_EPOCHS = 80
REFINE_LR = 1e-3
REFINE_EPOCHS = 100
FINETUNE_LR = 5e-4
FINETUNE_EPOCHS = 100


@dataclass(frozen=True)
class StageSchedule:
    name: str
    epochs: int
    base_lr: float
    halve_every: int = 0  # 0 disables step decay
    switch_epoch: Optional[int] = None
    switch_lr: Optional[float] = None

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch < self.epochs:
            raise ValueError(f"epoch {epoch} outside schedule of {self.epochs} epochs")
        if self.switch_epoch is not None and epoch >= self.switch_epoch:
            return self.switch_lr
        if self.halve_every:
            return self.base_lr * 0.5 ** (epoch // self.halve_every)
        return self.base_lr


def pretrain_schedule(epochs: int = PRETRAIN_EPOCHS,
                      lr: float = PRETRAIN_LR) -> StageSchedule:
    return StageSchedule("pretrain", epochs, lr,
                         halve_every=PRETRAIN_HALVE_EVERY)


def refine_schedule(epochs: int = REFINE_EPOCHS,
                    lr: float = REFINE_LR) -> StageSchedule:
    return StageSchedule("refine", epochs, lr)


def finetune_schedule(epochs: int = FINETUNE_EPOCHS,
                      lr: float = FINETUNE_LR) -> StageSchedule:
    return StageSchedule("finetune", epochs, lr)


def scratch_schedule(refine_epochs: int = REFINE_EPOCHS,
                     finetune_epochs: int = FINETUNE_EPOCHS,
                     refine_lr: float = REFINE_LR,
                     finetune_lr: float = FINETUNE_LR) -> StageSchedule:
    """Equal-budget baseline: refine-rate phase, then fine-tune-rate phase."""
    return StageSchedule("scratch", refine_epochs + finetune_epochs, refine_lr,
                         switch_epoch=refine_epochs, switch_lr=finetune_lr)


class AdamState:
    """Adam moments for a fixed parameter set; one instance per stage.

    step() applies the bias-corrected update
    p <- p - lr * mhat / (sqrt(vhat) + eps)
    and clears every gradient afterwards.  A parameter whose grad is None
    (untouched by the recorded loss) is treated as having a zero gradient so
    its moments still decay.
    """

    def __init__(self, named_params, weight_decay: float = 0.0,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in optimizer state")
        self.m = {n: np.zeros_like(t.data) for n, t in self.named_params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.named_params}
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        for _, p in self.named_params:
            p.grad = None

    def param_names(self):
        return [n for n, _ in self.named_params]


def clip_check(named_params) -> None:
    """Raise if any gradient is non-finite; diverged runs fail loudly."""
    for name, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
