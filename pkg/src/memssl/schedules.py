"""Schedule evaluators for pretraining and fine-tuning.

Pretraining uses cosine decay for learning rate and EMA momentum, a cosine
ramp for weight decay, a constant student temperature, and a linear ramp for
the teacher temperature over the first ``ramp_epochs`` epochs. Fine-tuning
uses a step-linear warm-up followed by cosine annealing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


def cosine_value(step: int, total: int, start: float, end: float) -> float:
    """end + 0.5*(start-end)*(1 + cos(pi*step/total)); endpoints are exact."""
    if total <= 0:
        raise ValueError(f"total must be positive, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step == 0:
        return start
    if step == total:
        return end
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / total))


def linear_ramp(epoch: int, ramp_epochs: int, start: float, end: float) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if ramp_epochs <= 0 or epoch >= ramp_epochs:
        return end
    return start + (end - start) * (epoch / ramp_epochs)


@dataclass(frozen=True)
class ScheduleSet:
    """All pretraining schedules, evaluated by step (lr, wd, momentum) or
    epoch (teacher temperature)."""

    total_steps: int
    lr_start: float = 1e-5
    lr_end: float = 1e-6
    wd_start: float = 0.04
    wd_end: float = 0.4
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_ramp_epochs: int = 30
    ema_start: float = 0.996
    ema_end: float = 1.0

    def lr(self, step: int) -> float:
        return cosine_value(step, self.total_steps, self.lr_start, self.lr_end)

    def wd(self, step: int) -> float:
        return cosine_value(step, self.total_steps, self.wd_start, self.wd_end)

    def teacher_temperature(self, epoch: int) -> float:
        return linear_ramp(epoch, self.tau_t_ramp_epochs, self.tau_t_start, self.tau_t_end)

    def ema_momentum(self, step: int) -> float:
        return cosine_value(step, self.total_steps, self.ema_start, self.ema_end)


@dataclass(frozen=True)
class WarmupCosineSchedule:
    """Per-step fine-tuning LR: linear 0 -> peak over warmup_steps, then
    cosine peak -> end over the remaining steps."""

    total_steps: int
    warmup_steps: int
    peak: float
    end: float

    def lr(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.peak * (step / self.warmup_steps)
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.end
        return cosine_value(step - self.warmup_steps, span, self.peak, self.end)
