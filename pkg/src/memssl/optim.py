"""AdamW with decoupled weight decay over named parameter sets.

Parameter sets are plain ``dict[str, Tensor]``; iteration order is always
lexicographic on the name so every consumer (optimizer, EMA, checkpointing)
sees the same deterministic sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sorted_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(params)


@dataclass
class OptimizerState:
    """First/second moments per parameter plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(
        cls,
        params: dict[str, Tensor],
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> None:
    """One in-place AdamW update; decay is applied separately from the Adam
    direction (theta -= lr*wd*theta), both from the pre-step parameters."""
    if lr < 0 or weight_decay < 0:
        raise ValueError(f"lr and weight_decay must be >= 0, got {lr}, {weight_decay}")
    state.t += 1
    for name in sorted_names(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        K.adamw_update(
            p.data,
            g,
            state.m[name],
            state.v[name],
            state.t,
            float(lr),
            state.beta1,
            state.beta2,
            state.eps,
            float(weight_decay),
        )
