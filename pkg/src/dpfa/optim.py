"""Adam with a staircase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    decay: float = 0.7
    decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay interval must be >= 1 epoch, got {self.decay_every}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def scalars(self):
        return dict(lr=self.lr, decay=self.decay, decay_every=self.decay_every,
                    beta1=self.beta1, beta2=self.beta2, eps=self.eps, step=self.step)


def lr_at(epoch, state: OptimizerState):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return state.lr * state.decay ** (epoch // state.decay_every)


def adam_step(params: dict[str, Tensor], grads: dict, state: OptimizerState, lr=None):
    """One bias-corrected Adam update, in place.

    Parameters whose gradient is ``None`` (unused this step) are left alone,
    moments included.  Any non-finite gradient aborts before anything moves.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
