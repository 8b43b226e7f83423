"""Adam, gradient clipping and the step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DimensionError


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (ndarrays).

    ``None`` gradients are treated as zero. ``state`` is created lazily on
    the first call.

    Raises:
        DimensionError: a gradient or moment does not match its parameter.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise DimensionError("params, grads and optimizer state have different lengths")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise DimensionError(f"optimizer state {m.shape} != param {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} != param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adam over a list of :class:`~flowmix.autodiff.nn.Parameter`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        arrays = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        adam_step(arrays, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return {"step": self.state.step, "m": self.state.m, "v": self.state.v}


def clip_grad_norm(params, max_norm):
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def step_decay_lr(lr0, epoch, decay_epochs, factor=4.0):
    """``lr0 / factor**k`` with ``k`` the number of decay epochs already reached."""
    passed = sum(1 for e in decay_epochs if epoch >= e)
    return lr0 / factor**passed
