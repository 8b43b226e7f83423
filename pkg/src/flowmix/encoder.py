"""PointNet-style set encoder producing a diagonal Gaussian over shape codes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, exp, swish, tanh
from .autodiff.nn import BatchNorm1d
from .exceptions import InputError
from .flows import LOG_2PI

LOGVAR_CLAMP = 10.0


@dataclass
class ShapePosterior:
    """``N(mu, diag(exp(logvar)))``; fields are tensors of shape ``[..., L]``."""

    mu: Tensor
    logvar: Tensor

    @property
    def dim(self):
        return self.mu.shape[-1]


class SetEncoder(Module):
    """Shared per-point MLP, max-pool over points, then an MLP head.

    Each per-point layer is linear, batchnorm (over every point of every
    shape in the batch) and swish.  The head emits the posterior mean and a
    log-variance softly clamped to ``(-10, 10)``.

    Args:
        d: Point dimensionality.
        latent_dim: Size ``L`` of the shape code.
        widths: Per-point layer widths; the last one is the pooled feature
            size.
        head_width: Hidden width of the head MLP.
    """

    def __init__(self, d, latent_dim, rng, widths=(64, 128, 256, 512), head_width=512):
        super().__init__()
        self.d, self.latent_dim = d, latent_dim
        self.widths, self.head_width = tuple(widths), head_width
        dims = (d,) + self.widths
        self.point_layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.point_norms = [BatchNorm1d(b) for b in self.widths]
        self.head_in = Linear(self.widths[-1], head_width, rng)
        self.head_mu = Linear(head_width, latent_dim, rng)
        self.head_logvar = Linear(head_width, latent_dim, rng)

    def forward(self, X):
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.ndim == 2:
            X = X.expand_dims(0)
        if X.shape[-2] < 1:
            raise InputError("cannot encode an empty point cloud")
        h = X
        for lin, bn in zip(self.point_layers, self.point_norms):
            h = swish(bn(lin(h)))
        pooled = h.max(axis=-2)
        g = swish(self.head_in(pooled))
        mu = self.head_mu(g)
        logvar = tanh(self.head_logvar(g) * (1.0 / LOGVAR_CLAMP)) * LOGVAR_CLAMP
        return ShapePosterior(mu, logvar)


def encode(enc, X) -> ShapePosterior:
    """Encode one cloud ``[N, d]`` or a batch ``[B, N, d]``."""
    arr = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=float)
    if arr.size == 0 or arr.shape[-2] == 0:
        raise InputError("cannot encode an empty point cloud")
    return enc(X)


def reparam_sample(post, rng, eps=None):
    """``z = mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``; differentiable."""
    if eps is None:
        eps = rng.standard_normal(post.mu.shape)
    return post.mu + exp(post.logvar * 0.5) * eps


def posterior_entropy(post):
    """Differential entropy ``L/2 (1 + log 2 pi) + 1/2 sum logvar`` per row."""
    L = post.mu.shape[-1]
    return post.logvar.sum(axis=-1) * 0.5 + 0.5 * L * (1.0 + LOG_2PI)
