"""Learned flow prior over shape codes."""
from __future__ import annotations

import numpy as np

from .autodiff import Module, Tensor, no_grad
from .exceptions import ConfigurationError
from .flows import ConditionalGaussianBase, FlowStack
from .encoder import posterior_entropy


class PriorFlow(Module):
    """Coupling flow ``g`` over ``R^L`` with a standard normal base.

    With ``cond_dim`` set, every layer is FiLM-conditioned on an external
    condition vector (e.g. an image embedding).  Zero-initialized output
    layers make a fresh prior exactly ``N(0, I)``.
    """

    def __init__(self, latent_dim, rng, n_layers=14, hidden=128, cond_dim=None,
                 cond_width=None, batchnorm=False):
        super().__init__()
        self.latent_dim = latent_dim
        self.flow = FlowStack(latent_dim, n_layers, hidden, rng, cond_dim=cond_dim,
                              cond_width=cond_width, batchnorm=batchnorm)
        self.base = ConditionalGaussianBase(latent_dim, rng)

    @property
    def conditional(self):
        return self.flow.conditional

    def log_prob(self, z, condition=None):
        y, logdet = self.flow.inverse(z, condition)
        return self.base.log_prob(y) + logdet

    def manifest(self):
        return self.flow.manifest()


def prior_loss(prior, post, z_sample, condition=None):
    """Per-shape ``-H(q) - log p_prior(z)``, a one-sample KL estimate."""
    return -posterior_entropy(post) - prior.log_prob(z_sample, condition)


def prior_sample(prior, n, rng, condition=None):
    """``z = g(eps)``, ``eps ~ N(0, I)``; returns ``ndarray[n, L]``.

    ``condition`` is either one vector (shared by all draws) or ``[n, C]``.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if condition is not None and not prior.conditional:
        raise ConfigurationError("condition given to an unconditional prior")
    if condition is None and prior.conditional:
        raise ConfigurationError("conditional prior needs a condition")
    eps = rng.standard_normal((n, prior.latent_dim))
    cond = None
    if condition is not None:
        cond = np.asarray(condition, dtype=float)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0])).copy()
    with no_grad():
        z, _ = prior.flow.forward(Tensor(eps), cond)
    return z.data
