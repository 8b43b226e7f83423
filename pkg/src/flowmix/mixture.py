"""Mixture of conditional coupling flows sharing one Gaussian base.

``p(x|z) = sum_i w_i(z) N(f_i^{-1}(x); mu(z), Sigma(z)) |det J_{f_i^{-1}}(x; z)|``
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Parameter, Tensor, concat, log_softmax, logsumexp, no_grad, swish
from .autodiff.nn import count_linear
from .exceptions import ConfigurationError, InputError, NumericError, SizingError
from .flows import ConditionalGaussianBase, FlowStack

WEIGHT_HIDDEN = 64


class MixtureFlowDecoder(Module):
    """``m`` independent coupling flows, a weight network and a shared base.

    Args:
        d: Point dimensionality.
        m: Number of mixture components.
        n_layers: Coupling layers per flow.
        hidden: Hidden width of every coupling net.
        rng: Generator used for initialization.
        cond_dim: Size of the shape latent ``z``; ``None`` gives an
            unconditional mixture whose weights are free logits.
        cond_width: FiLM feature width (defaults to ``hidden``).
        base_hidden: Hidden width of the base mean / log-variance heads.
        batchnorm: Batch normalization inside coupling nets.

    Attributes:
        warmup: While ``True`` the weights are fixed to ``1/m`` and the weight
            network is left out of the graph, so it receives no gradient.
    """

    def __init__(self, d, m, n_layers, hidden, rng, cond_dim=None, cond_width=None,
                 base_hidden=64, batchnorm=True):
        super().__init__()
        if m < 1:
            raise ConfigurationError("m must be >= 1")
        self.d, self.m, self.n_layers, self.hidden = d, m, n_layers, hidden
        self.cond_dim = cond_dim
        self.cond_width = cond_width if cond_width is not None else hidden
        self.base_hidden = base_hidden
        self.batchnorm = batchnorm
        self.flows = [
            FlowStack(d, n_layers, hidden, rng, cond_dim=cond_dim,
                      cond_width=self.cond_width, batchnorm=batchnorm)
            for _ in range(m)
        ]
        self.base = ConditionalGaussianBase(d, rng, cond_dim=cond_dim, hidden=base_hidden)
        if m > 1:
            if cond_dim is None:
                self.weight_logits = Parameter(np.zeros(m))
            else:
                self.weight_in = Linear(cond_dim, WEIGHT_HIDDEN, rng)
                self.weight_out = Linear(WEIGHT_HIDDEN, m, rng)
        self.warmup = False

    @property
    def conditional(self):
        return self.cond_dim is not None

    # -- weights --------------------------------------------------------------
    def log_weights(self, z=None):
        """``log w(z)``: shape ``[B, m]`` (conditional) or ``[m]``."""
        if self.conditional and z is None:
            raise ConfigurationError("conditional decoder called without z")
        if not self.conditional and z is not None:
            raise ConfigurationError("z passed to an unconditional decoder")
        lead = () if z is None else tuple(np.shape(z.data if isinstance(z, Tensor) else z)[:-1])
        if self.m == 1 or self.warmup:
            return Tensor(np.full(lead + (self.m,), -math.log(self.m)))
        if not self.conditional:
            return log_softmax(self.weight_logits, axis=-1)
        z = z if isinstance(z, Tensor) else Tensor(z)
        return log_softmax(self.weight_out(swish(self.weight_in(z))), axis=-1)

    def weights(self, z=None):
        with no_grad():
            return np.exp(self.log_weights(z).data)

    # -- densities ------------------------------------------------------------
    def component_log_probs(self, x, z=None):
        """Stack of per-flow ``log p_i(x|z)``, shape ``x.shape[:-1] + (m,)``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        cols = []
        for i, flow in enumerate(self.flows):
            try:
                y, logdet = flow.inverse(x, z)
            except NumericError as exc:
                raise NumericError("non-finite value in mixture component",
                                   where=f"component {i}, {exc.where}") from exc
            lp = self.base.log_prob(y, z) + logdet
            if not np.all(np.isfinite(lp.data)):
                raise NumericError("non-finite component log-density", where=f"component {i}")
            cols.append(lp.expand_dims(-1))
        return cols[0] if len(cols) == 1 else concat(cols, axis=-1)

    def _joint(self, x, z):
        comp = self.component_log_probs(x, z)
        logw = self.log_weights(z)
        if self.conditional and logw.ndim == comp.ndim - 1:
            logw = logw.expand_dims(-2)
        return comp + logw

    def log_prob(self, x, z=None):
        return logsumexp(self._joint(x, z), axis=-1)

    def manifest(self):
        return {
            "d": self.d, "m": self.m, "n_layers": self.n_layers, "hidden": self.hidden,
            "cond_dim": self.cond_dim, "cond_width": self.cond_width,
            "base_hidden": self.base_hidden, "batchnorm": self.batchnorm,
            "parities": self.flows[0].parities,
        }

    @staticmethod
    def count(d, m, n_layers, hidden, cond_dim=None, cond_width=None, base_hidden=64,
              batchnorm=True):
        cw = cond_width if cond_width is not None else hidden
        n = m * FlowStack.count(d, n_layers, hidden, cond_dim, cw, batchnorm)
        n += ConditionalGaussianBase.count(d, cond_dim, base_hidden)
        if m > 1:
            if cond_dim is None:
                n += m
            else:
                n += count_linear(cond_dim, WEIGHT_HIDDEN) + count_linear(WEIGHT_HIDDEN, m)
        return n


def mixture_log_prob(dec, x, z=None):
    """``logsumexp_i [log w_i(z) + log p_i(x|z)]``; shape ``x.shape[:-1]``."""
    return dec.log_prob(x, z)


def reconstruction_loss(dec, X, z=None):
    """Mean negative mixture log-likelihood over all points and shapes."""
    return -mixture_log_prob(dec, X, z).mean()


@dataclass
class Responsibilities:
    """Per-point posterior over components.

    Attributes:
        probs: ``[..., m]`` rows summing to one.
        labels: argmax component per point; ties go to the lowest index.
    """

    probs: np.ndarray
    labels: np.ndarray


def responsibilities(dec, x, z=None) -> Responsibilities:
    with no_grad():
        joint = dec._joint(x, z).data
    lse = np.max(joint, axis=-1, keepdims=True)
    p = np.exp(joint - lse)
    p /= p.sum(axis=-1, keepdims=True)
    return Responsibilities(probs=p, labels=np.argmax(p, axis=-1))


def mixture_sample(dec, z, n_points, rng, weights=None, component_z=None):
    """Ancestral sampling for one shape code ``z`` (``None`` if unconditional).

    Each point draws its component from ``Categorical(w(z))``, a base sample
    ``y ~ N(mu(z), Sigma(z))`` and is pushed through that component's flow.

    Args:
        weights: Override the mixture weights.
        component_z: Optional ``{component: code}`` giving some flows a
            different condition than ``z`` (per-component interpolation).

    Returns:
        ``(points[n, d], component_ids[n])``.
    """
    if n_points < 1:
        raise InputError("n_points must be >= 1")
    zz = None if z is None else np.asarray(z, dtype=float).reshape(1, -1)
    component_z = component_z or {}
    with no_grad():
        if weights is None:
            w = dec.weights(zz).reshape(-1)
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
        ids = rng.choice(dec.m, size=n_points, p=w / w.sum())
        y = dec.base.sample(n_points, rng, None if zz is None else zz[0])
        out = np.empty_like(y)
        for i, flow in enumerate(dec.flows):
            sel = ids == i
            if not np.any(sel):
                continue
            zi = zz if i not in component_z else np.asarray(component_z[i], float).reshape(1, -1)
            yi = Tensor(y[sel][None] if zi is not None else y[sel])
            xi, _ = flow.forward(yi, zi)
            out[sel] = xi.data.reshape(-1, dec.d)
    return out, ids


def jensen_gap(dec, x, z=None, reduce=True):
    """``-sum_i w_i log p_i + log sum_i w_i p_i`` per point (>= 0).

    Zero exactly where every component assigns the same density.  With
    ``reduce`` the mean over points is returned as a float.
    """
    with no_grad():
        comp = dec.component_log_probs(x, z).data
        logw = dec.log_weights(z).data
    if dec.conditional and logw.ndim == comp.ndim - 1:
        logw = np.expand_dims(logw, -2)
    w = np.exp(logw)
    a = comp + logw
    m = np.max(a, axis=-1, keepdims=True)
    mix = np.log(np.sum(np.exp(a - m), axis=-1)) + m[..., 0]
    gap = mix - np.sum(w * comp, axis=-1)
    return float(np.mean(gap)) if reduce else gap


@dataclass
class SizingReport:
    m: int
    n_layers: int
    hidden: int
    params: int
    reference_layers: int
    reference_hidden: int
    reference_params: int

    def as_dict(self):
        return dict(self.__dict__)


def size_mixture(m, n_ref, h_ref, d, cond_dim=None, base_hidden=64, batchnorm=True):
    """Apply the parameter-matching rule without building anything.

    Each flow gets ``ceil(n_ref / sqrt(m))`` layers, then the width is the
    largest value whose mixture has strictly fewer parameters than the
    single-flow reference ``(n_ref, h_ref)``.  ``m == 1`` returns the
    reference itself.
    """
    if m < 1 or n_ref < 1 or h_ref < 1:
        raise SizingError("m, n_ref and h_ref must be >= 1")
    ref = MixtureFlowDecoder.count(d, 1, n_ref, h_ref, cond_dim, None, base_hidden, batchnorm)
    if m == 1:
        return SizingReport(1, n_ref, h_ref, ref, n_ref, h_ref, ref)
    n_hat = math.ceil(n_ref / math.sqrt(m))
    for h in range(h_ref, 0, -1):
        n = MixtureFlowDecoder.count(d, m, n_hat, h, cond_dim, None, base_hidden, batchnorm)
        if n < ref:
            return SizingReport(m, n_hat, h, n, n_ref, h_ref, ref)
    raise SizingError(f"no width >= 1 keeps a {m}-component mixture under {ref} parameters")


def sized_mixture(m, n_ref, h_ref, d, cond_dim=None, rng=None, base_hidden=64, batchnorm=True):
    """Build a parameter-matched mixture; returns ``(decoder, SizingReport)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rep = size_mixture(m, n_ref, h_ref, d, cond_dim, base_hidden, batchnorm)
    dec = MixtureFlowDecoder(d, m, rep.n_layers, rep.hidden, rng, cond_dim=cond_dim,
                             base_hidden=base_hidden, batchnorm=batchnorm)
    return dec, rep
