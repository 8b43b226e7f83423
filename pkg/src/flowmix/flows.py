"""Affine coupling flows and (conditional) Gaussian base distributions.

Direction convention: a flow ``f`` maps base samples ``y`` to data ``x``.
``forward`` is the sampling direction ``y -> x``; ``inverse`` is the density
direction ``x -> y`` used for training.  Log-determinants returned by each
direction are those of the map actually applied, so
``logdet_forward + logdet_inverse == 0``.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Linear, Module, Tensor, exp, no_grad, relu, swish, tanh
from .autodiff.nn import BatchNorm1d, count_linear
from .exceptions import ConfigurationError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))
SCALE_BOUND = 5.0
LOGVAR_BOUND = 10.0


def parity_split(d, parity):
    """Pass-through and transformed coordinate indices for a layer.

    Parity 0 passes the even coordinates through and transforms the odd ones;
    parity 1 does the opposite.  For ``d == 3`` this alternates ``{0, 2}`` and
    ``{1}``.
    """
    idx = np.arange(d)
    passed = idx[idx % 2 == parity]
    moved = idx[idx % 2 != parity]
    return passed, moved


def _selector(d, idx):
    sel = np.zeros((d, len(idx)))
    sel[idx, np.arange(len(idx))] = 1.0
    return sel


def _align_condition(c, x):
    # condition rows are per shape; points carry an extra axis
    if c.ndim == x.ndim - 1:
        return c.expand_dims(-2)
    return c


class ConditionEncoder(Module):
    """Maps a raw condition vector to FiLM features: linear, swish, linear."""

    def __init__(self, cond_dim, width, rng):
        super().__init__()
        self.cond_dim, self.width = cond_dim, width
        self.lin1 = Linear(cond_dim, width, rng)
        self.lin2 = Linear(width, width, rng)

    def forward(self, z):
        return self.lin2(swish(self.lin1(z)))

    @staticmethod
    def count(cond_dim, width):
        return count_linear(cond_dim, width) + count_linear(width, width)


class _Branch(Module):
    """One of the two coupling nets (scale or translation)."""

    def __init__(self, n_in, n_out, hidden, rng, cond_width=None, batchnorm=True):
        super().__init__()
        self.conditional = cond_width is not None
        self.batchnorm = batchnorm
        self.inp = Linear(max(n_in, 0), hidden, rng)
        if batchnorm:
            self.bn = BatchNorm1d(hidden)
        if self.conditional:
            self.mid = Linear(hidden, hidden, rng)
            self.film_gamma = Linear(cond_width, hidden, rng, zero_init=True)
            self.film_beta = Linear(cond_width, hidden, rng, zero_init=True)
        self.out = Linear(hidden, n_out, rng, zero_init=True)

    def forward(self, u, c=None, use_running=False):
        h = self.inp(u)
        if self.batchnorm:
            h = self.bn(h, use_running=use_running)
        h = swish(h)
        if self.conditional:
            h = self.mid(h)
            c = _align_condition(c, h)
            h = h * (self.film_gamma(c) + 1.0) + self.film_beta(c)
            h = relu(h)
        return self.out(h)

    @staticmethod
    def count(n_in, n_out, hidden, cond_width=None, batchnorm=True):
        n = count_linear(n_in, hidden) + count_linear(hidden, n_out)
        if batchnorm:
            n += 2 * hidden
        if cond_width is not None:
            n += count_linear(hidden, hidden) + 2 * count_linear(cond_width, hidden)
        return n


class CouplingLayer(Module):
    """Affine coupling layer, optionally FiLM-conditioned.

    The pass-through coordinates ``y^L`` feed two nets producing a raw scale
    and a translation for the remaining coordinates ``y^K``:
    ``x^K = s * y^K + t`` with ``s = exp(B * tanh(raw / B))`` (``B = 5``), so
    the per-point log-determinant is the sum of the bounded log-scales.

    The final linear layer of each net is zero-initialized, which makes a
    fresh layer the identity map.

    Args:
        d: Point dimensionality.
        hidden: Hidden width ``H`` of the scale and translation nets.
        parity: 0 passes even coordinates through, 1 passes odd ones.
        rng: ``numpy.random.Generator`` used for initialization.
        cond_width: Width of the condition features fed to the FiLM heads;
            ``None`` builds an unconditional layer.
        cond_dim: If given, the layer owns its own :class:`ConditionEncoder`
            from raw conditions of this size (standalone use). Flows share
            one encoder across their layers instead.
        batchnorm: Put batch normalization after the first linear layer.
    """

    def __init__(self, d, hidden, parity, rng, cond_width=None, cond_dim=None,
                 batchnorm=True, scale_bound=SCALE_BOUND):
        super().__init__()
        self.d, self.hidden, self.parity = d, hidden, parity
        self.cond_width = cond_width
        self.scale_bound = scale_bound
        self.passed, self.moved = parity_split(d, parity)
        self._sel_pass = _selector(d, self.passed)
        self._sel_move = _selector(d, self.moved)
        n_in, n_out = len(self.passed), len(self.moved)
        self.scale_net = _Branch(n_in, n_out, hidden, rng, cond_width, batchnorm)
        self.shift_net = _Branch(n_in, n_out, hidden, rng, cond_width, batchnorm)
        self.owns_encoder = cond_dim is not None
        if self.owns_encoder:
            if cond_width is None:
                raise ConfigurationError("a standalone conditional layer needs cond_width")
            self.encoder = ConditionEncoder(cond_dim, cond_width, rng)

    @property
    def conditional(self):
        return self.cond_width is not None

    def _features(self, c):
        if not self.conditional:
            if c is not None:
                raise ConfigurationError("condition passed to an unconditional coupling layer")
            return None
        if c is None:
            raise ConfigurationError("conditional coupling layer called without a condition")
        c = c if isinstance(c, Tensor) else Tensor(c)
        return self.encoder(c) if self.owns_encoder else c

    def _scale_shift(self, u, c, use_running):
        raw = self.scale_net(u, c, use_running)
        b = self.scale_bound
        log_s = tanh(raw * (1.0 / b)) * b
        t = self.shift_net(u, c, use_running)
        return log_s, t

    def forward(self, y, c=None):
        """Sampling direction ``y -> x``; returns ``(x, logdet)``."""
        y = y if isinstance(y, Tensor) else Tensor(y)
        c = self._features(c)
        u = y @ self._sel_pass
        log_s, t = self._scale_shift(u, c, use_running=True)
        xk = (y @ self._sel_move) * exp(log_s) + t
        x = u @ self._sel_pass.T + xk @ self._sel_move.T
        return x, log_s.sum(axis=-1)

    def inverse(self, x, c=None):
        """Density direction ``x -> y``; returns ``(y, logdet)`` of the inverse map."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = self._features(c)
        u = x @ self._sel_pass
        log_s, t = self._scale_shift(u, c, use_running=False)
        yk = ((x @ self._sel_move) - t) * exp(-log_s)
        y = u @ self._sel_pass.T + yk @ self._sel_move.T
        return y, -log_s.sum(axis=-1)

    @staticmethod
    def count(d, hidden, parity, cond_width=None, cond_dim=None, batchnorm=True):
        passed, moved = parity_split(d, parity)
        n = 2 * _Branch.count(len(passed), len(moved), hidden, cond_width, batchnorm)
        if cond_dim is not None:
            n += ConditionEncoder.count(cond_dim, cond_width)
        return n


def build_film_coupling(d, hidden, cond_dim, cond_width, rng, parity=0, batchnorm=True):
    """Standalone FiLM-conditioned coupling layer with its own condition encoder.

    Condition path: ``z -> linear(cond_dim, K) -> swish -> linear(K, K)``;
    per branch: ``y^L -> linear -> batchnorm -> swish -> linear(H, H)``,
    FiLM modulation ``h * (1 + gamma(c)) + beta(c)``, ReLU, and a final
    linear layer onto the transformed coordinates.
    """
    return CouplingLayer(d, hidden, parity, rng, cond_width=cond_width,
                         cond_dim=cond_dim, batchnorm=batchnorm)


def randomize_output_layers(module, rng, scale):
    """Re-draw the zero-initialized output layers of every coupling net.

    Weights and biases become ``U(-scale/sqrt(H), scale/sqrt(H))``, so the
    flow no longer starts at the identity.  Distinct components of a mixture
    then start as distinct maps, which breaks their symmetry.
    """
    for mod in module.modules():
        if isinstance(mod, _Branch):
            bound = scale / np.sqrt(mod.out.weight.shape[0])
            mod.out.weight.data = rng.uniform(-bound, bound, mod.out.weight.shape)
            mod.out.bias.data = rng.uniform(-bound, bound, mod.out.bias.shape)


def default_parities(d, n_layers):
    if d == 1:
        # the only non-trivial split moves the single coordinate
        return [1] * n_layers
    return [i % 2 for i in range(n_layers)]


class FlowStack(Module):
    """Composition ``f = f_{N-1} o ... o f_0`` of coupling layers.

    A conditional flow owns one :class:`ConditionEncoder` whose features
    feed the FiLM heads of every layer.
    """

    def __init__(self, d, n_layers, hidden, rng, cond_dim=None, cond_width=None,
                 batchnorm=True, parities=None):
        super().__init__()
        self.d, self.n_layers, self.hidden = d, n_layers, hidden
        self.cond_dim = cond_dim
        if cond_dim is not None and cond_width is None:
            cond_width = hidden
        self.cond_width = cond_width if cond_dim is not None else None
        self.batchnorm = batchnorm
        self.parities = list(parities) if parities is not None else default_parities(d, n_layers)
        if cond_dim is not None:
            self.encoder = ConditionEncoder(cond_dim, self.cond_width, rng)
        self.layers = [
            CouplingLayer(d, hidden, p, rng, cond_width=self.cond_width, batchnorm=batchnorm)
            for p in self.parities
        ]

    @property
    def conditional(self):
        return self.cond_dim is not None

    def features(self, z):
        if not self.conditional:
            if z is not None:
                raise ConfigurationError("condition passed to an unconditional flow")
            return None
        if z is None:
            raise ConfigurationError("conditional flow called without a condition")
        z = z if isinstance(z, Tensor) else Tensor(z)
        return self.encoder(z)

    def forward(self, y, z=None):
        y = y if isinstance(y, Tensor) else Tensor(y)
        c = self.features(z)
        logdet = None
        for layer in self.layers:
            y, ld = layer.forward(y, c)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(y.shape[:-1]))
        return y, logdet

    def inverse(self, x, z=None, check_finite=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = self.features(z)
        logdet = None
        for i in reversed(range(len(self.layers))):
            x, ld = self.layers[i].inverse(x, c)
            if check_finite and not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(ld.data))):
                raise NumericError("non-finite value in flow inverse", where=f"layer {i}")
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(x.shape[:-1]))
        return x, logdet

    def manifest(self):
        return {
            "d": self.d,
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "cond_dim": self.cond_dim,
            "cond_width": self.cond_width,
            "conditional": self.conditional,
            "batchnorm": self.batchnorm,
            "parities": list(self.parities),
        }

    @staticmethod
    def count(d, n_layers, hidden, cond_dim=None, cond_width=None, batchnorm=True, parities=None):
        if cond_dim is not None and cond_width is None:
            cond_width = hidden
        parities = parities if parities is not None else default_parities(d, n_layers)
        n = sum(
            CouplingLayer.count(d, hidden, p, cond_width if cond_dim is not None else None,
                                batchnorm=batchnorm)
            for p in parities
        )
        if cond_dim is not None:
            n += ConditionEncoder.count(cond_dim, cond_width)
        return n


class ConditionalGaussianBase(Module):
    """Diagonal Gaussian ``N(mu(z), diag(exp(logvar(z))))``.

    Without a condition the base is the fixed standard normal.  The raw
    log-variance is squashed to ``(-10, 10)`` so variances stay positive and
    finite; both heads end in zero-initialized layers, so a fresh base is
    standard normal for every ``z``.
    """

    def __init__(self, d, rng, cond_dim=None, hidden=64):
        super().__init__()
        self.d, self.cond_dim, self.hidden = d, cond_dim, hidden
        if cond_dim is not None:
            self.mu_in = Linear(cond_dim, hidden, rng)
            self.mu_out = Linear(hidden, d, rng, zero_init=True)
            self.logvar_in = Linear(cond_dim, hidden, rng)
            self.logvar_out = Linear(hidden, d, rng, zero_init=True)

    @property
    def conditional(self):
        return self.cond_dim is not None

    def params(self, z=None):
        """Return ``(mu, logvar)``; tensors of shape ``[..., d]``."""
        if not self.conditional:
            if z is not None:
                raise ConfigurationError("condition passed to an unconditional base")
            return Tensor(np.zeros(self.d)), Tensor(np.zeros(self.d))
        if z is None:
            raise ConfigurationError("conditional base called without a condition")
        z = z if isinstance(z, Tensor) else Tensor(z)
        mu = self.mu_out(swish(self.mu_in(z)))
        raw = self.logvar_out(swish(self.logvar_in(z)))
        logvar = tanh(raw * (1.0 / LOGVAR_BOUND)) * LOGVAR_BOUND
        return mu, logvar

    def log_prob(self, y, z=None):
        y = y if isinstance(y, Tensor) else Tensor(y)
        mu, logvar = self.params(z)
        if self.conditional:
            mu, logvar = _align_condition(mu, y), _align_condition(logvar, y)
        diff = y - mu
        quad = diff * diff * exp(-logvar)
        return ((quad + logvar) + LOG_2PI).sum(axis=-1) * -0.5

    def sample(self, n, rng, z=None):
        """``n`` draws for a single condition vector ``z`` (or none)."""
        mu, logvar = self.params(None if z is None else np.asarray(z, dtype=float).reshape(1, -1))
        mu = mu.data.reshape(-1)
        sd = np.exp(0.5 * logvar.data.reshape(-1))
        eps = rng.standard_normal((n, self.d))
        return mu + sd * eps

    @staticmethod
    def count(d, cond_dim=None, hidden=64):
        if cond_dim is None:
            return 0
        return 2 * (count_linear(cond_dim, hidden) + count_linear(hidden, d))


def flow_log_prob(flow, base, x, z=None):
    """``log p(x) = log N(f^-1(x); mu(z), Sigma(z)) + log|det J_{f^-1}(x)|``.

    ``x`` is ``[..., d]``; for conditional models ``x`` is ``[B, N, d]`` with
    ``z`` of shape ``[B, L]`` (or ``[R, d]`` with one condition row each).
    """
    y, logdet = flow.inverse(x, z)
    return base.log_prob(y, z) + logdet


def flow_sample(flow, base, n_points, rng, z=None):
    """Draw ``n_points`` samples ``x = f(y)``, ``y ~ N(mu(z), Sigma(z))``.

    Returns a plain ``ndarray[n, d]``.
    """
    if n_points < 1:
        raise ConfigurationError("n_points must be >= 1")
    with no_grad():
        y = base.sample(n_points, rng, z)
        zz = None if z is None else np.asarray(z, dtype=float).reshape(1, -1)
        x, _ = flow.forward(Tensor(y[None]) if zz is not None else Tensor(y), zz)
    return x.data.reshape(n_points, -1)


__all__ = [
    "ConditionEncoder",
    "ConditionalGaussianBase",
    "CouplingLayer",
    "FlowStack",
    "LOG_2PI",
    "build_film_coupling",
    "flow_log_prob",
    "flow_sample",
    "parity_split",
    "randomize_output_layers",
]
