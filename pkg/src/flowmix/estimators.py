"""scikit-learn style estimators around the training loop.

``MixtureFlowDensity`` fits one unconditional mixture of flows to a set of
points.  ``MixtureFlowVAE`` fits the full autoencoder to a batch of clouds and
exposes shape codes through ``transform``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import training as T
from ._validation import check_cloud, check_clouds, check_positive_int, check_seed
from .autodiff import Tensor, no_grad
from .mixture import mixture_sample, responsibilities


class MixtureFlowDensity(DensityMixin, BaseEstimator):
    """Mixture of coupling flows as a density estimator for ``[N, d]`` points.

    Args:
        n_components: Mixture size ``m``.
        n_layers, hidden: Reference single-flow depth and width.
        match_params: Shrink the mixture to the reference parameter budget.
        epochs, points_per_step, lr, lr_decay_epochs: Optimization schedule.
        noise_sigma: Training-noise standard deviation.
        warmup_epochs: Epochs with uniform fixed weights.
        out_init_scale: Random scale of the coupling output layers at
            initialization (``0`` starts from the identity).
        random_state: Seed.

    Attributes:
        model_: Fitted :class:`~flowmix.training.FlowMixModel`.
        log_: Its :class:`~flowmix.training.TrainLog`.
        n_features_in_: Point dimensionality seen in ``fit``.
    """

    def __init__(self, n_components=2, n_layers=8, hidden=16, match_params=True, epochs=100,
                 points_per_step=512, lr=2e-3, lr_decay_epochs=(70,), noise_sigma=0.02,
                 warmup_epochs=5, out_init_scale=1.0, batchnorm=True, random_state=0):
        self.n_components = n_components
        self.n_layers = n_layers
        self.hidden = hidden
        self.match_params = match_params
        self.epochs = epochs
        self.points_per_step = points_per_step
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.noise_sigma = noise_sigma
        self.warmup_epochs = warmup_epochs
        self.out_init_scale = out_init_scale
        self.batchnorm = batchnorm
        self.random_state = random_state

    def _config(self, X):
        decay = [e for e in self.lr_decay_epochs if e < self.epochs]
        return T.TrainConfig(
            preset="estimator", family=None, dim=X.shape[1], conditional=False, n_shapes=1,
            n_points=len(X), vary_shapes=False, normalize=False, epochs=self.epochs,
            points_per_step=min(self.points_per_step, len(X)), lr0=self.lr,
            lr_decay_epochs=decay, noise_sigma=self.noise_sigma,
            warmup_epochs=self.warmup_epochs, m=self.n_components, n_layers=self.n_layers,
            hidden=self.hidden, match_params=self.match_params, batchnorm=self.batchnorm,
            out_init_scale=self.out_init_scale, seed=int(self.random_state or 0),
        ).validate()

    def fit(self, X, y=None):
        X = check_cloud(X, min_points=2)
        self.config_ = self._config(X)
        self.model_, self.log_ = T.train(self.config_, X[None])
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return check_cloud(X, dim=self.n_features_in_)

    def score_samples(self, X):
        """Log-density of each point."""
        X = self._check(X)
        with no_grad():
            return self.model_.decoder.log_prob(Tensor(X)).data.copy()

    def score(self, X, y=None):
        """Mean log-likelihood per point."""
        return float(np.mean(self.score_samples(X)))

    def predict_proba(self, X):
        """Component responsibilities ``[N, m]``."""
        return responsibilities(self.model_.decoder, self._check(X)).probs

    def predict(self, X):
        """Argmax-responsibility component of each point."""
        return responsibilities(self.model_.decoder, self._check(X)).labels

    @property
    def weights_(self):
        check_is_fitted(self, "model_")
        return self.model_.decoder.weights()

    def sample(self, n_samples=1, random_state=None):
        """Draw points; returns ``(X, component_ids)``."""
        check_is_fitted(self, "model_")
        n = check_positive_int(n_samples, "n_samples")
        return mixture_sample(self.model_.decoder, None, n, check_seed(random_state))


class MixtureFlowVAE(TransformerMixin, BaseEstimator):
    """Autoencoder with a mixture-of-flows decoder over clouds ``[S, N, d]``.

    ``transform`` returns posterior-mean shape codes, ``predict`` the per-point
    component labels, and ``score`` the mean log-likelihood per point.

    Args:
        n_components: Mixture size ``m``.
        latent_dim: Shape-code size ``L``.
        encoder_widths, encoder_head: Set-encoder architecture.
        prior_layers, prior_hidden: Latent prior architecture.
        normalize: Center and scale clouds before training and encoding.
        Remaining arguments as in :class:`MixtureFlowDensity`.
    """

    def __init__(self, n_components=2, n_layers=4, hidden=24, match_params=True, latent_dim=8,
                 encoder_widths=(32, 64, 128), encoder_head=64, prior_layers=6, prior_hidden=32,
                 base_hidden=32, epochs=150, batch_size=4, points_per_step=128, lr=3e-3,
                 lr_decay_epochs=(110,), noise_sigma=0.02, warmup_epochs=50, normalize=True,
                 rotation_augment=False, out_init_scale=1.0, batchnorm=True, random_state=0):
        self.n_components = n_components
        self.n_layers = n_layers
        self.hidden = hidden
        self.match_params = match_params
        self.latent_dim = latent_dim
        self.encoder_widths = encoder_widths
        self.encoder_head = encoder_head
        self.prior_layers = prior_layers
        self.prior_hidden = prior_hidden
        self.base_hidden = base_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.points_per_step = points_per_step
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.noise_sigma = noise_sigma
        self.warmup_epochs = warmup_epochs
        self.normalize = normalize
        self.rotation_augment = rotation_augment
        self.out_init_scale = out_init_scale
        self.batchnorm = batchnorm
        self.random_state = random_state

    def _config(self, X):
        S, N, d = X.shape
        decay = [e for e in self.lr_decay_epochs if e < self.epochs]
        pps = None if self.points_per_step is None else min(self.points_per_step, N)
        return T.TrainConfig(
            preset="estimator", family=None, dim=d, conditional=True, n_shapes=S, n_points=N,
            normalize=self.normalize, epochs=self.epochs, batch_size=self.batch_size,
            points_per_step=pps, lr0=self.lr, lr_decay_epochs=decay,
            noise_sigma=self.noise_sigma, warmup_epochs=self.warmup_epochs,
            m=self.n_components, n_layers=self.n_layers, hidden=self.hidden,
            match_params=self.match_params, latent_dim=self.latent_dim,
            encoder_widths=list(self.encoder_widths), encoder_head=self.encoder_head,
            prior_layers=self.prior_layers, prior_hidden=self.prior_hidden,
            base_hidden=self.base_hidden, batchnorm=self.batchnorm,
            out_init_scale=self.out_init_scale, rotation_augment=self.rotation_augment,
            seed=int(self.random_state or 0),
        ).validate()

    def _prepare(self, X):
        if not self.normalize:
            return X
        from .data import normalize_cloud

        return np.stack([normalize_cloud(c)[0] for c in X])

    def fit(self, X, y=None):
        X = check_clouds(X)
        self.config_ = self._config(X)
        self.model_, self.log_ = T.train(self.config_, self._prepare(X))
        self.n_features_in_ = X.shape[2]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return self._prepare(check_clouds(X, dim=self.n_features_in_))

    def transform(self, X):
        """Posterior-mean codes ``[S, L]``."""
        X = self._check(X)
        return self.model_.encode_mean(X)

    def predict(self, X):
        """Per-point component labels ``[S, N]``."""
        X = self._check(X)
        return np.stack([T.point_labels(self.model_, c) for c in X])

    def score(self, X, y=None):
        """Mean log-likelihood per point (noise-free, posterior-mean codes)."""
        X = self._check(X)
        return -T.validation_nll(self.model_, X)

    def reconstruct(self, X, n_out=None, random_state=0):
        """Decode one cloud ``[N, d]``; returns ``(points, component_ids)``."""
        check_is_fitted(self, "model_")
        X = check_cloud(X, dim=self.n_features_in_)
        n_out = len(X) if n_out is None else check_positive_int(n_out, "n_out")
        return T.reconstruct(self.model_, X, n_out, seed=random_state)

    def sample(self, n_shapes=1, n_points=2048, random_state=0):
        """New shapes from the learned prior; list of ``(points, component_ids)``."""
        check_is_fitted(self, "model_")
        return T.generate(self.model_, check_positive_int(n_shapes, "n_shapes", 0),
                          check_positive_int(n_points, "n_points"), seed=random_state)

    def interpolate(self, X_a, X_b, steps=5, n_points=2048, components=None, random_state=0):
        """Decoded interpolations between two clouds; see :func:`flowmix.training.interpolate`."""
        check_is_fitted(self, "model_")
        A = check_cloud(X_a, "X_a", dim=self.n_features_in_)
        B = check_cloud(X_b, "X_b", dim=self.n_features_in_)
        return T.interpolate(self.model_, A, B, steps, n_points, seed=random_state,
                             components=components)
