"""Training loop, presets and inference helpers (reconstruct, interpolate, probes)."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Module, Tensor, backward, clip_grad_norm, no_grad, step_decay_lr
from .autodiff.checkpoint import dumps_state, loads_state
from .data import ShapeDataset, get_family, make_dataset, normalize_cloud, random_rotation_matrix
from .encoder import SetEncoder, reparam_sample
from .exceptions import ConfigurationError, InputError, NumericError, TrainingDiverged
from .flows import randomize_output_layers
from .metrics import f1_score
from .mixture import (
    MixtureFlowDecoder,
    jensen_gap,
    mixture_sample,
    reconstruction_loss,
    responsibilities,
    size_mixture,
)
from .prior import PriorFlow, prior_loss, prior_sample


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    Attributes:
        preset: Preset id the config was derived from (informational).
        family: Shape family of the synthetic dataset; ``None`` when the
            data comes from elsewhere (then ``dim`` is required).
        dim: Point dimensionality; defaults to the family's.
        conditional: ``True`` trains the full autoencoder (encoder, conditional
            mixture, prior); ``False`` fits one unconditional mixture density
            to the pooled points.
        n_shapes, n_points: Dataset size.
        vary_shapes: Draw random family parameters per shape.
        normalize: Center and scale each cloud to max-norm 1.
        epochs: Passes over the training split.
        batch_size: Shapes per step (conditional).
        points_per_step: Points per shape per step (conditional, ``None`` uses
            all); total points per step for unconditional fits.
        lr0, lr_decay_epochs, lr_decay_factor: Step-decay Adam schedule.
        noise_sigma: Std of the Gaussian noise added to every training point.
        warmup_epochs: Epochs with the mixture weights fixed to ``1/m``.
        m: Mixture components.
        n_layers, hidden: Reference single-flow depth and width.
        match_params: Shrink depth and width with ``m`` so the mixture has
            fewer parameters than the reference flow.
        latent_dim: Shape-code size.
        encoder_widths, encoder_head: Set-encoder architecture.
        prior_layers, prior_hidden: Latent prior flow architecture.
        base_hidden: Width of the conditional base heads.
        batchnorm: Batch normalization inside coupling nets.
        out_init_scale: ``0`` starts every decoder flow at the identity;
            a positive value draws the coupling output layers at random with
            this scale.
        clip_norm: Global gradient-norm clip.
        rotation_augment: Randomly rotate every training shape each step.
        seed: Master seed.
    """

    preset: str = "custom"
    family: str | None = "two_squares_2d"
    dim: int | None = None
    conditional: bool = True
    n_shapes: int = 60
    n_points: int = 512
    vary_shapes: bool = True
    normalize: bool = True
    epochs: int = 300
    batch_size: int = 36
    points_per_step: int | None = None
    lr0: float = 2.56e-4
    lr_decay_epochs: list = field(default_factory=list)
    lr_decay_factor: float = 4.0
    noise_sigma: float = 0.02
    warmup_epochs: int = 5
    m: int = 1
    n_layers: int = 8
    hidden: int = 32
    match_params: bool = True
    latent_dim: int = 16
    encoder_widths: list = field(default_factory=lambda: [64, 128, 256, 512])
    encoder_head: int = 512
    prior_layers: int = 14
    prior_hidden: int = 128
    base_hidden: int = 64
    batchnorm: bool = True
    out_init_scale: float = 0.0
    clip_norm: float = 100.0
    rotation_augment: bool = False
    seed: int = 0

    def validate(self):
        positive = ("n_shapes", "n_points", "batch_size", "m", "n_layers", "hidden",
                    "latent_dim", "encoder_head", "prior_hidden", "base_hidden")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("epochs", "warmup_epochs", "prior_layers"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0")
        if self.points_per_step is not None and self.points_per_step < 2:
            raise ConfigurationError("points_per_step must be >= 2")
        if self.lr0 <= 0 or self.lr_decay_factor <= 0 or self.clip_norm <= 0:
            raise ConfigurationError("lr0, lr_decay_factor and clip_norm must be positive")
        if self.out_init_scale < 0:
            raise ConfigurationError("out_init_scale must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        dec = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(dec, dec[1:])) or any(e < 1 for e in dec):
            raise ConfigurationError("lr_decay_epochs must be positive and strictly increasing")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigurationError("encoder_widths must be non-empty and positive")
        if self.family is None and self.dim is None:
            raise ConfigurationError("either family or dim must be set")
        if self.family is not None:
            get_family(self.family)
        if self.dim is not None and not 1 <= self.dim <= 3:
            raise ConfigurationError(f"dim must be 1, 2 or 3, got {self.dim}")
        return self

    @property
    def point_dim(self):
        return self.dim if self.dim is not None else get_family(self.family).dim

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values, base=None):
        """Build a config from ``values`` layered over ``base`` (or defaults).

        Raises:
            ConfigurationError: unknown keys, listing the valid ones.
        """
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigurationError(
                f"unknown config keys {unknown}; valid keys: {', '.join(cls.keys())}")
        merged = (base or cls()).to_dict()
        merged.update(values)
        for key in ("lr_decay_epochs", "encoder_widths"):
            merged[key] = [int(v) for v in merged[key]]
        return cls(**merged)


PRESETS = {
    # unconditional density fits on a fixed target
    "two_squares": dict(
        family="two_squares_2d", conditional=False, n_shapes=1, n_points=4096,
        vary_shapes=False, normalize=False, epochs=100, points_per_step=512, lr0=2e-3,
        lr_decay_epochs=[70], out_init_scale=1.0, warmup_epochs=5, m=2, n_layers=8, hidden=16,
    ),
    "two_intervals": dict(
        family="two_intervals_1d", conditional=False, n_shapes=1, n_points=4096,
        vary_shapes=False, normalize=False, epochs=100, points_per_step=512, lr0=2e-3,
        lr_decay_epochs=[70], out_init_scale=1.0, warmup_epochs=5, m=2, n_layers=4, hidden=16,
    ),
    "ring": dict(
        family="ring_2d", conditional=False, n_shapes=1, n_points=4096, vary_shapes=False,
        normalize=False, epochs=100, points_per_step=512, lr0=2e-3, lr_decay_epochs=[70],
        out_init_scale=1.0, m=1, n_layers=8, hidden=32,
    ),
    "checkerboard": dict(
        family="checkerboard_2d", conditional=False, n_shapes=1, n_points=4096,
        vary_shapes=False, normalize=False, epochs=100, points_per_step=512, lr0=2e-3,
        lr_decay_epochs=[70], out_init_scale=1.0, m=4, n_layers=8, hidden=32,
    ),
    # autoencoders over shape families
    "two_squares_vae": dict(
        family="two_squares_2d", conditional=True, n_shapes=40, n_points=256, epochs=150,
        batch_size=4, points_per_step=128, lr0=3e-3, lr_decay_epochs=[110], warmup_epochs=50,
        m=2, n_layers=4, hidden=24, latent_dim=8, encoder_widths=[32, 64, 128],
        encoder_head=64, prior_layers=6, prior_hidden=32, base_hidden=32, out_init_scale=1.0,
    ),
    "sphere": dict(
        family="sphere_3d", conditional=True, n_shapes=40, n_points=512, epochs=40,
        batch_size=8, points_per_step=256, lr0=2e-3, lr_decay_epochs=[30], m=2,
        n_layers=6, hidden=32, latent_dim=16, encoder_widths=[32, 64, 128], encoder_head=64,
        prior_layers=6, prior_hidden=32, base_hidden=32, out_init_scale=1.0,
    ),
    "torus": dict(
        family="torus_3d", conditional=True, n_shapes=40, n_points=512, epochs=40,
        batch_size=8, points_per_step=256, lr0=2e-3, lr_decay_epochs=[30], m=2,
        n_layers=6, hidden=32, latent_dim=16, encoder_widths=[32, 64, 128], encoder_head=64,
        prior_layers=6, prior_hidden=32, base_hidden=32, out_init_scale=1.0,
    ),
    "winged_body": dict(
        family="winged_body_3d", conditional=True, n_shapes=40, n_points=512, epochs=40,
        batch_size=8, points_per_step=256, lr0=2e-3, lr_decay_epochs=[30], m=3,
        n_layers=6, hidden=32, latent_dim=16, encoder_widths=[32, 64, 128], encoder_head=64,
        prior_layers=6, prior_hidden=32, base_hidden=32, out_init_scale=1.0,
    ),
    "two_boxes": dict(
        family="two_boxes_3d", conditional=True, n_shapes=40, n_points=512, epochs=40,
        batch_size=8, points_per_step=256, lr0=2e-3, lr_decay_epochs=[30], m=2,
        n_layers=6, hidden=32, latent_dim=16, encoder_widths=[32, 64, 128], encoder_head=64,
        prior_layers=6, prior_hidden=32, base_hidden=32, out_init_scale=1.0,
    ),
}


def preset_config(name, **overrides):
    """Config for a named preset with optional field overrides."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = TrainConfig.from_dict(dict(PRESETS[name], preset=name))
    return TrainConfig.from_dict(overrides, base=cfg).validate()


# -- model bundle -----------------------------------------------------------------


class FlowMixModel(Module):
    """Encoder, mixture decoder and latent prior built from a :class:`TrainConfig`.

    Unconditional configs hold only the decoder.
    """

    def __init__(self, config, rng=None):
        super().__init__()
        config.validate()
        self.config = config
        self.d = config.point_dim
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        cond_dim = config.latent_dim if config.conditional else None
        if config.match_params:
            self.sizing = size_mixture(config.m, config.n_layers, config.hidden, self.d,
                                       cond_dim, config.base_hidden, config.batchnorm)
            n_layers, hidden = self.sizing.n_layers, self.sizing.hidden
        else:
            n_layers, hidden = config.n_layers, config.hidden
            self.sizing = None
        if config.conditional:
            self.encoder = SetEncoder(self.d, config.latent_dim, rng, config.encoder_widths,
                                      config.encoder_head)
        self.decoder = MixtureFlowDecoder(self.d, config.m, n_layers, hidden, rng,
                                          cond_dim=cond_dim, base_hidden=config.base_hidden,
                                          batchnorm=config.batchnorm)
        if config.out_init_scale > 0:
            randomize_output_layers(self.decoder, rng, config.out_init_scale)
        if config.conditional:
            self.prior = PriorFlow(config.latent_dim, rng, config.prior_layers,
                                   config.prior_hidden)

    @property
    def conditional(self):
        return self.config.conditional

    def sizing_report(self):
        if self.sizing is not None:
            return self.sizing.as_dict()
        return {"m": self.config.m, "n_layers": self.config.n_layers,
                "hidden": self.config.hidden, "params": self.decoder.num_parameters()}

    def meta(self):
        return {"config": self.config.to_dict(), "decoder": self.decoder.manifest(),
                "sizing": self.sizing_report()}

    def dumps(self):
        """Checkpoint manifest text (byte-identical for identical states)."""
        return dumps_state(self.state_dict(), self.meta())

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text):
        state, meta = loads_state(text)
        if "config" not in meta:
            raise InputError("checkpoint has no config; cannot rebuild the model")
        cfg = TrainConfig.from_dict(meta["config"])
        model = cls(cfg)
        if meta.get("decoder") != model.decoder.manifest():
            raise ConfigurationError("checkpoint topology does not match its config")
        model.load_state_dict(state)
        model.eval()
        return model

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.loads(path.read_text())

    def encode_mean(self, clouds):
        """Posterior means ``[S, L]`` in eval mode (no graph)."""
        X = np.asarray(clouds, dtype=float)
        if X.ndim == 2:
            X = X[None]
        was = self.training
        self.eval()
        with no_grad():
            mu = self.encoder(Tensor(X)).mu.data
        self.train(was)
        return mu


# -- logs ----------------------------------------------------------------------------

EPOCH_FIELDS = ("epoch", "loss", "loss_d", "loss_prior", "weight_entropy", "max_mean_weight",
                "jensen_gap", "lr", "warmup")
STEP_FIELDS = ("step", "epoch", "lr", "loss", "w_min", "w_max", "noise_checksum", "grad_norm")


@dataclass
class TrainLog:
    """Per-epoch and per-step records of a run.

    Wall-clock times are kept in ``wall_time`` and left out of the default
    serializations so identical runs produce identical files.
    """

    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.epochs]

    def to_csv(self, timing=False):
        buf = io.StringIO()
        cols = EPOCH_FIELDS + (("wall_time",) if timing else ())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i, rec in enumerate(self.epochs):
            row = [_fmt_cell(rec[c]) for c in EPOCH_FIELDS]
            if timing:
                row.append(_fmt_cell(self.wall_time[i]))
            w.writerow(row)
        return buf.getvalue()

    def to_json(self, timing=False):
        doc = {"epochs": self.epochs, "steps": self.steps}
        if timing:
            doc["wall_time"] = self.wall_time
        return json.dumps(doc, sort_keys=True, indent=1)


def _fmt_cell(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- training ------------------------------------------------------------------------


def _streams(seed):
    init, batches, noise, eps, rot = np.random.SeedSequence(seed).spawn(5)
    return tuple(np.random.default_rng(s) for s in (init, batches, noise, eps, rot))


def load_dataset(config):
    if config.family is None:
        raise ConfigurationError("no family configured; pass the dataset explicitly")
    return make_dataset(config.family, config.n_shapes, config.n_points, seed=config.seed,
                        vary=config.vary_shapes, normalize=config.normalize)


def _weight_stats(model, monitor):
    """Mean weight entropy, max mean weight and Jensen gap on a monitor batch."""
    dec = model.decoder
    was = model.training
    model.eval()
    with no_grad():
        z = model.encoder(Tensor(monitor)).mu.data if model.conditional else None
        w = dec.weights(z)
        w2 = w.reshape(-1, dec.m)
        ent = float(np.mean(-np.sum(np.where(w2 > 0, w2 * np.log(np.maximum(w2, 1e-300)), 0.0),
                                    axis=-1)))
        gap = jensen_gap(dec, monitor, z)
    model.train(was)
    return ent, float(np.max(w2.mean(axis=0))), gap


def train(config, dataset=None, model=None, callback=None):
    """Fit a :class:`FlowMixModel`.

    Every step draws fresh noise ``N(0, noise_sigma^2)`` for each training
    point, one posterior sample per shape, and applies Adam with global norm
    clipping.  Mixture weights are fixed to ``1/m`` for the first
    ``warmup_epochs`` epochs.  The learning rate is divided by
    ``lr_decay_factor`` at each of ``lr_decay_epochs``.

    Args:
        config: Run configuration.
        dataset: Training shapes; built from the config when omitted.
        model: Continue from an existing model instead of a fresh one.
        callback: Called as ``callback(epoch, model, log)`` after each epoch.

    Returns:
        ``(model, TrainLog)``.

    Raises:
        TrainingDiverged: non-finite loss or gradient; carries the model
            restored to the last good step, and names the offending term.
    """
    config.validate()
    init_rng, batch_rng, noise_rng, eps_rng, rot_rng = _streams(config.seed)
    if dataset is None:
        dataset = load_dataset(config)
    clouds = np.asarray(dataset.clouds if isinstance(dataset, ShapeDataset) else dataset,
                        dtype=float)
    if clouds.ndim == 2:
        clouds = clouds[None]
    if clouds.size == 0:
        raise InputError("empty dataset")
    d = config.point_dim
    if clouds.shape[-1] != d:
        raise InputError(f"dataset has d={clouds.shape[-1]}, config expects d={d}")
    if model is None:
        model = FlowMixModel(config, init_rng)
    model.train()
    log = TrainLog()
    if config.epochs == 0:
        model.eval()
        return model, log

    params = model.parameters()
    opt = Adam(params, lr=config.lr0)
    dec = model.decoder
    S, P = clouds.shape[0], clouds.shape[1]
    if config.conditional:
        steps_per_epoch = math.ceil(S / config.batch_size)
        monitor = clouds[: min(S, config.batch_size), : min(P, 256)]
    else:
        pooled = clouds.reshape(-1, d)
        per_step = min(config.points_per_step or len(pooled), len(pooled))
        steps_per_epoch = math.ceil(len(pooled) / per_step)
        monitor = pooled[: min(len(pooled), 1024)]
    good = model.state_dict()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = step_decay_lr(config.lr0, epoch, config.lr_decay_epochs, config.lr_decay_factor)
        opt.lr = lr
        dec.warmup = epoch < config.warmup_epochs
        sums = np.zeros(3)
        count = 0
        order = batch_rng.permutation(S if config.conditional else len(pooled))
        for b in range(steps_per_epoch):
            if config.conditional:
                idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
                X = clouds[idx]
                if config.points_per_step is not None and config.points_per_step < P:
                    sel = np.stack([batch_rng.choice(P, config.points_per_step, replace=False)
                                    for _ in idx])
                    X = np.take_along_axis(X, sel[..., None], axis=1)
                if config.rotation_augment:
                    R = np.stack([random_rotation_matrix(d, rot_rng) for _ in idx])
                    X = np.einsum("bnd,bed->bne", X, R)
            else:
                X = pooled[order[b * per_step:(b + 1) * per_step]]
            if len(X.reshape(-1, d)) < 2:
                continue
            noise = noise_rng.standard_normal(X.shape) * config.noise_sigma
            Xn = Tensor(X + noise)
            term = "L_D"
            try:
                if config.conditional:
                    post = model.encoder(Xn)
                    z = reparam_sample(post, eps_rng)
                    l_d = reconstruction_loss(dec, Xn, z)
                    term = "L_Prior"
                    l_p = prior_loss(model.prior, post, z).mean()
                    loss = l_d + l_p * (1.0 / X.shape[1])
                else:
                    l_d = reconstruction_loss(dec, Xn)
                    l_p = Tensor(0.0)
                    loss = l_d
                vals = (loss.item(), l_d.item(), l_p.item())
                if not np.all(np.isfinite(vals)):
                    bad = "L_D" if not np.isfinite(vals[1]) else "L_Prior"
                    raise NumericError("non-finite loss", where=bad)
                term = "gradient"
                opt.zero_grad()
                backward(loss)
                gnorm = clip_grad_norm(params, config.clip_norm)
                if not np.isfinite(gnorm):
                    raise NumericError("non-finite gradient", where="gradient")
            except NumericError as exc:
                from .autodiff import reset_tape

                reset_tape()
                model.load_state_dict(good)
                model.eval()
                where = exc.where if exc.where in ("L_D", "L_Prior", "gradient") else \
                    f"{term}: {exc.where}"
                raise TrainingDiverged(f"training diverged at epoch {epoch}, step {step}",
                                       where=where, model=model, log=log) from exc
            opt.step()
            good = model.state_dict()
            w = dec.weights(None if not config.conditional else z.data)
            log.steps.append({
                "step": step, "epoch": epoch, "lr": lr, "loss": vals[0],
                "w_min": float(np.min(w)), "w_max": float(np.max(w)),
                "noise_checksum": float(np.sum(noise)), "grad_norm": gnorm,
            })
            sums += vals
            count += 1
            step += 1
        ent, wmax, gap = _weight_stats(model, monitor)
        mean = sums / max(count, 1)
        log.epochs.append({
            "epoch": epoch, "loss": float(mean[0]), "loss_d": float(mean[1]),
            "loss_prior": float(mean[2]), "weight_entropy": ent, "max_mean_weight": wmax,
            "jensen_gap": gap, "lr": lr, "warmup": bool(dec.warmup),
        })
        log.wall_time.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, model, log)
    dec.warmup = False
    model.eval()
    return model, log


# -- evaluation and inference ---------------------------------------------------------


def validation_nll(model, data):
    """Mean NLL (nats per point) on noise-free points in eval mode.

    ``data`` is ``[P, d]`` for unconditional models and ``[S, N, d]`` for
    autoencoders, whose codes are the posterior means.
    """
    X = np.asarray(data, dtype=float)
    was = model.training
    model.eval()
    with no_grad():
        if model.conditional:
            if X.ndim == 2:
                X = X[None]
            z = model.encoder(Tensor(X)).mu.data
            lp = model.decoder.log_prob(Tensor(X), z).data
        else:
            lp = model.decoder.log_prob(Tensor(X.reshape(-1, model.d))).data
    model.train(was)
    return float(-np.mean(lp))


def point_labels(model, X):
    """Argmax-responsibility component of every point of one cloud ``[N, d]``."""
    X = np.asarray(X, dtype=float)
    was = model.training
    model.eval()
    if model.conditional:
        z = model.encode_mean(X)
        r = responsibilities(model.decoder, X[None], z).labels[0]
    else:
        r = responsibilities(model.decoder, X).labels
    model.train(was)
    return r


def reconstruct(model, X, n_out, seed=0, normalize=None):
    """Decode the posterior mean of ``X`` into ``n_out`` points.

    With ``normalize`` (default: the training config's setting) the input is
    normalized first and the output mapped back to the input's frame.

    Returns:
        ``(points[n_out, d], component_ids[n_out])``.
    """
    if not model.conditional:
        raise ConfigurationError("reconstruct needs an autoencoder model")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("reconstruct expects one non-empty cloud [N, d]")
    normalize = model.config.normalize if normalize is None else normalize
    center, scale = np.zeros(X.shape[1]), 1.0
    if normalize:
        X, center, scale = normalize_cloud(X)
    z = model.encode_mean(X)[0]
    model.eval()
    pts, ids = mixture_sample(model.decoder, z, n_out, np.random.default_rng(seed))
    return pts * scale + center, ids


def interpolate(model, X_a, X_b, steps, n_points, seed=0, components=None, normalize=None):
    """Decode linear interpolations between the codes of two clouds.

    Each step uses a fresh generator seeded with ``seed``, so the endpoints
    equal :func:`reconstruct` of ``X_a`` and ``X_b`` with the same seed.  With
    ``components`` only those flows receive the interpolated code; the other
    flows, the base and the weights stay at the code of ``X_a``.

    Returns:
        List of ``(points, component_ids)`` of length ``steps``.
    """
    if steps < 2:
        raise InputError("steps must be >= 2")
    if not model.conditional:
        raise ConfigurationError("interpolate needs an autoencoder model")
    m = model.decoder.m
    if components is not None:
        components = [int(c) for c in components]
        bad = [c for c in components if not 0 <= c < m]
        if bad:
            raise InputError(f"component indices {bad} out of range for m={m}")
    normalize = model.config.normalize if normalize is None else normalize
    A, B = np.asarray(X_a, dtype=float), np.asarray(X_b, dtype=float)
    ca, cb, sa, sb = np.zeros(A.shape[1]), np.zeros(B.shape[1]), 1.0, 1.0
    if normalize:
        A, ca, sa = normalize_cloud(A)
        B, cb, sb = normalize_cloud(B)
    za, zb = model.encode_mean(A)[0], model.encode_mean(B)[0]
    model.eval()
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        zt = (1.0 - t) * za + t * zb
        rng = np.random.default_rng(seed)
        if components is None:
            pts, ids = mixture_sample(model.decoder, zt, n_points, rng)
            center, scale = (1.0 - t) * ca + t * cb, (1.0 - t) * sa + t * sb
        else:
            pts, ids = mixture_sample(model.decoder, za, n_points, rng,
                                      component_z={c: zt for c in components})
            center, scale = ca, sa
        out.append((pts * scale + center, ids))
    return out


def generate(model, count, n_points, seed=0):
    """Sample ``count`` new shapes (prior, then mixture); list of ``(points, ids)``.

    Unconditional models return ``count`` independent draws of the density.
    """
    rng = np.random.default_rng(seed)
    model.eval()
    if count == 0:
        return []
    if not model.conditional:
        return [mixture_sample(model.decoder, None, n_points, rng) for _ in range(count)]
    zs = prior_sample(model.prior, count, rng)
    return [mixture_sample(model.decoder, z, n_points, rng) for z in zs]


def runtime_probe(m_list, n_ref, h_ref, n_points, d=2, repeats=3, seed=0, cond_dim=None):
    """Time ancestral sampling of parameter-matched mixtures.

    Returns:
        One dict per ``m`` with sizing, seconds per point (best of
        ``repeats``) and the time relative to ``m=1``.
    """
    if any(m < 1 for m in m_list):
        raise ConfigurationError("all m must be >= 1")
    rows = []
    for m in m_list:
        rep = size_mixture(m, n_ref, h_ref, d, cond_dim)
        dec = MixtureFlowDecoder(d, m, rep.n_layers, rep.hidden, np.random.default_rng(seed),
                                 cond_dim=cond_dim)
        dec.eval()
        z = None if cond_dim is None else np.zeros(cond_dim)
        best = math.inf
        for r in range(repeats):
            rng = np.random.default_rng(seed + r)
            t0 = time.perf_counter()
            mixture_sample(dec, z, n_points, rng)
            best = min(best, time.perf_counter() - t0)
        rows.append({"m": m, "n_layers": rep.n_layers, "hidden": rep.hidden,
                     "params": rep.params, "time_per_point": best / n_points})
    base = next((r["time_per_point"] for r in rows if r["m"] == 1), rows[0]["time_per_point"])
    for r in rows:
        r["relative_time"] = r["time_per_point"] / base
    return rows


def fit_f1(config, ref_points, n_gen=2048, tau=1e-3, seed=0):
    """Train an unconditional config and score ``n_gen`` samples against ``ref_points``."""
    model, _ = train(config)
    pts, _ = mixture_sample(model.decoder, None, n_gen, np.random.default_rng(seed))
    return model, f1_score(pts, ref_points, tau)


def scaling_study(base_config, sizes, m_list, n_ref_points=2048, tau=1e-3, seed=0):
    """F1 of generated vs. reference points for each ``(size, m)``.

    ``sizes`` are reference ``(n_layers, hidden)`` pairs; every mixture is
    parameter matched to its reference.

    Returns:
        Rows ``{"n_layers", "hidden", "m", "params", "f1"}``.
    """
    fam = get_family(base_config.family)
    ref = make_dataset(fam.name, 1, n_ref_points, seed=base_config.seed + 7919,
                       vary=base_config.vary_shapes, normalize=base_config.normalize).clouds[0]
    rows = []
    for n_layers, hidden in sizes:
        for m in m_list:
            cfg = TrainConfig.from_dict(
                {"n_layers": int(n_layers), "hidden": int(hidden), "m": int(m),
                 "match_params": True}, base=base_config)
            model, f1 = fit_f1(cfg, ref, n_ref_points, tau, seed)
            rows.append({"n_layers": int(n_layers), "hidden": int(hidden), "m": int(m),
                         "params": model.decoder.num_parameters(), "f1": float(f1)})
    return rows
