"""Procedural point-set families, normalization, splits and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import ndtr

from .exceptions import InputError, UnsupportedError


@dataclass(frozen=True)
class ShapeFamily:
    """A generator of shapes with known structure.

    Attributes:
        name: Generator id.
        dim: Point dimensionality.
        ranges: ``param -> (low, high)`` admissible (and sampled) range.
        defaults: Parameters of the canonical shape.
        parts: Names of the labelled parts, in label order.
    """

    name: str
    dim: int
    ranges: dict = field(default_factory=dict)
    defaults: dict = field(default_factory=dict)
    parts: tuple = ()

    def sample_params(self, rng):
        return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in self.ranges.items()}

    def check(self, params):
        merged = dict(self.defaults)
        merged.update(params or {})
        unknown = set(merged) - set(self.ranges)
        if unknown:
            raise InputError(f"{self.name}: unknown parameters {sorted(unknown)}")
        for k, v in merged.items():
            lo, hi = self.ranges[k]
            if not lo <= v <= hi:
                raise InputError(f"{self.name}: {k}={v} outside [{lo}, {hi}]")
        return merged


def _choose(rng, weights, n):
    w = np.asarray(weights, dtype=float)
    return rng.choice(len(w), size=n, p=w / w.sum())


def _box(rng, lo, hi, n):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo + (hi - lo) * rng.random((n, len(lo)))


def _squares(p):
    sa, sb, gap, dy = p["side_a"], p["side_b"], p["gap"], p["dy"]
    a_lo = np.array([-gap / 2 - sa, -sa / 2])
    b_lo = np.array([gap / 2, dy - sb / 2])
    return [(a_lo, a_lo + sa), (b_lo, b_lo + sb)]


def _gen_two_intervals(p, n, rng):
    lab = _choose(rng, [1.0, 1.0], n)
    u = rng.random(n)
    x = np.where(lab == 0, -2.0 + u, 1.0 + u)
    return x[:, None], lab


def _gen_two_squares(p, n, rng):
    boxes = _squares(p)
    lab = _choose(rng, [np.prod(hi - lo) for lo, hi in boxes], n)
    pts = np.empty((n, 2))
    for i, (lo, hi) in enumerate(boxes):
        sel = lab == i
        pts[sel] = _box(rng, lo, hi, int(sel.sum()))
    return pts, lab


def _gen_square(p, n, rng):
    h = p["side"] / 2
    return _box(rng, [-h, -h], [h, h], n), np.zeros(n, dtype=int)


def _gen_ring(p, n, rng):
    r, w = p["radius"], p["width"]
    rad = np.sqrt(rng.uniform((r - w) ** 2, (r + w) ** 2, n))
    th = rng.uniform(0.0, 2 * np.pi, n)
    return np.stack([rad * np.cos(th), rad * np.sin(th)], axis=1), np.zeros(n, dtype=int)


def _checker_cells(p):
    c = p["cell"]
    cells = []
    for i in range(4):
        for j in range(4):
            if (i + j) % 2 == 0:
                lo = np.array([-2 * c + i * c, -2 * c + j * c])
                cells.append((lo, lo + c))
    return cells


def _gen_checkerboard(p, n, rng):
    cells = _checker_cells(p)
    lab = _choose(rng, np.ones(len(cells)), n)
    pts = np.empty((n, 2))
    for i, (lo, hi) in enumerate(cells):
        sel = lab == i
        pts[sel] = _box(rng, lo, hi, int(sel.sum()))
    return pts, lab


def _gen_sphere(p, n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return p["radius"] * v, np.zeros(n, dtype=int)


def torus_surface(R, r, theta, phi):
    """Point on the torus for tube angle ``theta`` and ring angle ``phi``."""
    rho = R + r * np.cos(theta)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), r * np.sin(theta)], axis=-1)


def _gen_torus(p, n, rng):
    R, r = p["major"], p["minor"]
    thetas = []
    while sum(len(t) for t in thetas) < n:
        th = rng.uniform(0.0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (R + r * np.cos(th)) / (R + r)
        thetas.append(th[keep])
    theta = np.concatenate(thetas)[:n]
    phi = rng.uniform(0.0, 2 * np.pi, n)
    out = torus_surface(R, r, theta, phi)
    return out, np.zeros(n, dtype=int)


def _box_faces(lo, hi):
    """Six faces of an axis-aligned box as (origin, edge_u, edge_v)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        eu = np.zeros(3)
        eu[u_ax] = ext[u_ax]
        ev = np.zeros(3)
        ev[v_ax] = ext[v_ax]
        for side in (lo[axis], hi[axis]):
            o = lo.copy()
            o[axis] = side
            faces.append((o, eu, ev))
    return faces


def _sample_quads(quads, labels, n, rng):
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev in quads])
    pick = _choose(rng, areas, n)
    uv = rng.random((n, 2))
    pts = np.empty((n, 3))
    for i, (o, eu, ev) in enumerate(quads):
        sel = pick == i
        pts[sel] = o + uv[sel, :1] * eu + uv[sel, 1:] * ev
    return pts, np.asarray(labels)[pick]


def _gen_winged_body(p, n, rng):
    L, t, span, chord = p["length"], p["thickness"], p["span"], p["chord"]
    body = _box_faces([-L / 2, -t / 2, -t / 2], [L / 2, t / 2, t / 2])
    left = (np.array([-chord / 2, t / 2, 0.0]), np.array([chord, 0, 0]), np.array([0, span, 0]))
    right = (np.array([-chord / 2, -t / 2 - span, 0.0]), np.array([chord, 0, 0]), np.array([0, span, 0]))
    quads = body + [left, right]
    labels = [0] * len(body) + [1, 2]
    return _sample_quads(quads, labels, n, rng)


def _gen_two_boxes(p, n, rng):
    s, gap = p["size"], p["gap"]
    a = _box_faces([-gap / 2 - s, -s / 2, -s / 2], [-gap / 2, s / 2, s / 2])
    b = _box_faces([gap / 2, -s / 2, -s / 2], [gap / 2 + s, s / 2, s / 2])
    return _sample_quads(a + b, [0] * 6 + [1] * 6, n, rng)


FAMILIES = {
    "two_intervals_1d": ShapeFamily("two_intervals_1d", 1, {}, {}, ("left", "right")),
    "two_squares_2d": ShapeFamily(
        "two_squares_2d", 2,
        {"side_a": (0.5, 1.5), "side_b": (0.5, 1.5), "gap": (0.5, 2.5), "dy": (-0.75, 0.75)},
        {"side_a": 1.0, "side_b": 1.0, "gap": 2.0, "dy": 0.0},
        ("left", "right"),
    ),
    "square_2d": ShapeFamily("square_2d", 2, {"side": (0.1, 10.0)}, {"side": 2.0}, ("square",)),
    "ring_2d": ShapeFamily(
        "ring_2d", 2, {"radius": (0.5, 1.5), "width": (0.02, 0.4)},
        {"radius": 1.0, "width": 0.15}, ("ring",),
    ),
    "checkerboard_2d": ShapeFamily(
        "checkerboard_2d", 2, {"cell": (0.25, 1.0)}, {"cell": 0.5}, ("cells",),
    ),
    "sphere_3d": ShapeFamily("sphere_3d", 3, {"radius": (0.5, 1.5)}, {"radius": 1.0}, ("sphere",)),
    "torus_3d": ShapeFamily(
        "torus_3d", 3, {"major": (0.6, 1.2), "minor": (0.1, 0.5)},
        {"major": 1.0, "minor": 0.3}, ("torus",),
    ),
    "winged_body_3d": ShapeFamily(
        "winged_body_3d", 3,
        {"length": (1.5, 2.5), "thickness": (0.15, 0.4), "span": (0.6, 1.2), "chord": (0.3, 0.7)},
        {"length": 2.0, "thickness": 0.25, "span": 0.9, "chord": 0.5},
        ("fuselage", "left_wing", "right_wing"),
    ),
    "two_boxes_3d": ShapeFamily(
        "two_boxes_3d", 3, {"size": (0.4, 1.0), "gap": (0.3, 1.5)},
        {"size": 0.7, "gap": 0.8}, ("left", "right"),
    ),
}

_GENERATORS = {
    "two_intervals_1d": _gen_two_intervals,
    "two_squares_2d": _gen_two_squares,
    "square_2d": _gen_square,
    "ring_2d": _gen_ring,
    "checkerboard_2d": _gen_checkerboard,
    "sphere_3d": _gen_sphere,
    "torus_3d": _gen_torus,
    "winged_body_3d": _gen_winged_body,
    "two_boxes_3d": _gen_two_boxes,
}


def get_family(family):
    if isinstance(family, ShapeFamily):
        return family
    try:
        return FAMILIES[family]
    except KeyError:
        raise InputError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


def sample_shape(family, params=None, n=2048, seed=0, return_labels=False):
    """``n`` i.i.d. points from one shape of ``family``.

    Deterministic in ``(family, params, n, seed)``.  With ``return_labels``
    the part index of each point is returned as well.
    """
    fam = get_family(family)
    if n < 1:
        raise InputError("n must be >= 1")
    p = fam.check(params)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts, labels = _GENERATORS[fam.name](p, n, rng)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    return (pts, np.asarray(labels, dtype=int)) if return_labels else pts


# -- analytic densities --------------------------------------------------------


def _box_density_1d(x, lo, hi, sigma):
    if sigma == 0:
        return ((x >= lo) & (x < hi)).astype(float)
    return ndtr((hi - x) / sigma) - ndtr((lo - x) / sigma)


def _entropy_from_grid(p, cell):
    p = np.asarray(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(p > 0, p * np.log(p), 0.0)
    return float(-integrand.sum() * cell)


def _boxes_entropy(boxes, sigma, step):
    areas = np.array([np.prod(hi - lo) for lo, hi in boxes])
    if sigma == 0:
        return float(np.log(areas.sum()))
    lo = np.min([b[0] for b in boxes], axis=0) - 8 * sigma
    hi = np.max([b[1] for b in boxes], axis=0) + 8 * sigma
    xs = np.arange(lo[0], hi[0], step) + step / 2
    ys = np.arange(lo[1], hi[1], step) + step / 2
    dens = np.zeros((len(xs), len(ys)))
    total = areas.sum()
    for blo, bhi in boxes:
        px = _box_density_1d(xs, blo[0], bhi[0], sigma)
        py = _box_density_1d(ys, blo[1], bhi[1], sigma)
        dens += np.outer(px, py) / total
    return _entropy_from_grid(dens, step * step)


def analytic_nll(family, params=None, sigma=0.0, step=None):
    """Differential entropy (nats) of the ``sigma``-smoothed target density.

    This is the lowest expected negative log-likelihood any model can reach
    on noise-augmented samples.  Computed by midpoint quadrature of the
    Gaussian-convolved density (default step ``1e-4`` in 1-D, ``2e-3`` in 2-D).

    Raises:
        UnsupportedError: the family has no closed-form density here.
    """
    fam = get_family(family)
    p = fam.check(params)
    if fam.name == "two_intervals_1d":
        if sigma == 0:
            return float(np.log(2.0))
        step = step or 1e-4
        xs = np.arange(-2 - 8 * sigma, 2 + 8 * sigma, step) + step / 2
        dens = 0.5 * (_box_density_1d(xs, -2, -1, sigma) + _box_density_1d(xs, 1, 2, sigma))
        return _entropy_from_grid(dens, step)
    if fam.name == "two_squares_2d":
        return _boxes_entropy(_squares(p), sigma, step or 2e-3)
    if fam.name == "square_2d":
        h = p["side"] / 2
        return _boxes_entropy([(np.array([-h, -h]), np.array([h, h]))], sigma, step or 2e-3)
    if fam.name == "checkerboard_2d":
        return _boxes_entropy(_checker_cells(p), sigma, step or 2e-3)
    if fam.name == "ring_2d" and sigma == 0:
        r, w = p["radius"], p["width"]
        return float(np.log(np.pi * ((r + w) ** 2 - (r - w) ** 2)))
    raise UnsupportedError(f"no closed-form density for {fam.name} at sigma={sigma}")


def log_density(family, x, params=None):
    """Exact log-density of the noise-free target where one exists."""
    fam = get_family(family)
    p = fam.check(params)
    x = np.asarray(x, dtype=float)
    if fam.name == "two_intervals_1d":
        inside = ((x[..., 0] >= -2) & (x[..., 0] < -1)) | ((x[..., 0] >= 1) & (x[..., 0] < 2))
        return np.where(inside, np.log(0.5), -np.inf)
    if fam.name in ("two_squares_2d", "square_2d", "checkerboard_2d"):
        if fam.name == "two_squares_2d":
            boxes = _squares(p)
        elif fam.name == "square_2d":
            h = p["side"] / 2
            boxes = [(np.array([-h, -h]), np.array([h, h]))]
        else:
            boxes = _checker_cells(p)
        total = sum(np.prod(hi - lo) for lo, hi in boxes)
        inside = np.zeros(x.shape[:-1], dtype=bool)
        for lo, hi in boxes:
            inside |= np.all((x >= lo) & (x <= hi), axis=-1)
        return np.where(inside, -np.log(total), -np.inf)
    raise UnsupportedError(f"no closed-form density for {fam.name}")


# -- preprocessing ---------------------------------------------------------------


def normalize_cloud(X):
    """Center at the mean and scale to max-norm 1.

    Returns:
        ``(normalized, center, scale)`` so that ``X == normalized * scale + center``.
    """
    X = np.asarray(X, dtype=float)
    center = X.mean(axis=0)
    Xc = X - center
    scale = float(np.max(np.linalg.norm(Xc, axis=1)))
    if scale == 0:
        raise InputError("cannot normalize a cloud with zero extent")
    return Xc / scale, center, scale


def random_rotation_matrix(d, rng):
    """Uniform rotation: Haar measure on SO(3), uniform angle in 2-D."""
    if d == 3:
        return Rotation.random(random_state=rng).as_matrix()
    if d == 2:
        a = rng.uniform(0.0, 2 * np.pi)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    raise InputError(f"rotations need d in (2, 3), got {d}")


def random_rotation(X, rng, identity=False):
    """Rotate a cloud ``[N, d]`` about the origin by a uniform random rotation."""
    X = np.asarray(X, dtype=float)
    if identity:
        return X.copy()
    R = random_rotation_matrix(X.shape[-1], rng)
    return X @ R.T


def rotation_angle(R):
    """Rotation angle (radians) of a 3x3 rotation matrix."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def split_indices(n, rng, fractions=(0.7, 0.1, 0.2)):
    """Shuffle ``range(n)`` into train/val/test index arrays (70/10/20 by default)."""
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


@dataclass
class ShapeDataset:
    """A batch of shapes from one family.

    Attributes:
        clouds: ``[S, N, d]`` normalized clouds.
        labels: ``[S, N]`` part labels.
        params: Per-shape generator parameters.
        centers, scales: Normalization applied to each shape.
    """

    family: str
    clouds: np.ndarray
    labels: np.ndarray
    params: list
    centers: np.ndarray
    scales: np.ndarray

    def __len__(self):
        return len(self.clouds)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return ShapeDataset(self.family, self.clouds[idx], self.labels[idx],
                            [self.params[i] for i in idx], self.centers[idx], self.scales[idx])


def make_dataset(family, n_shapes, n_points, seed=0, vary=True, normalize=True):
    """Draw ``n_shapes`` shapes (random parameters if ``vary``) of ``n_points`` each."""
    fam = get_family(family)
    if n_shapes < 1:
        raise InputError("n_shapes must be >= 1")
    rng = np.random.default_rng(seed)
    clouds, labels, params, centers, scales = [], [], [], [], []
    for _ in range(n_shapes):
        p = fam.sample_params(rng) if vary else dict(fam.defaults)
        pts, lab = sample_shape(fam, p, n_points, rng, return_labels=True)
        if normalize:
            pts, c, s = normalize_cloud(pts)
        else:
            c, s = np.zeros(fam.dim), 1.0
        clouds.append(pts)
        labels.append(lab)
        params.append(p)
        centers.append(c)
        scales.append(s)
    return ShapeDataset(fam.name, np.stack(clouds), np.stack(labels), params,
                        np.stack(centers), np.asarray(scales))
