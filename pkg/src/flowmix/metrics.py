"""Point-cloud distances and generative-model metrics.

Conventions (always echoed in :class:`MetricsReport.settings`):

* CD is the sum of the two mean *squared* nearest-neighbour distances.
* F1 thresholds *squared* nearest-neighbour distances at ``tau``.
* EMD is the mean Euclidean distance of the optimal one-to-one matching;
  exact (Hungarian) up to ``n_exact`` points, an eps-scaling auction above.
* JSD is measured between voxel histograms of the union of all points of
  each set, with natural logarithms.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .exceptions import InputError

N_EXACT = 512
AUCTION_EPS_FACTOR = 0.002
JSD_RESOLUTION = 28
DEFAULT_TAU = 1e-4


def _cloud(A, name="cloud"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2 or A.shape[0] == 0:
        raise InputError(f"{name} must be a non-empty [N, d] array, got shape {A.shape}")
    return A


def nn_sq_dists(A, B):
    """Squared distance from every point of ``A`` to its nearest point in ``B``."""
    d, _ = cKDTree(B).query(A, k=1)
    return d * d


def chamfer(A, B):
    """``mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2``."""
    A, B = _cloud(A, "A"), _cloud(B, "B")
    return float(nn_sq_dists(A, B).mean() + nn_sq_dists(B, A).mean())


def _pairwise(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _auction(C, eps_final, factor=5.0):
    """Forward auction with eps-scaling for the min-cost perfect matching.

    Each phase ends with every person assigned under eps-complementary
    slackness, so the final matching costs at most ``n * eps_final`` more
    than the optimum.  Prices carry over between phases.

    Returns:
        ``(assignment, rounds)`` where ``assignment[i]`` is the column of row ``i``.
    """
    n = C.shape[0]
    prices = np.zeros(n)
    eps = max(float(C.max()) / 4, eps_final)
    rounds = 0
    while True:
        person = np.full(n, -1)
        owner = np.full(n, -1)
        free = np.arange(n)
        while free.size:
            rounds += 1
            vals = -C[free] - prices
            rows = np.arange(free.size)
            best = np.argmax(vals, axis=1)
            v1 = vals[rows, best]
            vals[rows, best] = -np.inf
            v2 = vals.max(axis=1) if n > 1 else v1
            bids = prices[best] + (v1 - v2) + eps
            # highest bid wins each object
            order = np.lexsort((bids, best))
            last = np.r_[best[order][1:] != best[order][:-1], True]
            win = order[last]
            objs = best[win]
            prev = owner[objs]
            person[prev[prev >= 0]] = -1
            owner[objs] = free[win]
            person[free[win]] = objs
            prices[objs] = bids[win]
            free = np.flatnonzero(person < 0)
        if eps <= eps_final:
            return person, rounds
        eps = max(eps / factor, eps_final)


def emd(A, B, n_exact=N_EXACT, eps_factor=AUCTION_EPS_FACTOR, return_info=False):
    """Earth mover's distance between equal-size clouds.

    Exact assignment (Hungarian) for ``n <= n_exact``.  Above that an
    eps-scaling auction with ``eps = eps_factor * mean pairwise distance``,
    whose result exceeds the exact value by at most ``eps``.
    ``return_info`` adds a dict describing the solver.
    """
    A, B = _cloud(A, "A"), _cloud(B, "B")
    if A.shape != B.shape:
        raise InputError(f"EMD needs equal-size clouds, got {A.shape} and {B.shape}")
    C = _pairwise(A, B)
    n = len(A)
    if n <= n_exact:
        rows, cols = linear_sum_assignment(C)
        value = float(C[rows, cols].mean())
        info = {"algorithm": "hungarian", "n": n}
    else:
        eps = eps_factor * float(C.mean())
        cols, rounds = _auction(C, eps)
        value = float(C[np.arange(n), cols].mean())
        info = {"algorithm": "auction", "n": n, "eps": eps, "rounds": rounds}
    return (value, info) if return_info else value


def precision_recall(pred, gt, tau=DEFAULT_TAU):
    pred, gt = _cloud(pred, "pred"), _cloud(gt, "gt")
    if tau <= 0:
        raise InputError("tau must be > 0")
    precision = float(np.mean(nn_sq_dists(pred, gt) < tau))
    recall = float(np.mean(nn_sq_dists(gt, pred) < tau))
    return precision, recall


def f1_score(pred, gt, tau=DEFAULT_TAU):
    """F1 (in percent) of points within squared distance ``tau`` of the other cloud."""
    p, r = precision_recall(pred, gt, tau)
    if p + r == 0:
        return 0.0
    return 100.0 * 2 * p * r / (p + r)


# -- set-level metrics ------------------------------------------------------------


def _clouds(S, name):
    S = [np.asarray(c, dtype=float) for c in S]
    if not S:
        raise InputError(f"{name} is empty")
    return [c[:, None] if c.ndim == 1 else c for c in S]


def bounding_cube(*sets):
    pts = np.concatenate([c for S in sets for c in S], axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float(np.max(hi - lo)) / 2
    if not half > 0:
        raise InputError("degenerate bounding box: all points coincide")
    center = (lo + hi) / 2
    return center - half, center + half


def voxel_histogram(S, resolution, lo, hi):
    """Normalized voxel counts of all points of a set (clipped into the grid)."""
    pts = np.concatenate(S, axis=0)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    idx = np.floor((pts - lo) / (hi - lo) * resolution).astype(int)
    idx = np.clip(idx, 0, resolution - 1)
    flat = np.ravel_multi_index(idx.T, (resolution,) * pts.shape[1])
    counts = np.bincount(flat, minlength=resolution ** pts.shape[1]).astype(float)
    return counts / counts.sum()


def _kl(p, q):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(S_gen, S_ref, resolution=JSD_RESOLUTION, bounds=None):
    """Jensen-Shannon divergence of the two sets' marginal voxel histograms.

    ``bounds`` is ``(lo, hi)``; by default the cube enclosing both sets.
    """
    S_gen, S_ref = _clouds(S_gen, "S_gen"), _clouds(S_ref, "S_ref")
    lo, hi = bounds if bounds is not None else bounding_cube(S_gen, S_ref)
    if np.any(np.asarray(hi, float) <= np.asarray(lo, float)):
        raise InputError("degenerate bounding box")
    p = voxel_histogram(S_gen, resolution, lo, hi)
    q = voxel_histogram(S_ref, resolution, lo, hi)
    m = 0.5 * (p + q)
    # summation rounding can step a few ulps past the bounds
    return float(np.clip(0.5 * _kl(p, m) + 0.5 * _kl(q, m), 0.0, np.log(2.0)))


SIMILARITIES = {"f1"}


def distance_matrix(S_a, S_b, distance, tau=DEFAULT_TAU, n_exact=N_EXACT):
    """``D[i, j] = distance(S_a[i], S_b[j])``."""
    fn = {
        "cd": chamfer,
        "emd": lambda a, b: emd(a, b, n_exact=n_exact),
        "f1": lambda a, b: f1_score(a, b, tau),
    }[distance]
    if S_b is S_a:
        n = len(S_a)
        D = np.empty((n, n))
        for i in range(n):
            D[i, i] = fn(S_a[i], S_a[i])
            for j in range(i + 1, n):
                D[i, j] = D[j, i] = fn(S_a[i], S_a[j])
        return D
    return np.array([[fn(a, b) for b in S_b] for a in S_a], dtype=float)


def cov_mmd_from_matrix(D, similarity=False):
    """COV and MMD from a ``[gen, ref]`` distance (or similarity) matrix."""
    if similarity:
        matched = np.argmax(D, axis=1)
        mmd = float(np.mean(np.max(D, axis=0)))
    else:
        matched = np.argmin(D, axis=1)
        mmd = float(np.mean(np.min(D, axis=0)))
    cov = len(np.unique(matched)) / D.shape[1]
    return float(cov), mmd


def cov_mmd(S_gen, S_ref, distance="cd", tau=DEFAULT_TAU, n_exact=N_EXACT):
    """Coverage and minimum matching distance.

    COV: fraction of reference clouds that are the nearest reference of at
    least one generated cloud.  MMD: mean over references of the best
    distance (or F1 similarity) to any generated cloud.
    """
    S_gen, S_ref = _clouds(S_gen, "S_gen"), _clouds(S_ref, "S_ref")
    D = distance_matrix(S_gen, S_ref, distance, tau, n_exact)
    return cov_mmd_from_matrix(D, distance in SIMILARITIES)


def nna_from_matrices(D_gg, D_gr, D_rr, similarity=False):
    """Leave-one-out 1-NN accuracy from the three blocks of the joint matrix."""
    n_g, n_r = D_gr.shape
    top = np.concatenate([D_gg, D_gr], axis=1)
    bottom = np.concatenate([D_gr.T, D_rr], axis=1)
    D = np.concatenate([top, bottom], axis=0).astype(float)
    fill = -np.inf if similarity else np.inf
    np.fill_diagonal(D, fill)
    nn = np.argmax(D, axis=1) if similarity else np.argmin(D, axis=1)
    labels = np.r_[np.zeros(n_g, dtype=int), np.ones(n_r, dtype=int)]
    return float(np.mean(labels[nn] == labels))


def nna1(S_gen, S_ref, distance="cd", tau=DEFAULT_TAU, n_exact=N_EXACT):
    """1-NN two-sample accuracy; 0.5 means the sets are indistinguishable."""
    S_gen, S_ref = _clouds(S_gen, "S_gen"), _clouds(S_ref, "S_ref")
    if len(S_gen) != len(S_ref):
        raise InputError(f"1-NNA needs equal set sizes, got {len(S_gen)} and {len(S_ref)}")
    D_gg = distance_matrix(S_gen, S_gen, distance, tau, n_exact)
    D_gr = distance_matrix(S_gen, S_ref, distance, tau, n_exact)
    D_rr = distance_matrix(S_ref, S_ref, distance, tau, n_exact)
    return nna_from_matrices(D_gg, D_gr, D_rr, distance in SIMILARITIES)


@dataclass
class MetricsReport:
    """Every metric for one generated/reference pair of sets plus its settings."""

    cd: float = float("nan")
    emd: float = float("nan")
    f1: float = float("nan")
    jsd: float = float("nan")
    cov_cd: float = float("nan")
    cov_emd: float = float("nan")
    cov_f1: float = float("nan")
    mmd_cd: float = float("nan")
    mmd_emd: float = float("nan")
    mmd_f1: float = float("nan")
    nna1_cd: float = float("nan")
    nna1_emd: float = float("nan")
    nna1_f1: float = float("nan")
    settings: dict = field(default_factory=dict)

    METRICS = ("cd", "emd", "f1", "jsd", "cov_cd", "cov_emd", "cov_f1", "mmd_cd", "mmd_emd",
               "mmd_f1", "nna1_cd", "nna1_emd", "nna1_f1")

    def values(self):
        return {k: getattr(self, k) for k in self.METRICS}

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def csv_header(self):
        return ",".join(self.METRICS)

    def csv_row(self):
        return ",".join(repr(float(getattr(self, k))) for k in self.METRICS)


def evaluate(S_gen, S_ref, tau=DEFAULT_TAU, resolution=JSD_RESOLUTION, n_exact=N_EXACT,
             distances=("cd", "emd", "f1"), bounds=None, seed=None):
    """Full metric suite between two sets of clouds.

    Paired metrics (``cd``, ``emd``, ``f1``) average over index-aligned pairs
    and are only filled when the sets have equal size (e.g. reconstructions
    against their inputs).  1-NNA likewise needs equal sizes.
    """
    S_gen, S_ref = _clouds(S_gen, "S_gen"), _clouds(S_ref, "S_ref")
    lo, hi = bounds if bounds is not None else bounding_cube(S_gen, S_ref)
    rep = MetricsReport(settings={
        "tau": tau,
        "tau_convention": "squared distance",
        "cd_convention": "sum of mean squared nearest-neighbour distances",
        "emd_convention": "mean euclidean matching distance",
        "emd_algorithm": f"hungarian for n <= {n_exact}, eps-scaling auction above",
        "emd_auction_eps_factor": AUCTION_EPS_FACTOR,
        "jsd_resolution": resolution,
        "jsd_bounds": [list(map(float, np.atleast_1d(lo))), list(map(float, np.atleast_1d(hi)))],
        "distances": list(distances),
        "n_gen": len(S_gen),
        "n_ref": len(S_ref),
        "seed": seed,
    })
    rep.jsd = jsd(S_gen, S_ref, resolution, (lo, hi))
    same = len(S_gen) == len(S_ref)
    for dist in distances:
        sim = dist in SIMILARITIES
        D_gr = distance_matrix(S_gen, S_ref, dist, tau, n_exact)
        cov, mmd = cov_mmd_from_matrix(D_gr, sim)
        setattr(rep, f"cov_{dist}", cov)
        setattr(rep, f"mmd_{dist}", mmd)
        if same:
            setattr(rep, dist, float(np.mean(np.diag(D_gr))))
            D_gg = distance_matrix(S_gen, S_gen, dist, tau, n_exact)
            D_rr = distance_matrix(S_ref, S_ref, dist, tau, n_exact)
            setattr(rep, f"nna1_{dist}", nna_from_matrices(D_gg, D_gr, D_rr, sim))
    return rep
