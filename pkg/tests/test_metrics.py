import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmix.data import make_dataset, random_rotation_matrix, sample_shape
from flowmix.exceptions import InputError
from flowmix.metrics import (
    MetricsReport,
    bounding_cube,
    chamfer,
    cov_mmd,
    distance_matrix,
    emd,
    evaluate,
    f1_score,
    jsd,
    nna1,
    precision_recall,
)

# -- brute-force oracles ------------------------------------------------------------


def naive_chamfer(A, B):
    def one_way(P, Q):
        return np.mean([min(np.sum((p - q) ** 2) for q in Q) for p in P])

    return one_way(A, B) + one_way(B, A)


def brute_emd(A, B):
    n = len(A)
    return min(
        np.mean([np.linalg.norm(A[i] - B[p[i]]) for i in range(n)])
        for p in itertools.permutations(range(n))
    )


def naive_f1(pred, gt, tau):
    def frac(P, Q):
        return np.mean([min(np.sum((p - q) ** 2) for q in Q) < tau for p in P])

    p, r = frac(pred, gt), frac(gt, pred)
    return 0.0 if p + r == 0 else 100 * 2 * p * r / (p + r)


def direct_histogram(S, R, lo, hi):
    counts = {}
    total = 0
    for cloud in S:
        for x in cloud:
            key = tuple(min(max(int((x[k] - lo[k]) / (hi[k] - lo[k]) * R), 0), R - 1)
                        for k in range(len(x)))
            counts[key] = counts.get(key, 0) + 1
            total += 1
    return {k: v / total for k, v in counts.items()}


def direct_jsd(S_a, S_b, R, lo, hi):
    p, q = direct_histogram(S_a, R, lo, hi), direct_histogram(S_b, R, lo, hi)
    out = 0.0
    for key in set(p) | set(q):
        a, b = p.get(key, 0.0), q.get(key, 0.0)
        m = (a + b) / 2
        if a > 0:
            out += 0.5 * a * np.log(a / m)
        if b > 0:
            out += 0.5 * b * np.log(b / m)
    return out


def brute_cov_mmd(S_gen, S_ref, fn, similarity):
    better = (lambda a, b: a > b) if similarity else (lambda a, b: a < b)
    matched = set()
    for g in S_gen:
        best, idx = None, None
        for j, r in enumerate(S_ref):
            v = fn(g, r)
            if best is None or better(v, best):
                best, idx = v, j
        matched.add(idx)
    mmd = []
    for r in S_ref:
        best = None
        for g in S_gen:
            v = fn(g, r)
            if best is None or better(v, best):
                best = v
        mmd.append(best)
    return len(matched) / len(S_ref), float(np.mean(mmd))


def brute_nna(S_gen, S_ref, fn, similarity):
    pool = [(c, 0) for c in S_gen] + [(c, 1) for c in S_ref]
    better = (lambda a, b: a > b) if similarity else (lambda a, b: a < b)
    correct = 0
    for i, (ci, li) in enumerate(pool):
        best, lab = None, None
        for j, (cj, lj) in enumerate(pool):
            if i == j:
                continue
            v = fn(ci, cj)
            if best is None or better(v, best):
                best, lab = v, lj
        correct += lab == li
    return correct / len(pool)


DIST_FNS = {
    "cd": (chamfer, False),
    "emd": (emd, False),
    "f1": (lambda a, b: f1_score(a, b, 0.05), True),
}


def small_sets(seed, n_sets=6, n_points=5, d=2):
    rng = np.random.default_rng(seed)
    S_a = [rng.normal(size=(n_points, d)) for _ in range(n_sets)]
    S_b = [rng.normal(size=(n_points, d)) + 0.3 for _ in range(n_sets)]
    return S_a, S_b


# -- chamfer -------------------------------------------------------------------------


def test_chamfer_hand_cases():
    assert chamfer([[0.0, 0.0]], [[1.0, 0.0]]) == 2.0
    A = np.random.default_rng(0).normal(size=(10, 3))
    assert chamfer(A, A) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_naive_scan(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(int(rng.integers(1, 60)), 3)), rng.normal(size=(int(rng.integers(1, 60)), 3))
    assert chamfer(A, B) == pytest.approx(naive_chamfer(A, B), rel=1e-12)


def test_chamfer_matches_naive_scan_at_1000():
    rng = np.random.default_rng(9)
    A, B = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3))
    D = np.sum((A[:, None] - B[None]) ** 2, axis=-1)
    naive = D.min(axis=1).mean() + D.min(axis=0).mean()
    assert chamfer(A, B) == pytest.approx(naive, rel=1e-12)


# -- EMD -------------------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_emd_matches_permutation_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(3):
        A, B = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert emd(A, B) == pytest.approx(brute_emd(A, B), rel=1e-12)


def test_emd_trivial_and_errors(rng):
    A = rng.normal(size=(20, 2))
    assert emd(A, A) == 0.0
    assert emd(A, A[rng.permutation(20)]) == 0.0
    with pytest.raises(InputError):
        emd(A, A[:5])


def test_emd_shift():
    A = np.random.default_rng(0).normal(size=(30, 2))
    assert emd(A, A + [3.0, 4.0]) == pytest.approx(5.0, abs=1e-9)


def test_approximate_emd_at_2048():
    A = sample_shape("torus_3d", None, 2048, seed=1)
    B = sample_shape("torus_3d", None, 2048, seed=2)
    approx, info = emd(A, B, return_info=True)
    exact = emd(A, B, n_exact=4096)
    assert info["algorithm"] == "auction" and info["n"] == 2048
    assert exact - 1e-12 <= approx <= exact + info["eps"]
    assert abs(approx - exact) / exact < 0.05


def test_approximate_emd_on_downsample():
    A = sample_shape("torus_3d", None, 2048, seed=1)[::4]
    B = sample_shape("torus_3d", None, 2048, seed=2)[::4]
    approx = emd(A, B, n_exact=0)
    assert abs(approx - emd(A, B)) / emd(A, B) < 0.05


def test_emd_info_records_solver(rng):
    A, B = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    _, info = emd(A, B, return_info=True)
    assert info == {"algorithm": "hungarian", "n": 8}
    _, info = emd(A, B, n_exact=4, return_info=True)
    assert info["algorithm"] == "auction" and info["eps"] > 0 and info["rounds"] > 0


# -- F1 --------------------------------------------------------------------------------


def test_f1_hand_cases():
    pred = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
    gt = np.array([[0.0, 0.0], [0.0, 10.0], [0.0, 20.0]])
    assert precision_recall(pred, gt, 1e-4) == (pytest.approx(1 / 3), pytest.approx(1 / 3))
    assert f1_score(pred, gt, 1e-4) == pytest.approx(33.3, abs=0.05)
    assert f1_score(pred, pred) == 100.0
    assert f1_score(pred, pred + 100.0) == 0.0


def test_f1_threshold_is_squared():
    a, b = np.zeros((1, 2)), np.array([[0.05, 0.0]])  # squared distance 0.0025
    assert f1_score(a, b, tau=0.003) == 100.0
    assert f1_score(a, b, tau=0.002) == 0.0


def test_f1_matches_naive(rng):
    for _ in range(5):
        A, B = rng.normal(size=(15, 2)), rng.normal(size=(12, 2))
        assert f1_score(A, B, 0.1) == pytest.approx(naive_f1(A, B, 0.1), abs=1e-12)


def test_f1_errors():
    with pytest.raises(InputError):
        f1_score(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(InputError):
        f1_score(np.zeros((1, 2)), np.zeros((1, 2)), tau=0.0)


# -- symmetry and invariances ---------------------------------------------------------


@given(st.integers(0, 10_000))
def test_pairwise_symmetry_and_invariance(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    assert chamfer(A, B) == pytest.approx(chamfer(B, A), rel=1e-12)
    assert emd(A, B) == pytest.approx(emd(B, A), rel=1e-12)
    p, r = precision_recall(A, B, 0.3)
    assert precision_recall(B, A, 0.3) == (r, p)
    R, t = random_rotation_matrix(3, rng), rng.normal(size=3) * 5
    A2, B2 = A @ R.T + t, B @ R.T + t
    assert chamfer(A2, B2) == pytest.approx(chamfer(A, B), abs=1e-9)
    assert emd(A2, B2) == pytest.approx(emd(A, B), abs=1e-9)
    # thresholded counts move only for distances within rounding of tau
    assert f1_score(A2, B2, 0.3) == pytest.approx(f1_score(A, B, 0.3), abs=1e-9)
    pa, pb = rng.permutation(12), rng.permutation(12)
    assert chamfer(A[pa], B[pb]) == pytest.approx(chamfer(A, B), rel=1e-12)
    assert emd(A[pa], B[pb]) == pytest.approx(emd(A, B), rel=1e-12)


# -- JSD -------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_jsd_matches_direct_histogram(seed):
    S_a, S_b = small_sets(seed, n_sets=3, n_points=7, d=3)
    lo, hi = bounding_cube(S_a, S_b)
    assert jsd(S_a, S_b, resolution=4) == pytest.approx(direct_jsd(S_a, S_b, 4, lo, hi), abs=1e-12)


def test_jsd_extremes():
    S = [np.random.default_rng(0).uniform(size=(50, 3)) for _ in range(3)]
    assert jsd(S, S) == 0.0
    far = [c + 10.0 for c in S]
    assert jsd(S, far) == pytest.approx(np.log(2), abs=1e-12)


def test_jsd_bounds_and_errors():
    S_a, S_b = small_sets(1, d=3)
    assert 0 <= jsd(S_a, S_b) <= np.log(2)
    with pytest.raises(InputError):
        jsd([np.ones((3, 3))], [np.ones((3, 3))])
    with pytest.raises(InputError):
        jsd([], S_b)


# -- COV / MMD / 1-NNA ----------------------------------------------------------------


@pytest.mark.parametrize("distance", ["cd", "emd", "f1"])
@pytest.mark.parametrize("seed", range(3))
def test_cov_mmd_match_brute_force(distance, seed):
    S_a, S_b = small_sets(seed, n_sets=8)
    fn, sim = DIST_FNS[distance]
    got = cov_mmd(S_a, S_b[:5], distance, tau=0.05)
    want = brute_cov_mmd(S_a, S_b[:5], fn, sim)
    assert got[0] == want[0]
    assert got[1] == pytest.approx(want[1], rel=1e-12)


@pytest.mark.parametrize("distance", ["cd", "emd", "f1"])
@pytest.mark.parametrize("seed", range(3))
def test_nna_matches_brute_force(distance, seed):
    S_a, S_b = small_sets(seed, n_sets=8)
    fn, sim = DIST_FNS[distance]
    assert nna1(S_a, S_b, distance, tau=0.05) == brute_nna(S_a, S_b, fn, sim)


def test_identical_sets():
    S, _ = small_sets(0, n_sets=5, n_points=20)
    cov, mmd = cov_mmd(S, S, "cd")
    assert (cov, mmd) == (1.0, 0.0)
    assert cov_mmd(S, S, "f1") == (1.0, 100.0)


def test_single_generated_cloud_covers_one_reference():
    S_a, S_b = small_sets(0, n_sets=6)
    for dist in ["cd", "emd", "f1"]:
        assert cov_mmd(S_a[:1], S_b, dist, tau=0.05)[0] == pytest.approx(1 / 6)


def test_translated_sets_are_separable():
    S, _ = small_sets(3, n_sets=8, n_points=20)
    T, _ = small_sets(4, n_sets=8, n_points=20)
    assert nna1(S, [c + 50.0 for c in T], "cd") == 1.0


def test_nna_size_mismatch():
    S_a, S_b = small_sets(0)
    with pytest.raises(InputError):
        nna1(S_a, S_b[:-1])


@given(st.integers(0, 1000))
def test_set_metrics_ignore_ordering(seed):
    rng = np.random.default_rng(seed)
    S_a, S_b = small_sets(seed, n_sets=5)
    shuffle = lambda S: [S[i][rng.permutation(len(S[i]))] for i in rng.permutation(len(S))]
    S_a2, S_b2 = shuffle(S_a), shuffle(S_b)
    assert nna1(S_a, S_b) == nna1(S_a2, S_b2)
    c1, m1 = cov_mmd(S_a, S_b)
    c2, m2 = cov_mmd(S_a2, S_b2)
    assert c1 == c2 and m1 == pytest.approx(m2, rel=1e-12)
    assert jsd(S_a, S_b) == pytest.approx(jsd(S_a2, S_b2), abs=1e-12)


def test_distance_matrix_symmetric_fill():
    S, _ = small_sets(2, n_sets=4)
    D = distance_matrix(S, S, "cd")
    np.testing.assert_array_equal(D, D.T)
    assert np.all(np.diag(D) == 0)


def test_same_generator_sets_are_indistinguishable():
    S_gen = make_dataset("torus_3d", 50, 256, seed=100).clouds
    S_ref = make_dataset("torus_3d", 50, 256, seed=200).clouds
    for dist in ["cd", "emd", "f1"]:
        assert 0.40 <= nna1(S_gen, S_ref, dist, tau=1e-3) <= 0.60


# -- report ----------------------------------------------------------------------------


def test_evaluate_report():
    S_a, S_b = small_sets(0, n_sets=4, n_points=10, d=3)
    rep = evaluate(S_a, S_b, tau=0.05, seed=7)
    vals = rep.values()
    assert set(vals) == set(MetricsReport.METRICS)
    assert all(np.isfinite(v) for v in vals.values())
    assert rep.cd == pytest.approx(np.mean([chamfer(a, b) for a, b in zip(S_a, S_b)]))
    assert rep.settings["tau"] == 0.05 and rep.settings["jsd_resolution"] == 28
    assert rep.settings["seed"] == 7 and "hungarian" in rep.settings["emd_algorithm"]
    assert json.loads(rep.to_json())["settings"]["n_gen"] == 4
    assert len(rep.csv_row().split(",")) == len(rep.csv_header().split(","))


def test_evaluate_unequal_sets_skips_paired_metrics():
    S_a, S_b = small_sets(0, n_sets=4, n_points=10, d=3)
    rep = evaluate(S_a, S_b[:3])
    assert np.isnan(rep.cd) and np.isnan(rep.nna1_cd)
    assert np.isfinite(rep.cov_cd) and np.isfinite(rep.jsd)


def test_evaluate_identical_sets():
    S, _ = small_sets(1, n_sets=4, n_points=10, d=3)
    rep = evaluate(S, S)
    assert rep.jsd == 0 and rep.mmd_cd == 0 and rep.cov_cd == 1 and rep.f1 == 100
