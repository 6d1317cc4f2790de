import numpy as np
import pytest
from hypothesis import given, strategies as st

from grouprec.grouper import (CodebookStage, KMeansError, assign, encode, kmeans_fit, kmeans_plusplus_init, load_assignments,
                              load_codebooks, nearest, reconstruct, rq_kmeans_fit, save_assignments, save_codebooks,
                              snap)
from oracles import lloyd, nearest_scan


def _unit(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_k1_centroid_is_mean():
    X = snap(np.random.default_rng(0).normal(size=(50, 3)))
    st_ = kmeans_fit(X, 1)
    np.testing.assert_allclose(st_.centroids[0], X.mean(axis=0), atol=1e-11)


def test_separated_clusters():
    X = np.array([[0.0] * 4] * 10 + [[10.0] * 4] * 10)
    C = kmeans_fit(X, 2, seed=3).centroids
    got = sorted(C.tolist())
    np.testing.assert_allclose(got, [[0.0] * 4, [10.0] * 4])


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_lloyd_from_same_init(seed):
    rng = np.random.default_rng(seed)
    X = snap(rng.normal(size=(200, 4)))
    init = kmeans_plusplus_init(X, 6, np.random.default_rng(seed))
    fit = kmeans_fit(X, 6, init=init, max_iters=300, tol=0.0)
    _, _, sse = lloyd(X.tolist(), init.tolist(), 300)
    assert fit.objective_trace[-1] <= sse + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_lloyd_objective_nonincreasing(seed):
    X = _unit(np.random.default_rng(seed), 300, 8)
    trace = kmeans_fit(X, 12, seed=seed).objective_trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_k_larger_than_points_errors():
    with pytest.raises(KMeansError):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(KMeansError):
        kmeans_fit(np.zeros((3, 2)), 0)


def test_empty_clusters_are_reseeded():
    X = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5 + [[5.0, 5.0]])
    init = np.array([[0.0, 0.0], [100.0, 100.0], [-100.0, -100.0]])
    C = kmeans_fit(X, 3, init=init).centroids
    assert np.all(np.isfinite(C))
    assert {tuple(c) for c in C} == {(0.0, 0.0), (1.0, 1.0), (5.0, 5.0)}


def test_assign_exact_match_and_tie():
    C = snap(np.random.default_rng(1).normal(size=(6, 3)))
    k, r = assign(C[3], CodebookStage(1, C))
    assert k == 3 and not r.any()
    C = np.array([[9.0, 9.0], [1.0, 0.0], [7.0, 7.0], [8.0, 8.0], [-1.0, 0.0]])
    k, r = assign([0.0, 0.0], CodebookStage(1, C))
    assert k == 1 and r.tolist() == [-1.0, 0.0]


def test_assign_dimension_mismatch():
    with pytest.raises(KMeansError):
        assign([0.0, 1.0, 2.0], CodebookStage(1, np.zeros((2, 2))))


@pytest.mark.parametrize("seed", range(3))
def test_nearest_matches_brute_force_on_1000_points(seed):
    rng = np.random.default_rng(seed)
    X = snap(_unit(rng, 1000, 6))
    C = snap(_unit(rng, 16, 6))
    C[5] = C[2]  # duplicated centroid forces exact ties
    X[:10] = C[2]
    idx, _ = nearest(X, C)
    Cl = C.tolist()
    assert idx.tolist() == [nearest_scan(p, Cl) for p in X.tolist()]


@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=1, max_size=30))
def test_nearest_on_lattice_ties(pts):
    C = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0], [1.0, 1.0]])
    X = np.array(pts, dtype=float) / 2
    idx, _ = nearest(X, C)
    assert idx.tolist() == [nearest_scan(p, C.tolist()) for p in X.tolist()]


@pytest.fixture(scope="module")
def rq():
    X = _unit(np.random.default_rng(7), 600, 16)
    return X, rq_kmeans_fit(X, M=3, K=8, seed=7)


def test_telescoping_identity_bit_exact(rq):
    X, res = rq
    r = snap(X)
    for m, st_ in enumerate(res.codebooks):
        c = st_.centroids[res.codes[:, m]]
        nxt = r - c
        assert np.array_equal(nxt + c, r)
        r = nxt
    assert np.array_equal(r, res.residuals)
    for u in range(len(X)):
        err = snap(X[u]) - reconstruct(res.codes[u], res.codebooks)
        assert np.array_equal(err, res.residuals[u])


def test_reconstruction_error_equals_final_residual(rq):
    X, res = rq
    for u in range(0, len(X), 37):
        err = snap(X[u]) - reconstruct(res.codes[u], res.codebooks)
        # same reduction as the fit so the comparison can be exact
        assert np.linalg.norm(err[None, :], axis=1)[0] == res.residual_norms[u, -1]


def test_mean_residual_norm_nonincreasing(rq):
    _, res = rq
    means = res.residual_norms.mean(axis=0)
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_codes_shape_and_range(rq):
    _, res = rq
    assert res.codes.shape == (600, 3)
    assert res.codes.min() >= 0 and res.codes.max() < 8


def test_single_stage_is_flat_kmeans():
    X = _unit(np.random.default_rng(2), 200, 5)
    res = rq_kmeans_fit(X, M=1, K=6, seed=4)
    flat = kmeans_fit(X, 6, seed=4 * 1000 + 1)
    np.testing.assert_array_equal(res.codebooks[0].centroids, flat.centroids)
    np.testing.assert_array_equal(res.codes[:, 0], nearest(snap(X), flat.centroids)[0])
    np.testing.assert_array_equal(reconstruct(res.codes[0], res.codebooks), flat.centroids[res.codes[0, 0]])


def test_large_scale_config_accepted():
    X = _unit(np.random.default_rng(0), 300, 8)
    res = rq_kmeans_fit(X, M=3, K=256, seed=0, max_iters=5)
    assert res.codes.shape == (300, 3)


def test_reconstruction_improves_with_k():
    X = _unit(np.random.default_rng(11), 2000, 16)
    e32 = rq_kmeans_fit(X, M=3, K=32, seed=1, max_iters=30).residual_norms[:, -1].mean()
    e256 = rq_kmeans_fit(X, M=3, K=256, seed=1, max_iters=30).residual_norms[:, -1].mean()
    assert e256 < e32


def test_reconstruct_bad_index():
    st_ = [CodebookStage(1, np.zeros((2, 3)))]
    with pytest.raises(IndexError):
        reconstruct([2], st_)
    with pytest.raises(KMeansError):
        reconstruct([0, 0], st_)


def test_rq_requires_stage():
    with pytest.raises(KMeansError):
        rq_kmeans_fit(np.zeros((4, 2)), M=0)


def test_deterministic(rq):
    X, res = rq
    again = rq_kmeans_fit(X, M=3, K=8, seed=7)
    assert np.array_equal(again.codes, res.codes)
    for a, b in zip(again.codebooks, res.codebooks):
        assert a.centroids.tobytes() == b.centroids.tobytes()


def test_encode_new_points_matches_fit(rq):
    X, res = rq
    codes, r = encode(X, res.codebooks)
    assert np.array_equal(codes, res.codes) and np.array_equal(r, res.residuals)


def test_files_roundtrip(tmp_path, rq):
    X, res = rq
    save_codebooks(res.codebooks, tmp_path / "cb.jsonl")
    back = load_codebooks(tmp_path / "cb.jsonl")
    for a, b in zip(back, res.codebooks):
        assert a.centroids.tobytes() == b.centroids.tobytes()
    ids = np.arange(len(X))[::-1]
    save_assignments(ids, res.codes, tmp_path / "a.jsonl")
    got = load_assignments(tmp_path / "a.jsonl")
    assert got[ids[0]] == tuple(res.codes[0])
    assert list(got) == sorted(got)


@pytest.mark.xfail(strict=True, reason="200 archetypes over 16 first-level clusters caps majority purity near 1/12.5; "
                                       "finest-group purity is checked by the acceptance suite instead")
def test_first_level_purity_on_noise_free_world():
    from collections import Counter, defaultdict

    from grouprec.pipeline import Experiment, RunConfig

    ex = Experiment(RunConfig.load(None, {"world_noise_rate": 0.0}))
    pri = ex.context().priors
    arch = {u.user_id: u.archetype_id for u in ex.world.users}
    groups = defaultdict(list)
    for u, code in pri.user_codes.items():
        groups[code[0]].append(u)
    purity = sum(Counter(arch[u] for u in m).most_common(1)[0][1] for m in groups.values()) / len(arch)
    assert purity >= 5.0 / pri.K
