import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocokit.crc import (
    CrcModel,
    Dictionary,
    class_residuals,
    crc_classify,
    crc_cost,
    crc_encode,
    tune_lambda,
)
from oracles import loop_matvec, loop_sqnorm


def eye_dict():
    return Dictionary(np.eye(2), [0, 1])


def random_dict(rng, d=6, per_class=(3, 2, 4)):
    labels = np.repeat(np.arange(len(per_class)), per_class)
    return Dictionary(rng.standard_normal((d, labels.size)), labels)


def gaussian_clusters(rng, n_per=30, d=5, c=3, spread=0.1):
    centers = rng.standard_normal((c, d)) * 3
    labels = np.repeat(np.arange(c), n_per)
    feats = centers[labels].T + spread * rng.standard_normal((d, labels.size))
    return feats, labels, centers


def test_dictionary_ranges_and_sorting():
    D = Dictionary.from_samples(np.arange(10.0).reshape(2, 5), [1, 0, 1, 2, 0])
    assert D.class_ranges == ((0, 2), (2, 4), (4, 5))
    np.testing.assert_array_equal(D.labels, [0, 0, 1, 1, 2])
    np.testing.assert_array_equal(D.X[0], [1, 4, 0, 2, 3])


@pytest.mark.parametrize("labels", [[0, 2], [1, 0], [0]])
def test_dictionary_rejects_bad_labels(labels):
    with pytest.raises(ValueError):
        Dictionary(np.eye(2), labels)


def test_cost_examples(rng):
    assert crc_cost(eye_dict(), [1, 0], [1, 0], 1.0) == pytest.approx(1.0)
    D = random_dict(rng)
    y = rng.standard_normal(6)
    assert crc_cost(D, y, np.zeros(9), 0.5) == pytest.approx(y @ y)
    a = rng.standard_normal(9)
    oracle = loop_sqnorm(y - loop_matvec(D.X, a)) + 0.5 * loop_sqnorm(a)
    assert crc_cost(D, y, a, 0.5) == pytest.approx(oracle, rel=1e-12)


def test_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        crc_cost(eye_dict(), [1, 0, 0], [1, 0], 1.0)


def test_encode_examples(rng):
    np.testing.assert_allclose(crc_encode(eye_dict(), [1, 0], 1.0), [0.5, 0])
    D = random_dict(rng)
    np.testing.assert_array_equal(crc_encode(D, np.zeros(6), 0.3), np.zeros(9))
    with pytest.raises(ValueError):
        crc_encode(D, np.zeros(6), 0.0)


def test_encode_is_minimizer(rng):
    D = random_dict(rng)
    y = rng.standard_normal(6)
    lam = 0.2
    a = crc_encode(D, y, lam)
    oracle = np.linalg.solve(D.X.T @ D.X + lam * np.eye(9), D.X.T @ y)
    np.testing.assert_allclose(a, oracle, rtol=1e-10, atol=1e-12)
    grad = -D.X.T @ (y - D.X @ a) + lam * a
    assert np.max(np.abs(grad)) < 1e-8
    base = crc_cost(D, y, a, lam)
    for _ in range(100):
        assert base <= crc_cost(D, y, a + 1e-3 * rng.standard_normal(9), lam)


def test_encode_large_dictionary_uses_equivalent_route(rng):
    labels = np.repeat(np.arange(4), 150)
    D = Dictionary(rng.standard_normal((8, 600)), labels)
    y = rng.standard_normal(8)
    oracle = np.linalg.solve(D.X.T @ D.X + 0.1 * np.eye(600), D.X.T @ y)
    np.testing.assert_allclose(crc_encode(D, y, 0.1), oracle, rtol=1e-8, atol=1e-10)


def test_residual_examples():
    r = class_residuals(eye_dict(), [1, 0], [0.5, 0])
    assert r[0] == pytest.approx(1.0)
    assert r[1] == np.inf


def test_residual_exact_column(rng):
    D = random_dict(rng)
    y = D.X[:, 5].copy()  # class 1 occupies columns 3..4 -> column 5 is class 2
    alpha = np.zeros(9)
    alpha[5] = 1.0
    assert class_residuals(D, y, alpha)[2] == pytest.approx(0.0, abs=1e-24)


def test_residual_matches_loop(rng):
    D = random_dict(rng)
    y, a = rng.standard_normal(6), rng.standard_normal(9)
    got = class_residuals(D, y, a)
    for i, (lo, hi) in enumerate(D.class_ranges):
        num = loop_sqnorm(y - loop_matvec(D.X[:, lo:hi], a[lo:hi]))
        assert got[i] == pytest.approx(num / loop_sqnorm(a[lo:hi]), rel=1e-12)


def test_residual_batch_matches_single(rng):
    D = random_dict(rng)
    Y, Al = rng.standard_normal((6, 4)), rng.standard_normal((9, 4))
    batch = class_residuals(D, Y, Al)
    for k in range(4):
        np.testing.assert_allclose(batch[:, k], class_residuals(D, Y[:, k], Al[:, k]))


def test_classify_examples():
    m = CrcModel(eye_dict(), 0.1)
    assert crc_classify(m, [2.0, 0.0]) == 0
    assert crc_classify(m, [0.0, 2.0]) == 1
    assert crc_classify(m, [1.0, 1.0]) == 0  # tie goes to the lowest id


def test_classify_separable_clusters(rng):
    feats, labels, centers = gaussian_clusters(rng)
    model = CrcModel(Dictionary.from_samples(feats, labels), 0.01)
    pred = crc_classify(model, feats)
    # nearest-centroid oracle
    nearest = np.argmin(((feats.T[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(nearest, labels)
    np.testing.assert_array_equal(pred, labels)


def test_lambda_ladder_shrinks_code(rng):
    D = random_dict(rng)
    y = rng.standard_normal(6)
    norms = [np.linalg.norm(crc_encode(D, y, lam)) for lam in np.logspace(-3, 4, 15)]
    assert np.all(np.diff(norms) < 0)
    assert norms[-1] < 1e-2 * norms[0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.floats(0.01, 100.0))
def test_scaling_y(seed, t):
    r = np.random.default_rng(seed)
    D = random_dict(r)
    y = r.standard_normal(6)
    a = crc_encode(D, y, 0.3)
    np.testing.assert_allclose(crc_encode(D, t * y, 0.3), t * a, rtol=1e-9, atol=1e-12)
    model = CrcModel(D, 0.3)
    res = class_residuals(D, y, a)
    if np.all(np.isfinite(res)) and np.sort(res)[1] - res.min() > 1e-9 * res.min():
        assert crc_classify(model, t * y) == crc_classify(model, y)


def test_tune_lambda_single_grid(rng):
    feats, labels, _ = gaussian_clusters(rng)
    D = Dictionary.from_samples(feats, labels)
    assert tune_lambda(D, feats, labels, [0.5]) == 0.5


def test_tune_lambda_tie_prefers_first(rng):
    feats, labels, _ = gaussian_clusters(rng)
    D = Dictionary.from_samples(feats, labels)
    assert tune_lambda(D, feats, labels, [1e-3, 1e-1, 10]) == 1e-3


def test_tune_lambda_empty(rng):
    feats, labels, _ = gaussian_clusters(rng)
    with pytest.raises(ValueError):
        tune_lambda(Dictionary.from_samples(feats, labels), feats, labels, [])


def test_tune_lambda_beats_every_grid_point(rng):
    # overlapping clusters so the accuracy actually depends on lambda
    allf, alll, _ = gaussian_clusters(rng, n_per=50, d=6, c=4, spread=2.0)
    half = np.arange(alll.size) % 2 == 0
    feats, labels, val, vlab = allf[:, half], alll[half], allf[:, ~half], alll[~half]
    D = Dictionary.from_samples(feats, labels)
    grid = [1e-3, 1e-2, 1e-1, 1, 10, 100]

    def acc(lam):
        return np.mean(crc_classify(CrcModel(D, lam), val) == vlab)

    chosen = tune_lambda(D, val, vlab, grid)
    assert all(acc(chosen) >= acc(g) for g in grid)
    assert tune_lambda(D, val, vlab, grid) == chosen
