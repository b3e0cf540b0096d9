import numpy as np
import pytest

from cloudseg.core import DataError, load_model, save_model
from cloudseg.features import standardize
from cloudseg.kmeans import (
    KMeansSegmenter,
    distortion,
    identity_posterior,
    kmeans_assign,
    kmeans_fit,
    squared_distances,
)


def nearest_oracle(X, C):
    out = []
    for x in X:
        best, best_d = 0, None
        for k, c in enumerate(C):
            d = sum((a - b) ** 2 for a, b in zip(x, c))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return out


class TestAssign:
    def test_equidistant_goes_to_first(self):
        assert kmeans_assign(np.array([[0.0, 5.0]]), np.array([[-1.0, 0.0], [1.0, 0.0]]))[0] == 0

    def test_on_second_centroid(self):
        C = np.array([[0.0, 0.0], [3.0, 1.0]])
        assert kmeans_assign(C[1:], C)[0] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_comparison(self, seed):
        rng = np.random.default_rng(seed)
        X, C = rng.normal(size=(50, 3)), rng.normal(size=(2, 3))
        assert kmeans_assign(X, C).tolist() == nearest_oracle(X.tolist(), C.tolist())

    def test_squared_distance_dimension_check(self):
        with pytest.raises(DataError):
            squared_distances(np.zeros((3, 2)), np.zeros((2, 3)))


class TestFit:
    def test_two_points(self):
        res = kmeans_fit(np.array([[-1.0], [1.0]]), 2, seed=0)
        assert sorted(res.centroids.ravel().tolist()) == [-1.0, 1.0]
        assert res.distortions[-1] == 0.0

    def test_identical_points(self):
        X = np.zeros((6, 2))
        res = kmeans_fit(X, 2, seed=1)
        np.testing.assert_array_equal(res.centroids, np.zeros((2, 2)))
        assert np.all(res.assignment == 0)

    def test_two_blobs_match_generating_means(self):
        rng = np.random.default_rng(4)
        means = np.array([[-3.0, 0.0], [3.0, 1.0]])
        truth = rng.integers(0, 2, size=200)
        X = means[truth] + rng.normal(size=(200, 2))
        Z, (mu, var) = standardize(X)
        res = kmeans_fit(Z, 2, seed=0)
        oracle = np.array(nearest_oracle(X.tolist(), means.tolist()))
        agree = max(np.mean(res.assignment == oracle), np.mean(res.assignment != oracle))
        assert agree >= 0.99

    @pytest.mark.parametrize("seed", range(8))
    def test_distortion_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        Z, _ = standardize(rng.normal(size=(150, 3)) + rng.integers(0, 3, size=(150, 1)))
        res = kmeans_fit(Z, 2, seed=seed)
        assert all(b <= a + 1e-9 for a, b in zip(res.distortions, res.distortions[1:]))
        assert res.distortions[-1] == pytest.approx(distortion(Z, res.centroids, res.assignment))

    def test_requires_standardized_input(self):
        with pytest.raises(DataError, match="standardized"):
            kmeans_fit(np.array([[5.0], [7.0], [9.0]]), 2)

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            kmeans_fit(np.zeros((1, 2)), 2, check_standardized=False)


class TestPosterior:
    def test_is_identity_gaussian_softmax(self, rng):
        X, C = rng.normal(size=(5, 2)), rng.normal(size=(2, 2))
        post = identity_posterior(X, C)
        for x, p in zip(X, post):
            w = np.exp([-0.5 * np.sum((x - c) ** 2) for c in C])
            np.testing.assert_allclose(p, w / w.sum(), atol=1e-14)


class TestSegmenter:
    def test_separated_data(self, separated_images):
        train, test = separated_images[:5], separated_images[5:]
        est = KMeansSegmenter("x1").fit([im.grid for im in train], [im.labels for im in train])
        for im in test:
            assert est.score(im.grid, im.labels) >= 0.95

    def test_components_use_identity(self, separated_images):
        im = separated_images[0]
        est = KMeansSegmenter("x4").fit(im.grid, im.labels)
        for c in est.components_:
            np.testing.assert_array_equal(c.covariance, np.eye(3))

    def test_standardization_reused_at_predict(self, separated_images):
        im = separated_images[0]
        est = KMeansSegmenter("x1").fit(im.grid, im.labels)
        mean, var = est.standardization_
        from cloudseg.features import design_matrix

        values = design_matrix(im.grid, "x1").values
        np.testing.assert_allclose(mean, values.mean(axis=0))
        np.testing.assert_allclose(var, values.var(axis=0))

    def test_model_round_trip(self, separated_images, tmp_path):
        im = separated_images[1]
        est = KMeansSegmenter("x2", neighborhood=1).fit(im.grid, im.labels)
        save_model(est.to_model(), tmp_path / "k.json")
        back = KMeansSegmenter.from_model(load_model(tmp_path / "k.json"))
        np.testing.assert_array_equal(back.predict(im.grid), est.predict(im.grid))
