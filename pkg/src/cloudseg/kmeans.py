"""Lloyd's k-means: the mixture model with identity covariance and hard responsibilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .base import BaseSegmenter
from .core import DataError, TrainedModel, make_components
from .features import DesignMatrix, standardize


def _values(X):
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)


def squared_distances(X, centroids):
    X = _values(X)
    C = np.asarray(centroids, dtype=np.float64)
    if X.shape[1] != C.shape[1]:
        raise DataError(f"data has {X.shape[1]} features, centroids have {C.shape[1]}")
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_assign(X, centroids):
    """Index of the nearest centroid per row; ties go to the lower index."""
    return np.argmin(squared_distances(X, centroids), axis=1)


def distortion(X, centroids, assignment):
    X = _values(X)
    diff = X - np.asarray(centroids)[assignment]
    return float(np.einsum("nd,nd->", diff, diff))


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    n_iter: int
    distortions: list = field(default_factory=list)


def _update(X, assignment, centroids):
    """Recompute centroids as hard-assignment means; reseed empty clusters.

    An empty cluster takes the sample farthest from its assigned centroid.
    """
    K = centroids.shape[0]
    new = centroids.copy()
    counts = np.bincount(assignment, minlength=K)
    for k in range(K):
        if counts[k]:
            new[k] = X[assignment == k].sum(axis=0) / counts[k]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        diff = X - new[assignment]
        far = np.argsort(-np.einsum("nd,nd->n", diff, diff), kind="stable")
        for slot, k in enumerate(empty):
            new[k] = X[far[slot]]
    return new


def kmeans_fit(X, n_clusters=2, max_iter=300, seed=0, check_standardized=True) -> KMeansResult:
    X = _values(X)
    n = X.shape[0]
    if n < n_clusters:
        raise DataError(f"{n} samples cannot support {n_clusters} clusters")
    if check_standardized and np.max(np.abs(X.mean(axis=0))) > 1e-6:
        raise DataError("k-means expects standardized features (column means are not zero)")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=n_clusters, replace=False)].copy()
    assignment = kmeans_assign(X, centroids)
    history = [distortion(X, centroids, assignment)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        centroids = _update(X, assignment, centroids)
        new_assignment = kmeans_assign(X, centroids)
        history.append(distortion(X, centroids, new_assignment))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return KMeansResult(centroids, assignment, n_iter, history)


def identity_posterior(X, centroids):
    """Class posteriors of an equal-prior, identity-covariance mixture."""
    return softmax(-0.5 * squared_distances(X, centroids), axis=1)


class KMeansSegmenter(BaseSegmenter):
    """k-means pixel segmenter on standardized features.

    Standardization statistics come from the training pixels and are
    reused at prediction time.  ``predict_proba`` returns the posterior of
    an identity-covariance, equal-prior mixture, so that at
    ``virtual_prior=1`` the decision is the nearest centroid.
    """

    kind = "kmeans"

    def __init__(self, features="x1", neighborhood=0, max_iter=300, random_state=0,
                 virtual_prior=1.0):
        self.features = features
        self.neighborhood = neighborhood
        self.max_iter = max_iter
        self.random_state = random_state
        self.virtual_prior = virtual_prior

    def _fit(self, designs):
        X = np.concatenate([d.values for d in designs])
        Z, self.standardization_ = standardize(X)
        res = kmeans_fit(Z, 2, self.max_iter, self.random_state)
        self.centroids_ = res.centroids
        self.n_iter_ = res.n_iter
        self.distortions_ = res.distortions
        counts = np.bincount(res.assignment, minlength=2)
        self._set_components(counts / counts.sum())

    def _set_components(self, priors):
        d = self.centroids_.shape[1]
        self.components_ = make_components(self.centroids_, [np.eye(d)] * 2, priors)

    def _standardized(self, dm):
        return standardize(dm, self.standardization_)[0]

    def _cluster_classes(self, designs):
        return [kmeans_assign(self._standardized(d), self.centroids_) for d in designs]

    def _swap_classes(self):
        self.centroids_ = self.centroids_[::-1].copy()
        self._set_components([c.prior for c in self.components_][::-1])

    def _posterior(self, dm):
        return identity_posterior(self._standardized(dm), self.centroids_)

    def to_model(self):
        self._check_fitted()
        return TrainedModel(
            kind="kmeans",
            components=tuple(self.components_),
            features=self.features,
            neighborhood=self.neighborhood,
            lam=self.virtual_prior,
            standardization=self.standardization_,
        )

    @classmethod
    def from_model(cls, model: TrainedModel):
        est = cls(features=model.features, neighborhood=model.neighborhood,
                  virtual_prior=model.lam)
        est.centroids_ = np.stack([c.mean for c in model.components])
        est.components_ = list(model.components)
        est.standardization_ = model.standardization
        est.n_features_in_ = est.centroids_.shape[1]
        return est
