"""Estimator plumbing shared by the segmenters."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import DataError, LabelGrid, PixelGrid, label_to_class
from .features import SELECTORS, as_grid_list, design_matrix, neighbor_offsets
from .metrics import confusion, j_statistic, lambda_reweight


def check_segmenter_params(est):
    if est.features not in SELECTORS:
        raise ValueError(f"features must be one of {sorted(SELECTORS)}, got {est.features!r}")
    neighbor_offsets(est.neighborhood)
    if not est.virtual_prior > 0:
        raise ValueError(f"virtual_prior must be > 0, got {est.virtual_prior!r}")


def check_label_list(y, grids):
    if y is None:
        return None
    single = isinstance(y, LabelGrid) or (isinstance(y, np.ndarray) and y.ndim == 2)
    labels = [y] if single else list(y)
    if len(labels) != len(grids):
        raise DataError(f"{len(labels)} label grids for {len(grids)} images")
    out = []
    for lab, g in zip(labels, grids):
        lab = lab if isinstance(lab, LabelGrid) else LabelGrid(lab)
        if lab.shape != g.shape:
            raise DataError(f"label grid {lab.shape} does not match image {g.shape}")
        out.append(lab)
    return out


def should_swap(pred_classes, labels):
    """True when relabelling clusters {0,1} -> {1,0} agrees better with ``labels``."""
    truth = np.concatenate([label_to_class(l.labels).ravel() for l in labels])
    pred = np.concatenate([np.ravel(p) for p in pred_classes])
    agree = int(np.count_nonzero(pred == truth))
    return 2 * agree < truth.size


class BaseSegmenter(BaseEstimator):
    """Common ``fit``/``predict`` surface for the pixel segmenters.

    Subclasses implement ``_fit(designs)``, ``_cluster_classes(designs)``,
    ``_swap_classes()`` and ``_posterior(design)``.  ``fit`` takes a grid
    or list of grids; the optional labels are used only to decide which
    fitted cluster is cloud.
    """

    def _designs(self, grids):
        return [design_matrix(g, self.features, self.neighborhood) for g in grids]

    def fit(self, X, y=None):
        check_segmenter_params(self)
        grids = as_grid_list(X)
        labels = check_label_list(y, grids)
        designs = self._designs(grids)
        self._fit(designs)
        self.swapped_ = False
        if labels is not None and should_swap(self._cluster_classes(designs), labels):
            self._swap_classes()
            self.swapped_ = True
        self.n_features_in_ = designs[0].n_features
        return self

    def _check_fitted(self):
        if not hasattr(self, "components_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def proba_design(self, dm):
        """Class posteriors for an assembled design matrix, shape (M, N, 2)."""
        self._check_fitted()
        if dm.n_features != self.n_features_in_:
            raise DataError(f"model expects {self.n_features_in_} features, grid gives {dm.n_features}")
        post = self._posterior(dm)
        return post.reshape(*dm.shape, post.shape[1])

    def predict_design(self, dm):
        """Labels for an assembled design matrix; the timed inference path."""
        return lambda_reweight(self.proba_design(dm)[..., 0], self.virtual_prior)

    def predict_proba(self, grid: PixelGrid):
        """Per-pixel class posteriors, shape (M, N, 2); column 0 is clear sky."""
        return self.proba_design(design_matrix(grid, self.features, self.neighborhood))

    def predict(self, grid: PixelGrid):
        """Labels in {-1, +1} of shape (M, N) after virtual-prior reweighting."""
        return self.predict_design(design_matrix(grid, self.features, self.neighborhood))

    def score(self, grid, labels):
        """J-statistic of the prediction on one labelled image."""
        truth = labels if isinstance(labels, LabelGrid) else LabelGrid(labels)
        return j_statistic(confusion(truth, self.predict(grid)))
