"""Per-pixel feature vectors, neighbourhood stacking and standardisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import DataError, PixelGrid

# Channel names used in feature CSVs.
TEMPERATURE = "T"
HEIGHT = "H"
TEMPERATURE_CLEAN = "T_prime"
HEIGHT_CLEAN = "H_prime"
TEMPERATURE_DIFF = "dT"
HEIGHT_DIFF = "H_dprime"
INTENSITY = "T_bar"
VELOCITY = "vmag"

ALL_CHANNELS = (
    TEMPERATURE,
    HEIGHT,
    TEMPERATURE_CLEAN,
    HEIGHT_CLEAN,
    TEMPERATURE_DIFF,
    HEIGHT_DIFF,
    INTENSITY,
    VELOCITY,
)

SELECTORS = {
    "x1": (TEMPERATURE, HEIGHT),
    "x2": (TEMPERATURE_CLEAN, HEIGHT_CLEAN),
    "x3": (TEMPERATURE_DIFF, HEIGHT_DIFF),
    "x4": (VELOCITY, INTENSITY, TEMPERATURE_DIFF),
}

FIRST_ORDER = ((-1, 0), (0, -1), (0, 1), (1, 0))
SECOND_ORDER = FIRST_ORDER + ((-1, -1), (-1, 1), (1, 1), (1, -1))


def neighbor_offsets(order):
    """Pixel offsets of the ``order``-th neighbourhood, in stacking order."""
    if order == 0:
        return ()
    if order == 1:
        return FIRST_ORDER
    if order == 2:
        return SECOND_ORDER
    raise ValueError(f"neighbourhood order must be 0, 1 or 2, got {order!r}")


def stacked_dim(base_dim, order):
    return base_dim * (1 + len(neighbor_offsets(order)))


@dataclass(frozen=True)
class DesignMatrix:
    """Rows are pixels in row-major order, columns are stacked features."""

    values: np.ndarray
    selector: str
    order: int
    shape: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        M, N = self.shape
        if values.ndim != 2 or values.shape[0] != M * N:
            raise DataError(f"design matrix has {values.shape[0]} rows for a {M}x{N} grid")
        if not np.all(np.isfinite(values)):
            raise DataError("design matrix contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", (int(M), int(N)))

    @property
    def n_features(self):
        return self.values.shape[1]


def assemble(grid: PixelGrid, selector: str) -> DesignMatrix:
    """Select the channels of ``selector`` into an order-0 design matrix."""
    try:
        names = SELECTORS[selector]
    except KeyError:
        raise ValueError(f"unknown feature selector {selector!r}; use one of {sorted(SELECTORS)}") from None
    missing = [c for c in names if c not in grid.channels]
    if missing:
        raise DataError(f"selector {selector} needs channel(s) {missing}, grid has {grid.channels}")
    idx = [grid.channels.index(c) for c in names]
    M, N = grid.shape
    return DesignMatrix(grid.data[:, :, idx].reshape(M * N, len(idx)), selector, 0, (M, N))


def stack_neighborhood(dm: DesignMatrix, order: int, shape=None) -> DesignMatrix:
    """Append neighbouring pixels' features to every row.

    Each output row is ``[center, neighbour_1, ..., neighbour_n]`` with the
    neighbours taken in :data:`FIRST_ORDER` / :data:`SECOND_ORDER` order.
    Pixels outside the grid are replaced by the nearest border pixel.
    """
    if dm.order != 0:
        raise ValueError("stack_neighborhood expects an order-0 design matrix")
    if shape is not None and tuple(shape) != dm.shape:
        raise DataError(f"grid dimensions {tuple(shape)} do not match design matrix {dm.shape}")
    offsets = neighbor_offsets(order)
    if not offsets:
        return dm
    M, N = dm.shape
    d0 = dm.n_features
    img = dm.values.reshape(M, N, d0)
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    blocks = [img]
    for di, dj in offsets:
        blocks.append(padded[1 + di : 1 + di + M, 1 + dj : 1 + dj + N])
    stacked = np.concatenate(blocks, axis=2).reshape(M * N, d0 * (1 + len(offsets)))
    return DesignMatrix(stacked, dm.selector, order, (M, N))


def design_matrix(grid: PixelGrid, selector: str, order: int = 0) -> DesignMatrix:
    return stack_neighborhood(assemble(grid, selector), order)


def standardize(X, stats=None):
    """Scale columns to zero mean and unit (population) variance.

    Parameters
    ----------
    X : DesignMatrix or ndarray of shape (n_samples, n_features)
    stats : tuple of (mean, variance), optional
        Statistics to reuse; computed from ``X`` when omitted.

    Returns
    -------
    Z : same type as ``X``
    stats : tuple of ndarray
        Per-column ``(mean, variance)``.
    """
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)
    if stats is None:
        mean = values.mean(axis=0)
        var = values.var(axis=0)
        zero = np.flatnonzero(var <= 0.0)
        if zero.size:
            raise DataError(f"zero-variance column(s) {zero.tolist()} cannot be standardized")
    else:
        mean, var = (np.asarray(s, dtype=np.float64) for s in stats)
        if mean.shape != (values.shape[1],):
            raise DataError(f"standardization stats for {mean.shape[0]} columns, data has {values.shape[1]}")
    Z = (values - mean) / np.sqrt(var)
    if isinstance(X, DesignMatrix):
        Z = DesignMatrix(Z, X.selector, X.order, X.shape)
    return Z, (mean, var)


def destandardize(Z, stats):
    mean, var = stats
    values = Z.values if isinstance(Z, DesignMatrix) else np.asarray(Z)
    return values * np.sqrt(var) + mean


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Turn :class:`PixelGrid` objects into stacked per-pixel feature rows.

    ``transform`` accepts a single grid or a list of grids and returns the
    row-wise concatenation of their design matrices.
    """

    def __init__(self, features="x1", neighborhood=0):
        self.features = features
        self.neighborhood = neighborhood

    def fit(self, X, y=None):
        grids = as_grid_list(X)
        self.n_features_out_ = stacked_dim(len(SELECTORS[self.features]), self.neighborhood)
        for g in grids:
            assemble(g, self.features)
        return self

    def transform(self, X):
        grids = as_grid_list(X)
        return np.concatenate(
            [design_matrix(g, self.features, self.neighborhood).values for g in grids]
        )


def as_grid_list(X):
    if isinstance(X, PixelGrid):
        return [X]
    grids = list(X)
    if not grids:
        raise DataError("no grids given")
    for g in grids:
        if not isinstance(g, PixelGrid):
            raise TypeError(f"expected PixelGrid, got {type(g).__name__}")
    return grids
