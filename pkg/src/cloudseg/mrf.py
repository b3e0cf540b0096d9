"""Markov random field segmentation with ICM training and SA inference.

Energies are scores to maximise.  For a pixel with features ``x`` and
candidate class ``k`` (label ``y = -1`` for clear, ``+1`` for cloud)::

    E = -1/2 log|S_k + eps I| - 1/2 (x - mu_k)^T (S_k + eps I)^-1 (x - mu_k) + psi(y)
    psi(y) = beta * y * sum of in-grid neighbour labels

The total energy of a configuration counts each neighbouring pair once,
so a single-pixel change moves the total by exactly that pixel's energy
change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import softmax

from .base import BaseSegmenter
from .core import (
    CLEAR,
    CLOUD,
    DataError,
    GaussianComponent,
    TrainedModel,
    class_to_label,
    label_to_class,
    make_components,
)
from .features import FIRST_ORDER, SECOND_ORDER, DesignMatrix
from .gmm import regularized_cholesky

CLASS_LABELS = (CLEAR, CLOUD)


@dataclass(frozen=True)
class MrfConfig:
    beta: float = 1.0
    clique_order: int = 1
    eps: float = 1.0
    max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.clique_order not in (1, 2):
            raise ValueError(f"clique_order must be 1 or 2, got {self.clique_order!r}")
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class SaConfig:
    t0: Optional[float] = None
    alpha: float = 0.75
    max_iter: Optional[int] = None
    t_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.t0 is not None and not self.t0 > 0:
            raise ValueError("t0 must be > 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class LabelField:
    labels: np.ndarray
    energy: float

    @property
    def shape(self):
        return self.labels.shape


# ---------------------------------------------------------------------------
# Neighbourhoods and energies


def clique_offsets(clique_order):
    return FIRST_ORDER if clique_order == 1 else SECOND_ORDER


@lru_cache(maxsize=16)
def neighbor_table(shape, clique_order):
    """Flat in-grid neighbour indices of every pixel, as a tuple of tuples."""
    M, N = shape
    offsets = clique_offsets(clique_order)
    table = []
    for i in range(M):
        for j in range(N):
            table.append(tuple(
                (i + di) * N + (j + dj)
                for di, dj in offsets
                if 0 <= i + di < M and 0 <= j + dj < N
            ))
    return tuple(table)


def neighbor_sums(labels, clique_order):
    """Sum of in-grid neighbour labels for every pixel."""
    y = np.asarray(labels, dtype=np.float64)
    M, N = y.shape
    padded = np.pad(y, 1)
    out = np.zeros_like(y)
    for di, dj in clique_offsets(clique_order):
        out += padded[1 + di : 1 + di + M, 1 + dj : 1 + dj + N]
    return out


def potential(labels, i, j, y, cfg: MrfConfig):
    """Clique potential of label ``y`` at pixel ``(i, j)`` given the field."""
    labels = np.asarray(labels)
    M, N = labels.shape
    total = 0
    for di, dj in clique_offsets(cfg.clique_order):
        a, b = i + di, j + dj
        if 0 <= a < M and 0 <= b < N:
            total += int(labels[a, b])
    return cfg.beta * y * total


def class_log_likelihoods(X, components, eps):
    """``-1/2 log|S_k+eps I| - 1/2 (x-mu_k)^T (S_k+eps I)^-1 (x-mu_k)``, shape (n, K)."""
    X = X.values if isinstance(X, DesignMatrix) else np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty((X.shape[0], len(components)))
    for k, comp in enumerate(components):
        chol = regularized_cholesky(comp.covariance, eps)
        z = linalg.solve_triangular(chol, (X - comp.mean).T, lower=True, check_finite=False)
        out[:, k] = -np.sum(np.log(np.diag(chol))) - 0.5 * np.einsum("ij,ij->j", z, z)
    return out


def pixel_energy(x, k, labels, i, j, comp: GaussianComponent, cfg: MrfConfig):
    """Energy of assigning class ``k`` (0 clear, 1 cloud) to pixel ``(i, j)``."""
    ll = class_log_likelihoods(np.asarray(x, dtype=np.float64)[None, :], [comp], cfg.eps)[0, 0]
    return float(ll + potential(labels, i, j, CLASS_LABELS[k], cfg))


def class_energies(ll, labels, cfg: MrfConfig):
    """Energy of each class at every pixel given the neighbours in ``labels``, shape (n, 2)."""
    s = neighbor_sums(labels, cfg.clique_order).ravel()
    ll = np.asarray(ll).reshape(-1, 2)
    return np.stack([ll[:, 0] - cfg.beta * s, ll[:, 1] + cfg.beta * s], axis=1)


def total_energy(ll, labels, cfg: MrfConfig):
    """Sum of class log-likelihoods plus ``beta * y_i * y_j`` over each neighbour pair."""
    labels = np.asarray(labels)
    k = label_to_class(labels).ravel()
    ll = np.asarray(ll).reshape(-1, 2)
    data = ll[np.arange(k.size), k].sum()
    pairs = 0.5 * np.sum(labels * neighbor_sums(labels, cfg.clique_order))
    return float(data + cfg.beta * pairs)


def energy_softmax(energies):
    """Softmax over class energies, stable for large magnitudes."""
    return softmax(np.asarray(energies, dtype=np.float64), axis=-1)


def mrf_posterior(x, labels, i, j, components, cfg: MrfConfig):
    """Class probabilities at one pixel from the softmax of its class energies."""
    e = [pixel_energy(x, k, labels, i, j, c, cfg) for k, c in enumerate(components)]
    return energy_softmax(e)


def posterior_map(ll, labels, cfg: MrfConfig):
    """Per-pixel class probabilities given the neighbours in ``labels``, shape (n, 2)."""
    return energy_softmax(class_energies(ll, labels, cfg))


def maximum_likelihood_labels(ll, shape):
    """Per-pixel argmax of the class log-likelihoods; ties go to clear."""
    return class_to_label(np.argmax(np.asarray(ll).reshape(-1, 2), axis=1)).reshape(shape)


# ---------------------------------------------------------------------------
# ICM


def _sweep(lld, y, table, beta):
    """One sequential raster pass; returns the number of changed pixels.

    ``lld`` is the cloud-minus-clear log-likelihood per pixel.  A pixel
    keeps its label when both classes have equal energy.
    """
    changed = 0
    two_beta = 2.0 * beta
    for p, nbrs in enumerate(table):
        s = 0
        for q in nbrs:
            s += y[q]
        diff = lld[p] + two_beta * s
        if diff > 0.0:
            new = 1
        elif diff < 0.0:
            new = -1
        else:
            continue
        if new != y[p]:
            y[p] = new
            changed += 1
    return changed


def icm_sweeps(ll, labels, cfg: MrfConfig, max_sweeps=None):
    """Run sequential raster sweeps on a copy of ``labels`` until no pixel changes.

    Returns ``(labels, n_sweeps)``.
    """
    labels = np.asarray(labels)
    shape = labels.shape
    ll = np.asarray(ll).reshape(-1, 2)
    lld = (ll[:, 1] - ll[:, 0]).tolist()
    y = labels.ravel().astype(int).tolist()
    table = neighbor_table(shape, cfg.clique_order)
    limit = cfg.max_iter if max_sweeps is None else max_sweeps
    n = 0
    for n in range(1, limit + 1):
        if _sweep(lld, y, table, cfg.beta) == 0:
            break
    return np.array(y, dtype=np.int8).reshape(shape), n


def icm_predict(X, shape, components, cfg: MrfConfig, max_sweeps=None, ll=None):
    """ICM inference with fixed class parameters.

    Starts from the per-pixel maximum-likelihood labels and sweeps until
    no pixel changes.  Returns ``(LabelField, n_sweeps)``.
    """
    if ll is None:
        ll = class_log_likelihoods(X, components, cfg.eps)
    labels = maximum_likelihood_labels(ll, shape)
    labels, n = icm_sweeps(ll, labels, cfg, max_sweeps)
    return LabelField(labels, total_energy(ll, labels, cfg)), n


def class_moments(designs, fields):
    """Sample mean and (n-1)-normalised covariance of each class over all images."""
    X = np.concatenate([d.values for d in designs])
    k = np.concatenate([label_to_class(f).ravel() for f in fields])
    means, covs, priors = [], [], []
    for c in (0, 1):
        S = X[k == c]
        mu = S.mean(axis=0)
        diff = S - mu
        if S.shape[0] > 1:
            cov = np.einsum("ni,nj->ij", diff, diff) / (S.shape[0] - 1)
        else:
            cov = np.zeros((X.shape[1], X.shape[1]))
        means.append(mu)
        covs.append(0.5 * (cov + cov.T))
        priors.append(S.shape[0] / X.shape[0])
    return make_components(means, covs, priors)


def _rescue(fields, lls, cfg, min_size=2):
    """Move the lowest-energy pixels into any class holding fewer than ``min_size``."""
    flat = [f.ravel().copy() for f in fields]
    for label in CLASS_LABELS:
        while sum(int(np.count_nonzero(f == label)) for f in flat) < min_size:
            best = None
            for n, (f, ll) in enumerate(zip(flat, lls)):
                if ll is None:
                    e = np.arange(f.size, dtype=np.float64)
                else:
                    e = class_energies(ll, f.reshape(fields[n].shape), cfg)[np.arange(f.size), label_to_class(f)]
                e = np.where(f == label, np.inf, e)
                p = int(np.argmin(e))
                if np.isfinite(e[p]) and (best is None or e[p] < best[0]):
                    best = (e[p], n, p)
            if best is None:
                raise DataError("cannot populate an empty class: too few pixels")
            flat[best[1]][best[2]] = label
    return [f.reshape(fields[n].shape) for n, f in enumerate(flat)]


@dataclass
class IcmFitResult:
    components: list
    fields: list
    trace: list = field(default_factory=list)
    n_iter: int = 0


def icm_fit(designs, cfg: MrfConfig) -> IcmFitResult:
    """Unsupervised ICM training on one or more images.

    Labels start uniformly at random.  Each iteration re-estimates the
    class moments from the current labels, then performs one sequential
    raster sweep.  Training stops once the total energy no longer strictly
    increases; the last improving parameters and labels are returned.
    """
    if isinstance(designs, DesignMatrix):
        designs = [designs]
    rng = np.random.default_rng(cfg.seed)
    fields = [rng.choice(np.array(CLASS_LABELS, dtype=np.int8), size=d.shape) for d in designs]
    lls = [None] * len(designs)
    best = None
    trace = []
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        fields = _rescue(fields, lls, cfg)
        comps = class_moments(designs, fields)
        lls = [class_log_likelihoods(d, comps, cfg.eps) for d in designs]
        fields = [icm_sweeps(ll, f, cfg, max_sweeps=1)[0] for ll, f in zip(lls, fields)]
        energy = sum(total_energy(ll, f, cfg) for ll, f in zip(lls, fields))
        if trace and not energy > trace[-1]:
            break
        trace.append(energy)
        best = (comps, [f.copy() for f in fields])
    comps, fields = best
    return IcmFitResult(comps, fields, trace, n_iter)


# ---------------------------------------------------------------------------
# Simulated annealing


def sa_weights(ll, labels, cfg: MrfConfig):
    """Pixel selection weights from the flipped-label energy gap.

    ``w = (E(flipped) - max_k E_k) / sum(E(flipped) - max_k E_k)``; every
    term is <= 0 so weights are non-negative and sum to one.  If every
    term is zero the weights are uniform.
    """
    labels = np.asarray(labels)
    E = class_energies(ll, labels, cfg)
    k = label_to_class(labels).ravel()
    flipped = E[np.arange(k.size), 1 - k]
    num = flipped - E.max(axis=1)
    total = num.sum()
    if total == 0.0:
        return np.full(labels.shape, 1.0 / labels.size)
    return (num / total).reshape(labels.shape)


def sa_sample_pixel(cumulative, u):
    """Raster index whose cumulative weight is nearest ``u`` (ties: earliest)."""
    cum = np.asarray(cumulative)
    n = cum.size
    hi = min(int(np.searchsorted(cum, u, side="left")), n - 1)
    value = cum[hi]
    if hi > 0 and abs(u - cum[hi - 1]) <= abs(cum[hi] - u):
        value = cum[hi - 1]
    return int(np.searchsorted(cum, value, side="left"))


def acceptance_probability(delta, temperature):
    """Metropolis acceptance of a flip whose energy loss is ``delta``."""
    if delta <= 0:
        return 1.0
    return math.exp(-delta / temperature)


@dataclass
class SaResult:
    field: LabelField
    n_iter: int
    n_accepted: int
    t0: float
    final_temperature: float


def default_temperature(ll, labels, cfg: MrfConfig):
    """Standard deviation of the per-pixel flip energy changes."""
    E = class_energies(ll, labels, cfg)
    t0 = float(np.std(np.abs(E[:, 1] - E[:, 0])))
    return t0 if t0 > 0 else 1.0


def sa_optimize(X, shape, components, cfg: MrfConfig, sa: SaConfig = SaConfig(), ll=None) -> SaResult:
    """Simulated annealing over single-pixel flips from the ML labelling.

    Pixels are drawn through :func:`sa_weights` and :func:`sa_sample_pixel`,
    a flip losing ``dE`` energy is accepted with probability
    ``exp(-dE / T)`` and ``T`` shrinks by ``alpha`` every iteration.  Class
    log-likelihoods are evaluated once; energies are then updated locally.
    """
    if ll is None:
        ll = class_log_likelihoods(X, components, cfg.eps)
    M, N = shape
    n = M * N
    labels = maximum_likelihood_labels(ll, shape)
    table = neighbor_table((M, N), cfg.clique_order)
    beta = cfg.beta

    y = labels.ravel().astype(np.float64)
    k = label_to_class(y)
    s = neighbor_sums(labels, cfg.clique_order).ravel()
    e_cur = ll[np.arange(n), k] + beta * y * s
    e_flip = ll[np.arange(n), 1 - k] - beta * y * s
    gap = np.minimum(e_flip - e_cur, 0.0)
    energy = total_energy(ll, labels, cfg)

    t = sa.t0 if sa.t0 is not None else default_temperature(ll, labels, cfg)
    t0 = t
    budget = sa.max_iter if sa.max_iter is not None else 5 * n
    rng = np.random.default_rng(sa.seed)
    accepted = 0
    it = 0
    for it in range(budget):
        if t < sa.t_floor:
            break
        total = gap.sum()
        w = gap / total if total < 0.0 else np.full(n, 1.0 / n)
        p = sa_sample_pixel(np.cumsum(w), rng.random())
        delta = e_cur[p] - e_flip[p]
        u = rng.random()
        if delta <= 0.0 or math.exp(-delta / t) > u:
            accepted += 1
            energy += e_flip[p] - e_cur[p]
            e_cur[p], e_flip[p] = e_flip[p], e_cur[p]
            y[p] = -y[p]
            gap[p] = min(e_flip[p] - e_cur[p], 0.0)
            change = 2.0 * beta * y[p]
            for q in table[p]:
                # neighbour q's sum moved by 2*y[p]
                e_cur[q] += change * y[q]
                e_flip[q] -= change * y[q]
                gap[q] = min(e_flip[q] - e_cur[q], 0.0)
        t *= sa.alpha
    else:
        it = budget
    field = LabelField(y.astype(np.int8).reshape(shape), energy)
    return SaResult(field, it, accepted, t0, t)


# ---------------------------------------------------------------------------
# Estimator


class MRFSegmenter(BaseSegmenter):
    """Markov random field segmenter trained by ICM.

    Parameters
    ----------
    features, neighborhood :
        Feature selector and neighbourhood order, as for the other segmenters.
    beta : float
        Clique potential weight.
    clique_order : {1, 2}
        4- or 8-connected label neighbourhood.
    epsilon : float
        Covariance regulariser.
    max_iter : int
        Cap on ICM training iterations and on inference sweeps.
    max_sweeps : int or None
        Separate cap on inference sweeps; ``1`` gives the single-sweep
        variant, ``None`` sweeps until convergence (at most ``max_iter``).
    inference : {"icm", "sa"}
        Optimiser used at prediction time.
    alpha, t0, sa_iter, t_floor :
        Annealing schedule; ``t0=None`` derives the start temperature from
        the data and ``sa_iter=None`` allows ``5 * M * N`` proposals.
    random_state : int
        Seed for the initial training labels and the annealer.
    virtual_prior : float
        Multiplier on the clear-sky posterior at decision time.
    """

    def __init__(self, features="x1", neighborhood=0, beta=1.0, clique_order=1, epsilon=1.0,
                 max_iter=100, max_sweeps=None, inference="icm", alpha=0.75, t0=None, sa_iter=None,
                 t_floor=1e-6, random_state=0, virtual_prior=1.0):
        self.features = features
        self.neighborhood = neighborhood
        self.beta = beta
        self.clique_order = clique_order
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.max_sweeps = max_sweeps
        self.inference = inference
        self.alpha = alpha
        self.t0 = t0
        self.sa_iter = sa_iter
        self.t_floor = t_floor
        self.random_state = random_state
        self.virtual_prior = virtual_prior

    @property
    def kind(self):
        return "sa-icm-mrf" if self.inference == "sa" else "icm-mrf"

    def _config(self):
        return MrfConfig(self.beta, self.clique_order, self.epsilon, self.max_iter, self.random_state)

    def _sa_config(self):
        return SaConfig(self.t0, self.alpha, self.sa_iter, self.t_floor, self.random_state)

    def _fit(self, designs):
        if self.inference not in ("icm", "sa"):
            raise ValueError(f"inference must be 'icm' or 'sa', got {self.inference!r}")
        res = icm_fit(designs, self._config())
        self.components_ = res.components
        self.fields_ = res.fields
        self.energy_trace_ = res.trace
        self.n_iter_ = res.n_iter

    def _cluster_classes(self, designs):
        return [label_to_class(f) for f in self.fields_]

    def _swap_classes(self):
        self.components_ = self.components_[::-1]
        self.fields_ = [(-f).astype(np.int8) for f in self.fields_]

    def segment(self, dm: DesignMatrix, ll=None):
        """Optimise the label field of one image; returns ``(LabelField, info)``."""
        self._check_fitted()
        cfg = self._config()
        if ll is None:
            ll = class_log_likelihoods(dm, self.components_, self.epsilon)
        if self.inference == "sa":
            res = sa_optimize(dm, dm.shape, self.components_, cfg, self._sa_config(), ll=ll)
            return res.field, {"iterations": res.n_iter, "accepted": res.n_accepted}
        field, n = icm_predict(dm, dm.shape, self.components_, cfg, self.max_sweeps, ll=ll)
        return field, {"sweeps": n}

    def _posterior(self, dm):
        ll = class_log_likelihoods(dm, self.components_, self.epsilon)
        field, _ = self.segment(dm, ll)
        return posterior_map(ll, field.labels, self._config())

    def to_model(self):
        self._check_fitted()
        return TrainedModel(
            kind=self.kind,
            components=tuple(self.components_),
            features=self.features,
            neighborhood=self.neighborhood,
            epsilon=self.epsilon,
            lam=self.virtual_prior,
            clique_order=self.clique_order,
            beta=self.beta,
            alpha=self.alpha if self.inference == "sa" else None,
            t0=self.t0 if self.inference == "sa" else None,
        )

    @classmethod
    def from_model(cls, model: TrainedModel):
        est = cls(features=model.features, neighborhood=model.neighborhood, beta=model.beta,
                  clique_order=model.clique_order, epsilon=model.epsilon,
                  inference="sa" if model.kind == "sa-icm-mrf" else "icm",
                  alpha=0.75 if model.alpha is None else model.alpha, t0=model.t0,
                  virtual_prior=model.lam)
        est.components_ = list(model.components)
        est.n_features_in_ = model.components[0].dim
        return est
