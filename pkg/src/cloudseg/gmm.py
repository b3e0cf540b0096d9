"""Gaussian mixture fitted by EM, with ``Sigma + eps*I`` covariance regularisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .base import BaseSegmenter
from .core import DataError, GaussianComponent, TrainedModel, make_components
from .features import DesignMatrix

LOG_2PI = np.log(2.0 * np.pi)


def _values(X):
    X = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def regularized_cholesky(cov, eps):
    """Lower Cholesky factor of ``cov + eps*I``; raises if not positive definite."""
    cov = np.asarray(cov, dtype=np.float64)
    reg = cov + eps * np.eye(cov.shape[0])
    try:
        return linalg.cholesky(reg, lower=True)
    except linalg.LinAlgError:
        raise DataError(
            f"regularized covariance is not positive definite (eps={eps!r})"
        ) from None


def _logpdf_chol(X, mean, chol):
    """Gaussian log-density without the ``-(d/2) log 2pi`` term, split in parts.

    Returns ``(-0.5 * logdet, -0.5 * quadratic)`` where quadratic has one
    entry per row of ``X``.
    """
    half_logdet = np.sum(np.log(np.diag(chol)))
    z = linalg.solve_triangular(chol, (X - mean).T, lower=True, check_finite=False)
    return -half_logdet, -0.5 * np.einsum("ij,ij->j", z, z)


def gaussian_logpdf(x, comp: GaussianComponent, eps=0.0):
    """Log-density of ``N(mean, covariance + eps*I)`` at ``x``.

    ``x`` may be a single vector (a float is returned) or an
    ``(n_samples, d)`` array.
    """
    single = np.ndim(x) == 1
    X = _values(x)
    chol = regularized_cholesky(comp.covariance, eps)
    a, b = _logpdf_chol(X, comp.mean, chol)
    out = -0.5 * comp.dim * LOG_2PI + a + b
    return float(out[0]) if single else out


def component_log_densities(X, components, eps):
    """``log f(x_i; mu_k, Sigma_k + eps I)`` for every sample and component, shape (n, K)."""
    X = _values(X)
    out = np.empty((X.shape[0], len(components)))
    for k, comp in enumerate(components):
        chol = regularized_cholesky(comp.covariance, eps)
        a, b = _logpdf_chol(X, comp.mean, chol)
        out[:, k] = -0.5 * comp.dim * LOG_2PI + a + b
    return out


def _weighted_log_densities(X, components, eps):
    priors = np.array([c.prior for c in components])
    with np.errstate(divide="ignore"):
        return component_log_densities(X, components, eps) + np.log(priors)


def e_step(X, components, eps=0.0):
    """Responsibilities ``gamma[i, k]``, computed in log space.

    Each row is shifted by its maximum before exponentiating, so the
    largest term is exactly 1 and symmetric rows normalise exactly.
    """
    weighted = _weighted_log_densities(X, components, eps)
    top = weighted.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DataError("a sample has zero density under every component")
    w = np.exp(weighted - top)
    return w / w.sum(axis=1, keepdims=True)


def log_likelihood(X, components, eps=0.0):
    """Observed-data log-likelihood ``sum_i log sum_k pi_k f(x_i; theta_k)``."""
    return float(np.sum(logsumexp(_weighted_log_densities(X, components, eps), axis=1)))


def _global_covariance(X):
    diff = X - X.mean(axis=0)
    return np.einsum("ni,nj->ij", diff, diff) / X.shape[0]


def m_step(X, resp):
    """Weighted means, covariances and priors from responsibilities.

    A component whose total responsibility is at most ``N * 1e-12`` is
    reseeded at the sample farthest (in Mahalanobis distance) from the
    data mean, with the global covariance and a prior of ``1/N``.
    """
    X = _values(X)
    resp = np.asarray(resp, dtype=np.float64)
    n, d = X.shape
    K = resp.shape[1]
    nk = resp.sum(axis=0)
    means = np.empty((K, d))
    covs = np.empty((K, d, d))
    empty = nk <= n * 1e-12
    for k in np.flatnonzero(~empty):
        g = resp[:, k]
        mu = np.einsum("n,ni->i", g, X) / nk[k]
        # centred form of  sum g x x^T / nk - mu mu^T
        diff = X - mu
        cov = np.einsum("n,ni,nj->ij", g, diff, diff) / nk[k]
        means[k] = mu
        covs[k] = 0.5 * (cov + cov.T)
    priors = nk / n
    if empty.any():
        gcov = _global_covariance(X)
        diff = X - X.mean(axis=0)
        maha = np.einsum("ni,ij,nj->n", diff, np.linalg.pinv(gcov), diff)
        ranked = np.argsort(-maha, kind="stable")
        for slot, k in enumerate(np.flatnonzero(empty)):
            means[k] = X[ranked[slot % n]]
            covs[k] = gcov
            priors[k] = 1.0 / n
        priors = priors / priors.sum()
    return make_components(means, covs, priors)


@dataclass(frozen=True)
class EmConfig:
    n_components: int = 2
    eps: float = 0.0
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0
    n_init: int = 10

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


@dataclass(frozen=True)
class EmResult:
    components: list
    log_likelihood: float
    n_iter: int
    history: list = field(default_factory=list)
    restart: int = 0


def initial_components(X, n_components, seed):
    """Means at distinct random samples, global covariance, uniform priors.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    X = _values(X)
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.shape[0], size=n_components, replace=False)
    cov = _global_covariance(X)
    cov = 0.5 * (cov + cov.T)
    return make_components(X[idx], [cov] * n_components, [1.0 / n_components] * n_components)


def em_fit(X, cfg: EmConfig = EmConfig()) -> EmResult:
    """EM from ``cfg.n_init`` seeded initialisations; the highest likelihood wins.

    Restarts draw their initial means from one generator seeded with
    ``cfg.seed``, so ``n_init=1`` is a single plain EM run.  Ties keep the
    earlier restart; a restart that breaks down numerically is dropped, and
    the error is raised only if every restart does.
    """
    X = _values(X)
    if X.shape[0] < cfg.n_components:
        raise DataError(f"{X.shape[0]} samples cannot support {cfg.n_components} components")
    rng = np.random.default_rng(cfg.seed)
    best, error = None, None
    for restart in range(cfg.n_init):
        init = initial_components(X, cfg.n_components, rng)
        try:
            res = _em_run(X, init, cfg)
        except DataError as exc:
            error = exc
            continue
        if best is None or res.log_likelihood > best.log_likelihood:
            best = EmResult(res.components, res.log_likelihood, res.n_iter, res.history, restart)
    if best is None:
        raise error
    return best


def _em_run(X, comps, cfg):
    ll = log_likelihood(X, comps, cfg.eps)
    if not np.isfinite(ll):
        raise DataError("non-finite log-likelihood at initialization")
    history = [ll]
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        resp = e_step(X, comps, cfg.eps)
        comps = m_step(X, resp)
        new_ll = log_likelihood(X, comps, cfg.eps)
        if not np.isfinite(new_ll):
            raise DataError(f"non-finite log-likelihood at iteration {n_iter}")
        history.append(new_ll)
        converged = abs(new_ll - ll) <= cfg.tol * abs(ll)
        ll = new_ll
        if converged:
            break
    return EmResult(comps, ll, n_iter, history)


def gmm_posterior(X, components, eps=0.0):
    """Posterior class probabilities ``p(C_k | x)``, shape (n, K)."""
    return e_step(X, components, eps)


def gmm_predict(X, components, eps=0.0):
    """MAP class index per row; ties go to the lower index."""
    return np.argmax(gmm_posterior(X, components, eps), axis=1)


class GaussianMixtureSegmenter(BaseSegmenter):
    """Two-class Gaussian mixture segmenter.

    Parameters
    ----------
    features : {"x1", "x2", "x3", "x4"}
        Channel selector.
    neighborhood : {0, 1, 2}
        Neighbourhood order whose features are stacked into each pixel.
    epsilon : float
        Covariance regulariser added as ``epsilon * I``.
    max_iter, tol : EM stopping rule (relative log-likelihood change).
    n_init : int
        Number of seeded EM restarts; the highest final likelihood is kept.
    random_state : int
        Seed for the choice of initial means.
    virtual_prior : float
        Multiplier on the clear-sky posterior at decision time.
    """

    kind = "gmm"

    def __init__(self, features="x1", neighborhood=0, epsilon=1e-6, max_iter=300,
                 tol=1e-6, n_init=10, random_state=0, virtual_prior=1.0):
        self.features = features
        self.neighborhood = neighborhood
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state
        self.virtual_prior = virtual_prior

    def _fit(self, designs):
        X = np.concatenate([d.values for d in designs])
        cfg = EmConfig(2, self.epsilon, self.max_iter, self.tol, self.random_state, self.n_init)
        res = em_fit(X, cfg)
        self.components_ = res.components
        self.log_likelihood_ = res.log_likelihood
        self.n_iter_ = res.n_iter
        self.history_ = res.history

    def _cluster_classes(self, designs):
        return [gmm_predict(d, self.components_, self.epsilon) for d in designs]

    def _swap_classes(self):
        self.components_ = self.components_[::-1]

    def _posterior(self, dm):
        return gmm_posterior(dm, self.components_, self.epsilon)

    def to_model(self):
        self._check_fitted()
        return TrainedModel(
            kind="gmm",
            components=tuple(self.components_),
            features=self.features,
            neighborhood=self.neighborhood,
            epsilon=self.epsilon,
            lam=self.virtual_prior,
        )

    @classmethod
    def from_model(cls, model: TrainedModel):
        est = cls(features=model.features, neighborhood=model.neighborhood,
                  epsilon=model.epsilon, virtual_prior=model.lam)
        est.components_ = list(model.components)
        est.n_features_in_ = model.components[0].dim
        return est


__all__ = [
    "EmConfig",
    "EmResult",
    "GaussianMixtureSegmenter",
    "component_log_densities",
    "e_step",
    "em_fit",
    "gaussian_logpdf",
    "gmm_posterior",
    "gmm_predict",
    "log_likelihood",
    "m_step",
]
