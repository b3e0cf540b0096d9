"""Binary scoring (J-statistic, Jaccard, F1) and virtual-prior selection.

The positive class is cloud (+1).  A virtual prior ``lam`` rescales the
clear-sky posterior: a pixel is cloud when ``1 - min(lam * p_clear, 1)``
strictly exceeds ``min(lam * p_clear, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CLEAR, CLOUD, DataError


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self):
        """Confusion with the roles of the two classes exchanged."""
        return Confusion(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass(frozen=True)
class LambdaChoice:
    lam: float
    j: float


def _as_labels(y):
    return np.asarray(getattr(y, "labels", y))


def confusion(y_true, y_pred) -> Confusion:
    t = _as_labels(y_true)
    p = _as_labels(y_pred)
    if t.shape != p.shape:
        raise DataError(f"label shapes differ: {t.shape} vs {p.shape}")
    pos_t = t == CLOUD
    pos_p = p == CLOUD
    tp = int(np.count_nonzero(pos_t & pos_p))
    fp = int(np.count_nonzero(~pos_t & pos_p))
    fn = int(np.count_nonzero(pos_t & ~pos_p))
    return Confusion(tp=tp, fp=fp, tn=t.size - tp - fp - fn, fn=fn)


def sensitivity(c: Confusion):
    if c.tp + c.fn == 0:
        raise DataError("undefined sensitivity/specificity: no cloud pixels in ground truth")
    return c.tp / (c.tp + c.fn)


def specificity(c: Confusion):
    if c.tn + c.fp == 0:
        raise DataError("undefined sensitivity/specificity: no clear pixels in ground truth")
    return c.tn / (c.tn + c.fp)


def j_statistic(c: Confusion):
    """Youden's J: sensitivity + specificity - 1."""
    return sensitivity(c) + specificity(c) - 1.0


def jaccard(c: Confusion):
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        raise DataError("Jaccard index undefined without predicted or actual cloud pixels")
    return c.tp / denom


def f1(c: Confusion):
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise DataError("F1 undefined without predicted or actual cloud pixels")
    return 2 * c.tp / denom


def lambda_scores(p_clear, lam):
    """Return ``(score_clear, score_cloud)`` after virtual-prior reweighting."""
    if not lam > 0:
        raise ValueError(f"virtual prior must be > 0, got {lam!r}")
    s1 = np.minimum(np.asarray(p_clear, dtype=np.float64) * lam, 1.0)
    return s1, 1.0 - s1


def lambda_reweight(p_clear, lam):
    """Label each pixel from its clear-sky posterior; ties go to clear."""
    s1, s2 = lambda_scores(p_clear, lam)
    return np.where(s2 > s1, CLOUD, CLEAR).astype(np.int8)


def lambda_candidates(p_clear):
    """Virtual priors covering every decision realisable on ``p_clear``.

    Cloud pixels are exactly those with ``lam * p < 1/2``, so the decision
    is a threshold on ``p`` at ``1 / (2 lam)``.  One candidate is placed
    between each pair of consecutive distinct posteriors, plus both ends
    and ``lam = 1``.
    """
    p = np.unique(np.clip(np.asarray(p_clear, dtype=np.float64).ravel(), 0.0, 1.0))
    cuts = []
    if p.size > 1:
        cuts.append(0.5 * (p[:-1] + p[1:]))
    # above every posterior (all cloud) and below the smallest positive one (all clear)
    cuts.append([1.5 * p[-1] if p[-1] > 0 else 1.0])
    positive = p[p > 0]
    if positive.size:
        cuts.append([0.5 * positive[0]])
    tau = np.concatenate([np.atleast_1d(c) for c in cuts])
    tau = tau[tau > 0]
    lams = 0.5 / tau
    lams = lams[np.isfinite(lams) & (lams > 0)]
    return np.unique(np.append(lams, 1.0))


def _j_curve(p_clear, y_true, lams):
    """J at every candidate, using prefix counts over posteriors sorted ascending."""
    p = np.asarray(p_clear, dtype=np.float64).ravel()
    t = _as_labels(y_true).ravel()
    order = np.argsort(p, kind="stable")
    sp = p[order]
    pos = (t[order] == CLOUD).astype(np.int64)
    n_pos = int(pos.sum())
    n_neg = sp.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("undefined sensitivity/specificity: validation labels have a single class")
    cum_pos = np.concatenate([[0], np.cumsum(pos)])

    # number of pixels labelled cloud: the prefix where fl(lam * p) < 0.5
    lams = np.asarray(lams, dtype=np.float64)
    n = sp.size
    cut = np.searchsorted(sp, 0.5 / lams, side="left")
    while True:
        prev = sp[np.maximum(cut - 1, 0)]
        nxt = sp[np.minimum(cut, n - 1)]
        back = (cut > 0) & ~(np.minimum(prev * lams, 1.0) < 0.5)
        fwd = (cut < n) & (np.minimum(nxt * lams, 1.0) < 0.5)
        if not (back.any() or fwd.any()):
            break
        cut = np.where(back, np.searchsorted(sp, prev, side="left"), cut)
        cut = np.where(fwd, np.searchsorted(sp, nxt, side="right"), cut)
    tp = cum_pos[cut]
    fp = cut - tp
    return tp / n_pos + (n_neg - fp) / n_neg - 1.0


def lambda_search(p_clear, y_true, candidates=None) -> LambdaChoice:
    """Pick the virtual prior maximising J on validation pixels (ties: smaller lam)."""
    lams = lambda_candidates(p_clear) if candidates is None else np.unique(np.asarray(candidates, dtype=np.float64))
    if lams.size == 0:
        raise ValueError("empty candidate set")
    js = _j_curve(p_clear, y_true, lams)
    best = int(np.argmax(js))
    return LambdaChoice(float(lams[best]), float(js[best]))


def lambda_search_folds(p_folds, y_folds, candidates=None) -> LambdaChoice:
    """Pick one virtual prior maximising the mean J over several validation sets."""
    if candidates is None:
        lams = lambda_candidates(np.concatenate([np.ravel(p) for p in p_folds]))
    else:
        lams = np.unique(np.asarray(candidates, dtype=np.float64))
    curves = np.stack([_j_curve(p, y, lams) for p, y in zip(p_folds, y_folds)])
    mean = curves.mean(axis=0)
    best = int(np.argmax(mean))
    return LambdaChoice(float(lams[best]), float(mean[best]))


def score_labels(y_true, y_pred):
    """J, Jaccard and F1 of a prediction, ``None`` where undefined."""
    c = confusion(y_true, y_pred)
    out = {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}
    for name, fn in (("j", j_statistic), ("jaccard", jaccard), ("f1", f1)):
        try:
            out[name] = fn(c)
        except DataError:
            out[name] = None
    return out
