"""Leave-one-out cross-validation, synthetic data and latency benchmarks."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import ParameterGrid

from .core import CLEAR, CLOUD, DataError, LabeledImage, LabelGrid, PixelGrid
from .features import ALL_CHANNELS, design_matrix
from .gmm import GaussianMixtureSegmenter
from .kmeans import KMeansSegmenter
from .metrics import lambda_reweight, lambda_search_folds, score_labels
from .mrf import MRFSegmenter

log = logging.getLogger(__name__)

SEGMENTERS = {
    "kmeans": KMeansSegmenter,
    "gmm": GaussianMixtureSegmenter,
    "icm-mrf": MRFSegmenter,
    "sa-icm-mrf": MRFSegmenter,
}

# Row order of the summary table.
KIND_ORDER = ("kmeans", "gmm", "icm-mrf", "sa-icm-mrf")
KIND_TITLES = {"kmeans": "k-means", "gmm": "GMM", "icm-mrf": "ICM-MRF", "sa-icm-mrf": "SA-ICM-MRF"}


def make_segmenter(kind, **params):
    if kind not in SEGMENTERS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "sa-icm-mrf":
        params.setdefault("inference", "sa")
    return SEGMENTERS[kind](**params)


def segmenter_from_model(model):
    return SEGMENTERS[model.kind].from_model(model)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticDataset:
    images: list
    params: dict

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, item):
        return self.images[item]


def blob_labels(rng, shape, smoothness, cloud_fraction):
    """Cloud-like blobs: smoothed white noise thresholded at a quantile."""
    field = gaussian_filter(rng.standard_normal(shape), smoothness, mode="reflect")
    cut = np.quantile(field, 1.0 - cloud_fraction)
    return np.where(field > cut, CLOUD, CLEAR).astype(np.int8)


def synth_dataset(seed, n_images, shape=(60, 80), separation=5.0, sigma=1.0, smoothness=4.0,
                  cloud_fraction=0.5, channels=ALL_CHANNELS, start="2020-01-01T00:00:00"):
    """Seeded two-class images with blob-shaped labels.

    Every channel is Gaussian with standard deviation ``sigma``; cloud
    pixels are shifted by ``separation * sigma`` on every channel, so the
    class means differ by ``separation`` standard deviations per channel.
    ``cloud_fraction`` may be a float or a per-image sequence.
    """
    if not sigma > 0:
        raise DataError("degenerate covariance: sigma must be > 0")
    channels = tuple(channels)
    rng = np.random.default_rng(seed)
    d = len(channels)
    clear_mean = np.zeros(d)
    cloud_mean = np.full(d, separation * sigma)
    fractions = (
        list(cloud_fraction) if np.ndim(cloud_fraction) else [cloud_fraction] * n_images
    )
    t0 = datetime.fromisoformat(start)
    images = []
    for n in range(n_images):
        labels = blob_labels(rng, shape, smoothness, fractions[n])
        noise = rng.standard_normal((*shape, d)) * sigma
        mean = np.where((labels == CLOUD)[..., None], cloud_mean, clear_mean)
        grid = PixelGrid(mean + noise, channels)
        stamp = (t0 + timedelta(hours=n)).isoformat()
        images.append(LabeledImage(grid, LabelGrid(labels), stamp))
    params = {
        "seed": seed,
        "shape": list(shape),
        "channels": list(channels),
        "sigma": sigma,
        "separation": separation,
        "smoothness": smoothness,
        "cloud_fraction": fractions,
        "means": {"clear": clear_mean.tolist(), "cloud": cloud_mean.tolist()},
    }
    return SyntheticDataset(images, params)


# ---------------------------------------------------------------------------
# Leave-one-out cross-validation


def _fingerprint(images):
    h = hashlib.sha256()
    for im in images:
        h.update(np.ascontiguousarray(im.grid.data).tobytes())
        h.update(np.ascontiguousarray(im.labels.labels).tobytes())
    return h.hexdigest()


def _single_class(labels):
    counts = labels.counts()
    return counts[CLEAR] == 0 or counts[CLOUD] == 0


@dataclass
class GridPoint:
    params: dict
    lam: Optional[float]
    mean_j: Optional[float]
    fold_j: list


@dataclass
class CvReport:
    kind: str
    features: str
    neighborhood: int
    n_folds: int
    fold_j: list
    mean_j: float
    selected: dict
    lam: float
    grid: list
    skipped_folds: list
    train_fingerprints: list
    fold_seconds: list = field(default_factory=list)
    estimator: object = field(default=None, repr=False)

    def to_dict(self, timings=False):
        doc = {
            "kind": self.kind,
            "features": self.features,
            "neighborhood": self.neighborhood,
            "n_folds": self.n_folds,
            "fold_j": self.fold_j,
            "mean_j": self.mean_j,
            "selected": self.selected,
            "lambda": self.lam,
            "grid": [asdict(g) for g in self.grid],
            "skipped_folds": self.skipped_folds,
            "train_fingerprints": self.train_fingerprints,
        }
        if timings:
            doc["fold_seconds"] = self.fold_seconds
        return doc


def loo_cv(images: Sequence[LabeledImage], kind, params=None, grid=None, refit=True) -> CvReport:
    """Leave-one-image-out selection of hyperparameters and virtual prior.

    For every combination in ``grid`` (a mapping of estimator parameter
    name to candidate values) each image in turn is held out, the model is
    fitted on the others and the clear-sky posteriors of the held-out image
    are kept.  The virtual prior maximising the mean held-out J is chosen
    per combination, and the combination with the highest mean J wins
    (ties go to the earlier one).  Folds whose held-out labels contain a
    single class are skipped with a warning.
    """
    images = list(images)
    if len(images) < 2:
        raise DataError("leave-one-out needs at least two training images")
    params = dict(params or {})
    points = list(ParameterGrid(grid or {})) or [{}]
    skipped = [n for n, im in enumerate(images) if _single_class(im.labels)]
    for n in skipped:
        warnings.warn(f"fold {n}: held-out image has a single class; J undefined, fold skipped")
    active = [n for n in range(len(images)) if n not in skipped]
    if not active:
        raise DataError("every fold has single-class labels; nothing to validate")

    fingerprints = [
        _fingerprint([im for m, im in enumerate(images) if m != n]) for n in range(len(images))
    ]
    results = []
    seconds = []
    for point in points:
        p_folds, y_folds = [], []
        for n in active:
            train = [im for m, im in enumerate(images) if m != n]
            start = time.perf_counter()
            est = make_segmenter(kind, **params, **point)
            est.fit([im.grid for im in train], [im.labels for im in train])
            p_folds.append(est.predict_proba(images[n].grid)[..., 0])
            seconds.append(time.perf_counter() - start)
            y_folds.append(images[n].labels.labels)
        choice = lambda_search_folds(p_folds, y_folds)
        fold_j = [None] * len(images)
        for n, p, y in zip(active, p_folds, y_folds):
            fold_j[n] = score_labels(y, lambda_reweight(p, choice.lam))["j"]
        results.append(GridPoint(dict(point), choice.lam, choice.j, fold_j))
        log.info("%s %s: lambda=%.6g mean J=%.4f", kind, point, choice.lam, choice.j)

    best = max(range(len(results)), key=lambda i: (results[i].mean_j, -i))
    winner = results[best]
    estimator = None
    if refit:
        estimator = make_segmenter(kind, **params, **winner.params, virtual_prior=winner.lam)
        estimator.fit([im.grid for im in images], [im.labels for im in images])
    est_params = make_segmenter(kind, **params).get_params()
    return CvReport(
        kind=kind,
        features=est_params["features"],
        neighborhood=est_params["neighborhood"],
        n_folds=len(images),
        fold_j=winner.fold_j,
        mean_j=winner.mean_j,
        selected=dict(winner.params),
        lam=winner.lam,
        grid=results,
        skipped_folds=skipped,
        train_fingerprints=fingerprints,
        fold_seconds=seconds,
        estimator=estimator,
    )


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class ModelBench:
    name: str
    kind: str
    features: str
    neighborhood: int
    clique_order: Optional[int]
    samples_ms: list
    median_ms: float
    mean_ms: float
    feature_median_ms: float
    j: Optional[float]
    jaccard: Optional[float]
    f1: Optional[float]
    per_image: list
    extra: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    models: list
    repetitions: int
    warmup: int
    includes_feature_time: bool = False
    includes_lambda_reweighting: bool = True

    def to_dict(self, samples=False):
        out = []
        for m in self.models:
            d = asdict(m)
            if not samples:
                d.pop("samples_ms")
            out.append(d)
        return {
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "includes_feature_time": self.includes_feature_time,
            "includes_lambda_reweighting": self.includes_lambda_reweighting,
            "models": out,
        }


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def time_inference(est, designs, repetitions, warmup=5):
    """Per-image wall-clock latency (ms) of ``predict_design``, serialised."""
    for _ in range(warmup):
        for dm in designs:
            est.predict_design(dm)
    samples = []
    for _ in range(repetitions):
        for dm in designs:
            start = time.perf_counter_ns()
            est.predict_design(dm)
            samples.append((time.perf_counter_ns() - start) / 1e6)
    return samples


def benchmark(models, images: Sequence[LabeledImage], repetitions=30, warmup=5) -> BenchReport:
    """Inference latency and test scores of fitted models.

    ``models`` holds fitted segmenters or :class:`TrainedModel` records,
    optionally as ``(name, model)`` pairs.  Feature assembly is timed
    separately from inference.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    images = list(images)
    rows = []
    for n, item in enumerate(models):
        name, model = item if isinstance(item, tuple) else (None, item)
        est = model if hasattr(model, "predict_design") else segmenter_from_model(model)
        kind = est.kind
        name = name or f"{kind}-{est.features}-n{est.neighborhood}"

        feature_ms = []
        for _ in range(max(1, repetitions // 10)):
            for im in images:
                start = time.perf_counter_ns()
                design_matrix(im.grid, est.features, est.neighborhood)
                feature_ms.append((time.perf_counter_ns() - start) / 1e6)
        designs = [design_matrix(im.grid, est.features, est.neighborhood) for im in images]
        samples = time_inference(est, designs, repetitions, warmup)

        per_image = [score_labels(im.labels, est.predict_design(dm)) for im, dm in zip(images, designs)]
        extra = {}
        if kind == "icm-mrf":
            one = copy.copy(est)
            one.max_sweeps = 1
            extra["median_ms_one_sweep"] = statistics.median(
                time_inference(one, designs, repetitions, warmup)
            )
        rows.append(ModelBench(
            name=name,
            kind=kind,
            features=est.features,
            neighborhood=est.neighborhood,
            clique_order=getattr(est, "clique_order", None),
            samples_ms=samples,
            median_ms=statistics.median(samples),
            mean_ms=statistics.fmean(samples),
            feature_median_ms=statistics.median(feature_ms),
            j=_mean_defined([s["j"] for s in per_image]),
            jaccard=_mean_defined([s["jaccard"] for s in per_image]),
            f1=_mean_defined([s["f1"] for s in per_image]),
            per_image=per_image,
            extra=extra,
        ))
    return BenchReport(rows, repetitions, warmup)


# ---------------------------------------------------------------------------
# Reports


def _row_label(kind, features, clique_order):
    if kind in ("icm-mrf", "sa-icm-mrf"):
        return f"Omega{clique_order}({features})"
    return features


def format_table(entries, time_key="median_ms"):
    """Plain-text table: model blocks, feature rows, neighbourhood columns.

    ``entries`` are dicts with ``kind``, ``features``, ``neighborhood``,
    ``clique_order``, ``j`` and optionally ``time_key``.
    """
    cells = {}
    for e in entries:
        row = _row_label(e["kind"], e["features"], e.get("clique_order"))
        cells[(e["kind"], row, e["neighborhood"])] = e
    has_time = any(time_key in e and e[time_key] is not None for e in entries)

    def fmt(v, scale=1.0):
        return "-" if v is None else f"{v * scale:.2f}"

    cols = ("Single", "1st Order", "2nd Order")
    head = ["Feature Vector"] + [f"J[%] {c}" for c in cols]
    if has_time:
        head += [f"Time[ms] {c}" for c in cols]
    widths = [max(16, len(h)) for h in head]
    lines = ["  ".join(h.rjust(w) if n else h.ljust(w) for n, (h, w) in enumerate(zip(head, widths)))]
    total = sum(widths) + 2 * (len(widths) - 1)
    for kind in KIND_ORDER:
        rows = sorted({r for k, r, _ in cells if k == kind}, key=lambda r: (r.startswith("Omega2"), r))
        if not rows:
            continue
        lines.append("-" * total)
        lines.append(KIND_TITLES[kind].center(total).rstrip())
        lines.append("-" * total)
        for r in rows:
            vals = [r]
            for order in (0, 1, 2):
                e = cells.get((kind, r, order))
                vals.append(fmt(None if e is None else e.get("j"), 100.0))
            if has_time:
                for order in (0, 1, 2):
                    e = cells.get((kind, r, order))
                    vals.append(fmt(None if e is None else e.get(time_key)))
            lines.append("  ".join(v.rjust(w) if n else v.ljust(w) for n, (v, w) in enumerate(zip(vals, widths))))
    return "\n".join(lines) + "\n"


def dumps(doc):
    """Deterministic JSON text."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
