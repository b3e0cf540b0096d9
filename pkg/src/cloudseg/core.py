"""Domain types, dataset/CSV I/O and model persistence.

Pixel coordinates are 1-based in every file and 0-based in memory.
Labels use -1 for clear sky and +1 for cloud; class index ``k = 0``
(the first component) always means clear and ``k = 1`` means cloud.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CLEAR = -1
CLOUD = 1

FORMAT_VERSION = 1
MODEL_KINDS = ("kmeans", "gmm", "icm-mrf", "sa-icm-mrf")


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ManifestError(DataError):
    pass


class ChronologyError(ManifestError):
    pass


class ModelFormatError(DataError):
    pass


def label_to_class(labels):
    """Map labels {-1, +1} to class indices {0, 1}."""
    return (np.asarray(labels) > 0).astype(np.intp)


def class_to_label(k):
    """Map class indices {0, 1} to labels {-1, +1}."""
    return np.where(np.asarray(k) > 0, CLOUD, CLEAR).astype(np.int8)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class PixelGrid:
    """An ``M x N`` raster of ``d`` named feature channels."""

    data: np.ndarray
    channels: tuple

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3:
            raise DataError(f"grid data must be M x N x d, got shape {data.shape}")
        channels = tuple(str(c) for c in self.channels)
        if len(channels) != data.shape[2]:
            raise DataError(
                f"{len(channels)} channel names for {data.shape[2]} data channels"
            )
        if len(set(channels)) != len(channels):
            raise DataError(f"duplicate channel names in {channels}")
        if not np.all(np.isfinite(data)):
            raise DataError("grid contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape[:2]

    def channel(self, name):
        try:
            return self.data[:, :, self.channels.index(name)]
        except ValueError:
            raise DataError(f"channel {name!r} not in grid {self.channels}") from None


@dataclass(frozen=True)
class LabelGrid:
    """Per-pixel binary labels, -1 (clear) or +1 (cloud)."""

    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 2:
            raise DataError(f"labels must be M x N, got shape {raw.shape}")
        bad = ~np.isin(raw, (CLEAR, CLOUD))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(
                f"label outside {{-1,1}}: {raw[i, j]!r} at ({i + 1},{j + 1})"
            )
        labels = raw.astype(np.int8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self):
        return self.labels.shape

    def counts(self):
        """Return ``{-1: n_clear, 1: n_cloud}``."""
        n_cloud = int(np.count_nonzero(self.labels == CLOUD))
        return {CLEAR: self.labels.size - n_cloud, CLOUD: n_cloud}


@dataclass(frozen=True)
class LabeledImage:
    grid: PixelGrid
    labels: LabelGrid
    timestamp: Optional[str] = None

    def __post_init__(self):
        if self.grid.shape != self.labels.shape:
            raise DataError(
                f"label grid {self.labels.shape} does not match pixel grid {self.grid.shape}"
            )


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    covariance: np.ndarray
    prior: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.covariance, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DataError(f"covariance shape {cov.shape} does not match mean length {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise DataError("component parameters must be finite")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise DataError("covariance is not symmetric")
        prior = float(self.prior)
        if not 0.0 <= prior <= 1.0:
            raise DataError(f"prior {prior} outside [0, 1]")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "prior", prior)

    @property
    def dim(self):
        return self.mean.shape[0]


def check_components(components: Sequence[GaussianComponent]):
    """Validate a mixture: shared dimension and priors summing to one."""
    if len(components) == 0:
        raise DataError("a model needs at least one component")
    dims = {c.dim for c in components}
    if len(dims) != 1:
        raise DataError(f"components disagree on dimension: {sorted(dims)}")
    total = math.fsum(c.prior for c in components)
    if abs(total - 1.0) > 1e-12:
        raise DataError(f"component priors sum to {total!r}, expected 1")
    return list(components)


def stack_components(components):
    """Return ``(means, covariances, priors)`` arrays of shape (K,d), (K,d,d), (K,)."""
    means = np.stack([c.mean for c in components])
    covs = np.stack([c.covariance for c in components])
    priors = np.array([c.prior for c in components])
    return means, covs, priors


def make_components(means, covariances, priors):
    return [
        GaussianComponent(m, c, p) for m, c, p in zip(means, covariances, priors)
    ]


@dataclass(frozen=True)
class TrainedModel:
    """Everything needed to rebuild a fitted segmenter."""

    kind: str
    components: tuple
    features: str
    neighborhood: int
    epsilon: float = 0.0
    lam: float = 1.0
    clique_order: Optional[int] = None
    beta: Optional[float] = None
    alpha: Optional[float] = None
    t0: Optional[float] = None
    standardization: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DataError(f"unknown model kind {self.kind!r}")
        comps = tuple(check_components(self.components))
        object.__setattr__(self, "components", comps)
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise DataError(f"virtual prior must be > 0, got {self.lam!r}")
        if self.kind == "kmeans":
            eye = np.eye(comps[0].dim)
            if any(not np.array_equal(c.covariance, eye) for c in comps):
                raise DataError("k-means components must carry identity covariance")
            if self.standardization is None:
                raise DataError("k-means model requires standardization statistics")
        if self.kind in ("icm-mrf", "sa-icm-mrf"):
            if self.clique_order not in (1, 2) or self.beta is None:
                raise DataError("MRF model requires clique_order in {1,2} and beta")
        if self.standardization is not None:
            mean, var = (np.asarray(a, dtype=np.float64) for a in self.standardization)
            object.__setattr__(self, "standardization", (mean, var))


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class ImageRecord:
    features: Path
    labels: Path
    timestamp: str


@dataclass(frozen=True)
class DatasetManifest:
    height: int
    width: int
    channels: tuple
    images: tuple

    def load_images(self):
        """Load every record as a :class:`LabeledImage`, in manifest order."""
        d = len(self.channels)
        out = []
        for rec in self.images:
            grid = load_feature_csv(rec.features, self.height, self.width, d)
            if grid.channels != self.channels:
                raise ManifestError(
                    f"{rec.features}: channels {grid.channels} differ from manifest {self.channels}"
                )
            labels = load_labels_csv(rec.labels, self.height, self.width)
            out.append(LabeledImage(grid, labels, rec.timestamp))
        return out


def _parse_time(value, where):
    try:
        return datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    except ValueError:
        raise ManifestError(f"malformed record: bad timestamp {value!r} in {where}") from None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"missing file: manifest {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from None
    try:
        height, width = int(raw["height"]), int(raw["width"])
        channels = tuple(raw["channels"])
        images = raw["images"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest {path}: {exc!r}") from None
    if not images:
        raise ManifestError("empty dataset")

    base = path.parent
    records = []
    previous = None
    for n, item in enumerate(images):
        where = f"{path} record {n}"
        if not isinstance(item, dict) or not {"features", "labels", "timestamp"} <= item.keys():
            raise ManifestError(f"malformed record: {where} needs features, labels, timestamp")
        rec = ImageRecord(
            features=base / item["features"],
            labels=base / item["labels"],
            timestamp=str(item["timestamp"]),
        )
        for p in (rec.features, rec.labels):
            if not p.is_file():
                raise ManifestError(f"missing file: {p} ({where})")
        when = _parse_time(rec.timestamp, where)
        if previous is not None and when < previous:
            raise ChronologyError(
                f"chronology violated: {rec.timestamp} precedes the previous record ({where})"
            )
        previous = when
        records.append(rec)
    return DatasetManifest(height, width, channels, tuple(records))


def write_manifest(path, height, width, channels, records):
    """Write a manifest; ``records`` holds ``(features, labels, timestamp)`` triples."""
    path = Path(path)
    doc = {
        "height": int(height),
        "width": int(width),
        "channels": list(channels),
        "images": [
            {"features": str(f), "labels": str(l), "timestamp": t} for f, l, t in records
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV


def _read_rows(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    return header, rows


def _fill(path, header, rows, M, N, n_values):
    """Scatter ``i,j,v...`` rows into an (M, N, n_values) array, checking coverage."""
    if len(header) != 2 + n_values or header[0] != "i" or header[1] != "j":
        raise DataError(
            f"{path}: header {header} does not match 'i,j' plus {n_values} columns"
        )
    out = np.empty((M, N, n_values))
    seen = np.zeros((M, N), dtype=bool)
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 2 + n_values:
            raise DataError(f"{path}:{lineno}: expected {2 + n_values} fields, got {len(row)}")
        try:
            i, j = int(row[0]), int(row[1])
            values = [float(v) for v in row[2:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparsable row {row}") from None
        if not (1 <= i <= M and 1 <= j <= N):
            raise DataError(f"{path}:{lineno}: pixel ({i},{j}) outside {M}x{N} (dimension mismatch)")
        if seen[i - 1, j - 1]:
            raise DataError(f"{path}:{lineno}: duplicate pixel ({i},{j})")
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{path}:{lineno}: non-finite value at pixel ({i},{j})")
        seen[i - 1, j - 1] = True
        out[i - 1, j - 1] = values
    if not seen.all():
        missing = [f"({i + 1},{j + 1})" for i, j in np.argwhere(~seen)[:10]]
        more = "" if (~seen).sum() <= 10 else f" and {(~seen).sum() - 10} more"
        raise DataError(f"{path}: missing pixel(s) {', '.join(missing)}{more}")
    if len(rows) != M * N:
        raise DataError(f"{path}: {len(rows)} rows for a {M}x{N} grid")
    return out


def load_feature_csv(path, M, N, d) -> PixelGrid:
    header, rows = _read_rows(path)
    data = _fill(path, header, rows, M, N, d)
    return PixelGrid(data, tuple(header[2:]))


def read_feature_csv(path) -> PixelGrid:
    """Load a feature CSV, inferring the grid size from the largest coordinates."""
    header, rows = _read_rows(path)
    try:
        M = max(int(r[0]) for r in rows)
        N = max(int(r[1]) for r in rows)
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed coordinates") from None
    return PixelGrid(_fill(path, header, rows, M, N, len(header) - 2), tuple(header[2:]))


def load_labels_csv(path, M, N) -> LabelGrid:
    header, rows = _read_rows(path)
    values = _fill(path, header, rows, M, N, 1)[:, :, 0]
    return LabelGrid(values)


def _format(v):
    return repr(float(v))


def _write_rows(path, header, values):
    M, N, _ = values.shape
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for i in range(M):
        for j in range(N):
            buf.write(f"{i + 1},{j + 1}," + ",".join(_format(v) for v in values[i, j]) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def save_feature_csv(grid: PixelGrid, path):
    _write_rows(path, ["i", "j", *grid.channels], grid.data)


def save_labels_csv(labels: LabelGrid, path):
    M, N = labels.shape
    buf = io.StringIO()
    buf.write("i,j,label\n")
    for i in range(M):
        for j in range(N):
            buf.write(f"{i + 1},{j + 1},{int(labels.labels[i, j])}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def save_posterior_csv(posterior, path):
    """Write per-pixel class posteriors, shape (M, N, 2), as ``i,j,p_clear,p_cloud``."""
    _write_rows(path, ["i", "j", "p_clear", "p_cloud"], np.asarray(posterior))


# ---------------------------------------------------------------------------
# Model persistence


def _component_to_json(c):
    return {
        "mean": [float(v) for v in c.mean],
        "covariance": [[float(v) for v in row] for row in c.covariance],
        "prior": float(c.prior),
    }


def model_to_dict(model: TrainedModel):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "features": model.features,
        "neighborhood": model.neighborhood,
        "epsilon": float(model.epsilon),
        "lambda": float(model.lam),
        "components": [_component_to_json(c) for c in model.components],
    }
    if model.clique_order is not None:
        doc["clique_order"] = model.clique_order
    for key in ("beta", "alpha", "t0"):
        value = getattr(model, key)
        if value is not None:
            doc[key] = float(value)
    if model.standardization is not None:
        mean, var = model.standardization
        doc["standardization"] = {
            "mean": [float(v) for v in mean],
            "variance": [float(v) for v in var],
        }
    if model.extra:
        doc["extra"] = model.extra
    return doc


def model_from_dict(doc) -> TrainedModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {version!r}")
    try:
        comps = [
            GaussianComponent(c["mean"], c["covariance"], c["prior"])
            for c in doc["components"]
        ]
        std = doc.get("standardization")
        return TrainedModel(
            kind=doc["kind"],
            components=tuple(comps),
            features=doc["features"],
            neighborhood=int(doc["neighborhood"]),
            epsilon=float(doc["epsilon"]),
            lam=float(doc["lambda"]),
            clique_order=doc.get("clique_order"),
            beta=doc.get("beta"),
            alpha=doc.get("alpha"),
            t0=doc.get("t0"),
            standardization=None if std is None else (std["mean"], std["variance"]),
            extra=doc.get("extra", {}),
        )
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks field {exc}") from None
    except DataError as exc:
        raise ModelFormatError(f"invalid model: {exc}") from None


def save_model(model: TrainedModel, path):
    # json writes floats with repr(), which round-trips binary64 exactly
    text = json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_model(path) -> TrainedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model file {path}: {exc}") from None
    return model_from_dict(doc)
