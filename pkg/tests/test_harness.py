import hashlib
import json

import numpy as np
import pytest

from cloudseg.core import CLEAR, CLOUD, DataError, LabeledImage, LabelGrid
from cloudseg.harness import (
    KIND_ORDER,
    benchmark,
    dumps,
    format_table,
    loo_cv,
    make_segmenter,
    synth_dataset,
)
from cloudseg.metrics import j_statistic, confusion, lambda_reweight


def fingerprint_oracle(images):
    h = hashlib.sha256()
    for im in images:
        h.update(np.ascontiguousarray(im.grid.data).tobytes())
        h.update(np.ascontiguousarray(im.labels.labels).tobytes())
    return h.hexdigest()


class TestSynth:
    def test_same_seed_identical(self):
        a = synth_dataset(5, 3, shape=(10, 12))
        b = synth_dataset(5, 3, shape=(10, 12))
        for x, y in zip(a, b):
            assert np.array_equal(x.grid.data, y.grid.data)
            assert np.array_equal(x.labels.labels, y.labels.labels)
            assert x.timestamp == y.timestamp
        assert a.params == b.params

    def test_different_seed_differs(self):
        a = synth_dataset(5, 1, shape=(10, 12))
        b = synth_dataset(6, 1, shape=(10, 12))
        assert not np.array_equal(a[0].grid.data, b[0].grid.data)

    def test_cloud_fraction_and_chronology(self):
        ds = synth_dataset(2, 3, shape=(30, 40), cloud_fraction=[0.1, 0.5, 0.9])
        for im, frac in zip(ds, [0.1, 0.5, 0.9]):
            assert im.labels.counts()[CLOUD] / 1200 == pytest.approx(frac, abs=0.01)
        stamps = [im.timestamp for im in ds]
        assert stamps == sorted(stamps)

    def test_class_means_recorded(self):
        ds = synth_dataset(4, 2, shape=(40, 50), separation=3.0, sigma=2.0)
        data = np.concatenate([im.grid.data.reshape(-1, 8) for im in ds])
        lab = np.concatenate([im.labels.labels.ravel() for im in ds])
        np.testing.assert_allclose(data[lab == CLOUD].mean(axis=0), ds.params["means"]["cloud"], atol=0.15)
        np.testing.assert_allclose(data[lab == CLEAR].mean(axis=0), ds.params["means"]["clear"], atol=0.15)

    def test_degenerate_sigma(self):
        with pytest.raises(DataError, match="degenerate"):
            synth_dataset(0, 1, sigma=0.0)

    def test_identical_classes_give_chance_level(self):
        ds = synth_dataset(8, 4, shape=(30, 40), separation=0.0)
        est = make_segmenter("gmm", features="x1").fit([im.grid for im in ds[:2]], [im.labels for im in ds[:2]])
        js = [est.score(im.grid, im.labels) for im in ds[2:]]
        assert abs(np.mean(js)) < 0.1

    def test_ten_sigma_gmm(self):
        ds = synth_dataset(9, 4, shape=(60, 80), separation=10.0)
        est = make_segmenter("gmm", features="x1").fit([im.grid for im in ds[:2]], [im.labels for im in ds[:2]])
        for im in ds[2:]:
            assert est.score(im.grid, im.labels) >= 0.98


class TestLooCv:
    def test_one_j_per_fold(self, small_images):
        report = loo_cv(small_images, "gmm", {"features": "x1"})
        assert report.n_folds == len(small_images)
        assert len(report.fold_j) == len(small_images)
        assert all(j is not None for j in report.fold_j)
        assert report.mean_j == pytest.approx(np.mean(report.fold_j), abs=1e-12)

    def test_duplicated_images_equal_folds(self, small_images):
        images = [small_images[0]] * 3
        report = loo_cv(images, "kmeans", {"features": "x1"})
        assert len(set(report.fold_j)) == 1

    def test_training_fingerprints_exclude_validation_image(self, small_images):
        report = loo_cv(small_images, "kmeans", {"features": "x1"}, refit=False)
        for n in range(len(small_images)):
            rest = [im for m, im in enumerate(small_images) if m != n]
            assert report.train_fingerprints[n] == fingerprint_oracle(rest)
        # perturbing image n changes every fingerprint except fold n's
        changed = list(small_images)
        im = changed[1]
        changed[1] = LabeledImage(type(im.grid)(im.grid.data + 1.0, im.grid.channels), im.labels, im.timestamp)
        other = loo_cv(changed, "kmeans", {"features": "x1"}, refit=False)
        same = [a == b for a, b in zip(report.train_fingerprints, other.train_fingerprints)]
        assert same == [False, True, False, False]

    def test_beta_grid_matches_exhaustive_oracle(self):
        images = synth_dataset(21, 3, shape=(16, 20), separation=1.5, smoothness=2.5).images
        base = {"features": "x1", "clique_order": 1}
        report = loo_cv(images, "icm-mrf", base, {"beta": [0.0, 1.0]})

        # oracle: fit each fold by hand and sweep lam over every realisable cut
        best = None
        for beta in (0.0, 1.0):
            probs = []
            for n in range(3):
                train = [im for m, im in enumerate(images) if m != n]
                est = make_segmenter("icm-mrf", beta=beta, **base)
                est.fit([im.grid for im in train], [im.labels for im in train])
                probs.append(est.predict_proba(images[n].grid)[..., 0])
            allp = np.unique(np.concatenate([p.ravel() for p in probs]))
            cuts = np.concatenate([[allp[0] / 2], (allp[:-1] + allp[1:]) / 2, [allp[-1] * 1.5]])
            lams = np.append(0.5 / cuts[cuts > 0], 1.0)
            mean_j = max(
                np.mean([j_statistic(confusion(im.labels, lambda_reweight(p, lam)))
                         for p, im in zip(probs, images)])
                for lam in lams
            )
            if best is None or mean_j > best[1] + 1e-12:
                best = (beta, mean_j)
        assert report.selected == {"beta": best[0]}
        assert report.mean_j == pytest.approx(best[1], abs=1e-9)

    def test_refit_carries_winner(self, small_images):
        report = loo_cv(small_images, "gmm", {"features": "x1"}, {"epsilon": [1e-6, 1e-2]})
        est = report.estimator
        assert est.epsilon == report.selected["epsilon"]
        assert est.virtual_prior == report.lam
        assert hasattr(est, "components_")

    def test_single_class_fold_skipped(self, small_images):
        im = small_images[0]
        clear = LabeledImage(im.grid, LabelGrid(np.full(im.grid.shape, CLEAR)), im.timestamp)
        images = [clear] + list(small_images[1:])
        with pytest.warns(UserWarning, match="fold 0"):
            report = loo_cv(images, "kmeans", {"features": "x1"})
        assert report.skipped_folds == [0]
        assert report.fold_j[0] is None
        assert report.mean_j == pytest.approx(np.mean(report.fold_j[1:]), abs=1e-12)

    def test_needs_two_images(self, small_images):
        with pytest.raises(DataError):
            loo_cv(small_images[:1], "gmm")

    def test_report_json_is_stable(self, small_images):
        a = loo_cv(small_images[:3], "kmeans", {"features": "x1"}, refit=False)
        b = loo_cv(small_images[:3], "kmeans", {"features": "x1"}, refit=False)
        assert dumps(a.to_dict()) == dumps(b.to_dict())
        assert "fold_seconds" not in json.loads(dumps(a.to_dict()))


class TestBenchmark:
    def test_thirty_samples_for_one_image(self, small_images):
        im = small_images[0]
        est = make_segmenter("kmeans", features="x1").fit(im.grid, im.labels)
        report = benchmark([est], [im], repetitions=30, warmup=1)
        (row,) = report.models
        assert len(row.samples_ms) == 30
        assert all(s > 0 for s in row.samples_ms)
        assert row.median_ms == pytest.approx(np.median(row.samples_ms))
        assert row.feature_median_ms > 0

    def test_trained_model_input_and_scores(self, small_images):
        im = small_images[1]
        est = make_segmenter("icm-mrf", features="x1", clique_order=2).fit(im.grid, im.labels)
        report = benchmark([("icm", est.to_model())], [im], repetitions=3, warmup=0)
        (row,) = report.models
        assert row.name == "icm" and row.kind == "icm-mrf" and row.clique_order == 2
        assert row.j == pytest.approx(est.score(im.grid, im.labels))
        assert row.extra["median_ms_one_sweep"] > 0
        doc = report.to_dict()
        assert doc["includes_lambda_reweighting"] is True
        assert "samples_ms" not in doc["models"][0]

    def test_repetitions_validated(self, small_images):
        with pytest.raises(ValueError):
            benchmark([], small_images, repetitions=0)


class TestTable:
    def entries(self):
        return [
            {"kind": "sa-icm-mrf", "features": "x1", "neighborhood": 0, "clique_order": 2, "j": 0.9, "median_ms": 3.0},
            {"kind": "kmeans", "features": "x1", "neighborhood": 1, "clique_order": None, "j": 0.7, "median_ms": 0.1},
            {"kind": "icm-mrf", "features": "x1", "neighborhood": 0, "clique_order": 1, "j": 0.93, "median_ms": 11.0},
            {"kind": "gmm", "features": "x4", "neighborhood": 2, "clique_order": None, "j": 0.75, "median_ms": 0.9},
        ]

    def test_rows_follow_model_order(self):
        text = format_table(self.entries())
        titles = ["k-means", "GMM", "ICM-MRF", "SA-ICM-MRF"]
        positions = [text.index("\n" + " " * 10) for _ in titles]  # sanity: centred titles exist
        assert positions
        order = [text.index(t) for t in titles]
        assert order == sorted(order)
        assert len(KIND_ORDER) == 4

    def test_cells_land_in_neighbourhood_columns(self):
        lines = format_table(self.entries()).splitlines()
        kmeans_row = next(l for l in lines if l.startswith("x1") and "70.00" in l)
        cells = kmeans_row.split()
        assert cells[1:4] == ["-", "70.00", "-"]
        assert "Omega2(x1)" in "\n".join(lines)

    def test_time_columns_optional(self):
        entries = [{k: v for k, v in e.items() if k != "median_ms"} for e in self.entries()]
        assert "Time" not in format_table(entries)
