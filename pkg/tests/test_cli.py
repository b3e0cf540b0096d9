import json

import numpy as np
import pytest

from cloudseg.cli import main
from cloudseg.core import PixelGrid, load_labels_csv, load_manifest, load_model, save_feature_csv
from cloudseg.harness import segmenter_from_model
from cloudseg.metrics import confusion, j_statistic


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "7", "--n-images", "3", "--height", "20", "--width", "24",
                 "--separation", "3", "--out", str(out)]) == 0
    return out


def run(args, capsys=None):
    code = main([str(a) for a in args])
    err = capsys.readouterr().err if capsys else ""
    return code, err


class TestSynth:
    def test_twice_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--seed", "7", "--n-images", "2", "--height", "6", "--width", "5",
                         "--out", str(tmp_path / name)]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_manifest_loads(self, dataset):
        manifest = load_manifest(dataset / "manifest.json")
        assert len(manifest.images) == 3 and (manifest.height, manifest.width) == (20, 24)

    def test_bad_cloud_fraction(self, tmp_path, capsys):
        code, err = run(["synth", "--seed", 1, "--cloud-fraction", 1.5, "--out", tmp_path], capsys)
        assert code == 2 and "cloud-fraction" in err


class TestFit:
    def test_gmm_x4_model_file(self, dataset, tmp_path):
        out = tmp_path / "g.json"
        assert main(["fit", "--manifest", str(dataset / "manifest.json"), "--model", "gmm",
                     "--features", "x4", "--neighborhood", "0", "--out", str(out)]) == 0
        model = load_model(out)
        assert len(model.components) == 2
        assert all(c.mean.shape == (3,) for c in model.components)

    def test_icm_default_clique_order_warns(self, dataset, tmp_path, capsys):
        out = tmp_path / "m.json"
        code, err = run(["fit", "--manifest", dataset / "manifest.json", "--model", "icm-mrf",
                         "--features", "x1", "--neighborhood", "0", "--out", out], capsys)
        assert code == 0
        assert "warning" in err and "clique-order" in err
        assert load_model(out).clique_order == 1

    def test_unknown_features(self, dataset, tmp_path, capsys):
        code, err = run(["fit", "--manifest", dataset / "manifest.json", "--model", "gmm",
                         "--features", "x5", "--neighborhood", "0", "--out", tmp_path / "x.json"], capsys)
        assert code == 2 and "x5" in err

    def test_beta_on_gmm_is_usage_error(self, dataset, tmp_path, capsys):
        code, _ = run(["fit", "--manifest", dataset / "manifest.json", "--model", "gmm",
                       "--features", "x1", "--neighborhood", "0", "--beta", "1",
                       "--out", tmp_path / "x.json"], capsys)
        assert code == 2

    def test_missing_manifest_is_data_error(self, tmp_path, capsys):
        code, err = run(["fit", "--manifest", tmp_path / "none.json", "--model", "gmm",
                         "--features", "x1", "--neighborhood", "0", "--out", tmp_path / "x.json"], capsys)
        assert code == 1 and "missing file" in err

    def test_grid_runs_cross_validation(self, dataset, tmp_path):
        out, rep = tmp_path / "m.json", tmp_path / "cv.json"
        assert main(["fit", "--manifest", str(dataset / "manifest.json"), "--model", "icm-mrf",
                     "--features", "x1", "--neighborhood", "0", "--clique-order", "2",
                     "--grid-beta", "0.5,1", "--report", str(rep), "--out", str(out)]) == 0
        report = json.loads(rep.read_text())
        model = load_model(out)
        assert model.beta == report["selected"]["beta"]
        assert model.lam == report["lambda"]
        assert len(report["fold_j"]) == 3


@pytest.fixture(scope="module")
def model_file(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("models") / "mrf.json"
    assert main(["fit", "--manifest", str(dataset / "manifest.json"), "--model", "icm-mrf",
                 "--features", "x1", "--neighborhood", "1", "--clique-order", "2",
                 "--out", str(out)]) == 0
    return out


class TestPredict:
    @pytest.mark.parametrize("sa", [False, True])
    def test_matches_library_path(self, dataset, model_file, tmp_path, sa):
        out = tmp_path / "labels.csv"
        args = ["predict", "--model-file", str(model_file),
                "--features-csv", str(dataset / "img_001.features.csv"), "--out-labels", str(out)]
        assert main(args + (["--sa"] if sa else [])) == 0
        predicted = load_labels_csv(out, 20, 24)
        images = load_manifest(dataset / "manifest.json").load_images()
        est = segmenter_from_model(load_model(model_file))
        if sa:
            est.inference = "sa"
        expected = est.predict(images[1].grid)
        np.testing.assert_array_equal(predicted.labels, expected)
        assert j_statistic(confusion(images[1].labels, predicted)) == est.score(images[1].grid, images[1].labels)
        post = np.loadtxt(tmp_path / "labels.posterior.csv", delimiter=",", skiprows=1)
        assert post.shape == (480, 4)
        np.testing.assert_allclose(post[:, 2] + post[:, 3], 1.0, atol=1e-12)

    def test_sa_on_kmeans_is_usage_error(self, dataset, tmp_path, capsys):
        model = tmp_path / "k.json"
        assert main(["fit", "--manifest", str(dataset / "manifest.json"), "--model", "kmeans",
                     "--features", "x1", "--neighborhood", "0", "--out", str(model)]) == 0
        code, err = run(["predict", "--model-file", model, "--features-csv", dataset / "img_000.features.csv",
                         "--sa", "--out-labels", tmp_path / "o.csv"], capsys)
        assert code == 2 and "MRF" in err

    def test_sa_flags_need_sa(self, dataset, model_file, tmp_path, capsys):
        code, _ = run(["predict", "--model-file", model_file, "--features-csv", dataset / "img_000.features.csv",
                       "--t0", "2", "--out-labels", tmp_path / "o.csv"], capsys)
        assert code == 2

    def test_dimension_mismatch_is_data_error(self, model_file, tmp_path, capsys):
        grid = PixelGrid(np.zeros((4, 4, 2)), ("vmag", "dT"))
        save_feature_csv(grid, tmp_path / "f.csv")
        code, err = run(["predict", "--model-file", model_file, "--features-csv", tmp_path / "f.csv",
                         "--out-labels", tmp_path / "o.csv"], capsys)
        assert code == 1 and "channel" in err


class TestValidateBench:
    def test_two_image_manifest_gives_two_folds(self, tmp_path):
        data = tmp_path / "d"
        assert main(["synth", "--seed", "3", "--n-images", "2", "--height", "12", "--width", "14",
                     "--out", str(data)]) == 0
        out = tmp_path / "v.json"
        assert main(["validate", "--manifest", str(data / "manifest.json"), "--model", "gmm",
                     "--features", "x1", "--neighborhood", "0", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["n_folds"] == 2 and len(report["fold_j"]) == 2
        assert "fold_seconds" not in report

    def test_validate_output_is_byte_identical(self, dataset, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.json"
            table = tmp_path / f"{name}.txt"
            assert main(["validate", "--manifest", str(dataset / "manifest.json"), "--model", "kmeans",
                         "--features", "x2", "--neighborhood", "1", "--table", str(table),
                         "--out", str(out)]) == 0
            outs.append((out.read_bytes(), table.read_bytes()))
        assert outs[0] == outs[1]

    def test_bench_four_models_in_table_order(self, dataset, tmp_path):
        files = []
        for kind, extra in (("icm-mrf", ["--clique-order", "1"]), ("gmm", []), ("kmeans", [])):
            out = tmp_path / f"{kind}.json"
            assert main(["fit", "--manifest", str(dataset / "manifest.json"), "--model", kind,
                         "--features", "x1", "--neighborhood", "0", *extra, "--out", str(out)]) == 0
            files += ["--model-file", str(out)]
        table = tmp_path / "t.txt"
        assert main(["bench", "--manifest", str(dataset / "manifest.json"), *files, "--with-sa",
                     "--repetitions", "2", "--warmup", "0", "--table", str(table),
                     "--out", str(tmp_path / "b.json")]) == 0
        text = table.read_text()
        order = [text.index(t) for t in ("k-means", "GMM", "\n" + " " * 20)]
        assert order[0] < order[1]
        assert text.index("ICM-MRF") < text.index("SA-ICM-MRF")
        report = json.loads((tmp_path / "b.json").read_text())
        assert sorted(m["kind"] for m in report["models"]) == ["gmm", "icm-mrf", "kmeans", "sa-icm-mrf"]
        assert all(m["median_ms"] > 0 for m in report["models"])
