"""``cloudseg`` command line: fit, predict, validate, bench and synth.

Exit status is 0 on success, 1 on data or runtime errors and 2 on usage
errors.  Every command except ``bench`` writes byte-identical output for
identical flags.
"""

from __future__ import annotations

import argparse
import copy
import sys
import warnings
from pathlib import Path

from . import harness
from .core import (
    DataError,
    LabelGrid,
    load_manifest,
    load_model,
    read_feature_csv,
    save_feature_csv,
    save_labels_csv,
    save_model,
    save_posterior_csv,
    write_manifest,
)
from .features import SELECTORS, design_matrix

FIT_KINDS = ("kmeans", "gmm", "icm-mrf", "sa-icm-mrf")
MRF_KINDS = ("icm-mrf", "sa-icm-mrf")


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _positive(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _count(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _model_flags(p):
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--model", required=True, choices=FIT_KINDS)
    p.add_argument("--features", required=True, choices=sorted(SELECTORS))
    p.add_argument("--neighborhood", required=True, type=int, choices=(0, 1, 2))
    p.add_argument("--clique-order", type=int, choices=(1, 2))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-epsilon", type=_float_list)
    p.add_argument("--grid-beta", type=_float_list)


def build_parser():
    parser = argparse.ArgumentParser(prog="cloudseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a model on every image of a manifest")
    _model_flags(p)
    p.add_argument("--cv", action="store_true",
                   help="select the virtual prior by leave-one-out even without a grid")
    p.add_argument("--report", type=Path, help="also write the cross-validation report here")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("predict", help="label one feature CSV with a trained model")
    p.add_argument("--model-file", required=True, type=Path)
    p.add_argument("--features-csv", required=True, type=Path)
    p.add_argument("--sa", action="store_true", help="use simulated annealing for MRF inference")
    p.add_argument("--alpha", type=float)
    p.add_argument("--t0", type=_positive)
    p.add_argument("--iters", type=_count)
    p.add_argument("--out-labels", required=True, type=Path)
    p.add_argument("--out-posterior", type=Path,
                   help="posterior CSV (default: next to the labels, suffix .posterior.csv)")

    p = sub.add_parser("validate", help="leave-one-out cross-validation report")
    _model_flags(p)
    p.add_argument("--timings", action="store_true", help="include per-fold wall-clock seconds")
    p.add_argument("--table", type=Path, help="also write a plain-text table")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("bench", help="inference latency and test scores")
    p.add_argument("--manifest", required=True, type=Path, help="test images")
    p.add_argument("--model-file", required=True, type=Path, action="append")
    p.add_argument("--with-sa", action="store_true",
                   help="also time simulated annealing with the components of each ICM model")
    p.add_argument("--repetitions", type=_count, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--samples", action="store_true", help="include raw latency samples")
    p.add_argument("--table", type=Path, help="also write a plain-text table")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-images", type=_count, default=8)
    p.add_argument("--height", type=_count, default=60)
    p.add_argument("--width", type=_count, default=80)
    p.add_argument("--separation", type=float, default=5.0)
    p.add_argument("--sigma", type=_positive, default=1.0)
    p.add_argument("--smoothness", type=_positive, default=4.0)
    p.add_argument("--cloud-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def _segmenter_params(args, parser):
    params = {"features": args.features, "neighborhood": args.neighborhood,
              "random_state": args.seed}
    mrf = args.model in MRF_KINDS
    if not mrf:
        if args.clique_order is not None or args.beta is not None or args.grid_beta:
            parser.error(f"--clique-order/--beta/--grid-beta apply to MRF models, not {args.model}")
    if args.model == "kmeans" and (args.epsilon is not None or args.grid_epsilon):
        parser.error("kmeans has no epsilon")
    if mrf:
        if args.clique_order is None:
            warnings.warn("--clique-order not given; using 1 (4-neighbourhood)")
            args.clique_order = 1
        params["clique_order"] = args.clique_order
        if args.beta is not None:
            params["beta"] = args.beta
    if args.epsilon is not None:
        params["epsilon"] = args.epsilon
    grid = {}
    if args.grid_epsilon:
        grid["epsilon"] = args.grid_epsilon
    if args.grid_beta:
        grid["beta"] = args.grid_beta
    return params, grid


def _images(path):
    return load_manifest(path).load_images()


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _table_entry(kind, est, **values):
    return {"kind": kind, "features": est["features"], "neighborhood": est["neighborhood"],
            "clique_order": est.get("clique_order"), **values}


def cmd_fit(args, parser):
    params, grid = _segmenter_params(args, parser)
    images = _images(args.manifest)
    if grid or args.cv:
        report = harness.loo_cv(images, args.model, params, grid)
        est = report.estimator
        if args.report:
            _write(args.report, harness.dumps(report.to_dict()))
    else:
        if args.report:
            parser.error("--report needs a grid or --cv")
        est = harness.make_segmenter(args.model, **params)
        est.fit([im.grid for im in images], [im.labels for im in images])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(est.to_model(), args.out)


def cmd_predict(args, parser):
    model = load_model(args.model_file)
    sa_flags = [f for f in ("alpha", "t0", "iters") if getattr(args, f) is not None]
    if model.kind not in MRF_KINDS and (args.sa or sa_flags):
        parser.error(f"--sa/--alpha/--t0/--iters need an MRF model, got {model.kind}")
    if sa_flags and not args.sa and model.kind != "sa-icm-mrf":
        parser.error("--alpha/--t0/--iters need --sa")
    est = harness.segmenter_from_model(model)
    if args.sa:
        est.inference = "sa"
    if args.alpha is not None:
        est.alpha = args.alpha
    if args.t0 is not None:
        est.t0 = args.t0
    if args.iters is not None:
        est.sa_iter = args.iters
    grid = read_feature_csv(args.features_csv)
    dm = design_matrix(grid, est.features, est.neighborhood)
    post = est.proba_design(dm)
    labels = est.predict_design(dm)
    args.out_labels.parent.mkdir(parents=True, exist_ok=True)
    save_labels_csv(LabelGrid(labels), args.out_labels)
    out_post = args.out_posterior or args.out_labels.with_name(
        args.out_labels.name.removesuffix(".csv") + ".posterior.csv")
    save_posterior_csv(post, out_post)


def cmd_validate(args, parser):
    params, grid = _segmenter_params(args, parser)
    images = _images(args.manifest)
    report = harness.loo_cv(images, args.model, params, grid, refit=False)
    _write(args.out, harness.dumps(report.to_dict(timings=args.timings)))
    if args.table:
        est = {"features": args.features, "neighborhood": args.neighborhood,
               "clique_order": args.clique_order}
        _write(args.table, harness.format_table([_table_entry(args.model, est, j=report.mean_j)]))


def cmd_bench(args, parser):
    images = _images(args.manifest)
    models = []
    for path in args.model_file:
        est = harness.segmenter_from_model(load_model(path))
        models.append((f"{est.kind}:{Path(path).name}", est))
        if args.with_sa and est.kind == "icm-mrf":
            sa = copy.copy(est)
            sa.inference = "sa"
            models.append((f"sa-icm-mrf:{Path(path).name}", sa))
    report = harness.benchmark(models, images, args.repetitions, args.warmup)
    _write(args.out, harness.dumps(report.to_dict(samples=args.samples)))
    table = harness.format_table([_bench_entry(m) for m in report.models])
    if args.table:
        _write(args.table, table)
    else:
        sys.stdout.write(table)


def _bench_entry(m):
    return {"kind": m.kind, "features": m.features, "neighborhood": m.neighborhood,
            "clique_order": m.clique_order, "j": m.j, "median_ms": m.median_ms}


def cmd_synth(args, parser):
    if not 0 < args.cloud_fraction < 1:
        parser.error("--cloud-fraction must be in (0, 1)")
    ds = harness.synth_dataset(args.seed, args.n_images, (args.height, args.width),
                               args.separation, args.sigma, args.smoothness, args.cloud_fraction)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for n, im in enumerate(ds):
        feats, labs = f"img_{n:03d}.features.csv", f"img_{n:03d}.labels.csv"
        save_feature_csv(im.grid, out / feats)
        save_labels_csv(im.labels, out / labs)
        records.append((feats, labs, im.timestamp))
    write_manifest(out / "manifest.json", args.height, args.width, ds.params["channels"], records)
    _write(out / "synth.json", harness.dumps(ds.params))


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "validate": cmd_validate,
            "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            COMMANDS[args.command](args, parser)
            status = 0
        except SystemExit as exc:
            status = exc.code
        except (DataError, OSError, ValueError) as exc:
            print(f"cloudseg {args.command}: error: {exc}", file=sys.stderr)
            status = 1
        finally:
            for w in caught:
                print(f"cloudseg: warning: {w.message}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
