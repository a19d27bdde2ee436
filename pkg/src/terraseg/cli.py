"""``terraseg`` command line: one subcommand per pipeline stage plus ``run``.

Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
"""

from __future__ import annotations

import os

_threads = os.environ.get("TERRASEG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import gbt, harmonize, metrics, pipeline, segnet, stitch, synth  # noqa: E402
from .core import (ValidationError, build_index, label_points, load_points, load_polygons,  # noqa: E402
                   load_raster, save_points, save_raster)
from .features import FeatureTable, build_feature_table, colorize  # noqa: E402
from .raster import empty_grid, rasterize_features, rasterize_labels, rasterize_point_predictions  # noqa: E402

log = logging.getLogger("terraseg")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(a):
    spec = synth.WorldSpec(seed=a.seed, extent=a.extent, density=a.density, confusers=not a.separable)
    world = synth.generate_world(spec)
    paths = world.save(a.out_dir)
    print(json.dumps({k: str(p) for k, p in paths.items()}, indent=2))


def cmd_colorize(a):
    cloud, outside = colorize(load_points(a.points), load_raster(a.ortho))
    save_points(cloud, a.out)
    if outside:
        print(f"{outside} points outside the ortho extent", file=sys.stderr)


def cmd_train_encoder(a):
    cfg = harmonize.HarmonizeConfig(alpha=a.alpha, beta=a.beta, gamma=a.gamma, epochs=a.epochs,
                                    cell_size=a.cell_size, min_points=a.min_points, seed=a.seed)
    data = harmonize.prepare_encoder_data(load_points(a.points), load_polygons(a.roads), load_polygons(a.grain), cfg)
    model = harmonize.train_encoder(data, cfg)
    harmonize.save_encoder(model, a.out)


def cmd_encode(a):
    save_points(harmonize.encode_cloud(harmonize.load_encoder(a.model), load_points(getattr(a, "in"))), a.out)


def cmd_featurize(a):
    cloud = load_points(a.points)
    ids = None
    labels = None
    if a.labels:
        labels = label_points(cloud, load_polygons(a.labels))
    if a.sample:
        rng = np.random.default_rng(a.seed)
        ground = cloud.las_class == 0
        if labels is not None:
            ids = pipeline.balanced_sample(np.ones(len(cloud), bool), labels.fortified, ground, a.sample, rng)
        else:
            pool = np.flatnonzero(ground)
            ids = np.sort(rng.choice(pool, min(a.sample, len(pool)), replace=False))
    src = "encoded" if cloud.encoded else "raw"
    ft = build_feature_table(cloud, build_index(cloud, 1.0), src, point_ids=ids, radius=a.radius)
    if labels is not None:
        ft.labels = labels.fortified[ft.point_ids].astype(np.int64)
        ft.class_tags = [labels.class_tag[i] for i in ft.point_ids]
    ft.save(a.out)


def cmd_train_gbt(a):
    ft = FeatureTable.load(a.features)
    if ft.labels is None:
        raise ValidationError(f"{a.features} carries no labels")
    if a.valid:
        fv = FeatureTable.load(a.valid)
        if fv.labels is None:
            raise ValidationError(f"{a.valid} carries no labels")
        X, y, Xv, yv = ft.X, ft.labels, fv.X, fv.labels
    else:
        va = np.random.default_rng(a.seed).random(len(ft)) < a.valid_fraction
        X, y, Xv, yv = ft.X[~va], ft.labels[~va], ft.X[va], ft.labels[va]
    cfg = gbt.GbtConfig(num_trees=a.trees, learning_rate=a.learning_rate, max_depth=a.depth,
                        min_leaf=a.min_leaf, seed=a.seed)
    model = gbt.fit_gbt(X, y, Xv, yv, cfg)
    gbt.save_gbt(model, a.out)


def cmd_predict_gbt(a):
    model = gbt.load_gbt(a.model)
    ft = FeatureTable.load(a.features)
    probs = model.predict_proba(ft.X)
    with open(a.out, "w") as fh:
        fh.write("point_id,prob\n")
        for pid, p in zip(ft.point_ids, probs):
            fh.write(f"{int(pid)},{float(p)!r}\n")


def _read_predictions(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 0].astype(np.int64), rows[:, 1]


def cmd_rasterize(a):
    cloud = load_points(a.points)
    grid = empty_grid(cloud.bbox, a.cell_size)
    if a.features_out:
        save_raster(rasterize_features(cloud, grid), a.features_out)
    if a.labels:
        if not a.labels_out:
            raise UsageError("--labels needs --labels-out")
        save_raster(rasterize_labels(cloud, label_points(cloud, load_polygons(a.labels)), grid), a.labels_out)
    if a.predictions:
        if not a.prob_out:
            raise UsageError("--predictions needs --prob-out")
        ids, probs = _read_predictions(a.predictions)
        save_raster(rasterize_point_predictions(cloud, ids, probs, grid), a.prob_out)
    if not (a.features_out or a.labels or a.predictions):
        raise UsageError("nothing to rasterize: give --features-out, --labels or --predictions")


def cmd_train_unet(a):
    F, L = load_raster(a.features), load_raster(a.labels)
    channels = pipeline.channel_list(a.channels)
    h = F.height
    n_valid = max(a.tile, int(round(a.valid_fraction * h / a.tile)) * a.tile)
    cut = h - n_valid
    if cut < a.tile:
        raise ValidationError("raster too small for separate training and validation tiles")
    tr = segnet.crop_tiles(F.window(0, 0, cut, F.width), L.window(0, 0, cut, L.width), a.tile, a.stride, channels)
    va = segnet.crop_tiles(F.window(cut, 0, h - cut, F.width), L.window(cut, 0, h - cut, L.width), a.tile,
                           a.tile, channels)
    cfg = segnet.UNetConfig(k=a.k, c0=a.c0, epochs=a.epochs, patience=a.patience, batch_size=a.batch_size,
                            lr=a.lr, metric=a.metric, seed=a.seed)
    model = segnet.train_unet(tr, va, cfg)
    segnet.save_unet(model, a.out, {"channels": channels})


def cmd_predict(a):
    model = segnet.load_unet(a.model)
    prob = stitch.stitch_predictions(model, load_raster(a.features), a.size, a.stride, model.channels)
    save_raster(prob, a.out)


def cmd_evaluate(a):
    pred, labels = load_raster(a.pred), load_raster(a.labels)
    classes = load_raster(a.classes) if a.classes else None
    report = metrics.evaluate(pred, labels, classes)
    text = report.to_json()
    if a.out:
        Path(a.out).write_text(text)
    else:
        print(text)


def _parse_overrides(pairs) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            out[key.strip()] = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            out[key.strip()] = value  # bare word, taken as a string
    return out


def cmd_run(a):
    raw = pipeline.read_config(a.config) if a.config else {}
    raw.update(_parse_overrides(a.set))
    if a.seed is not None:
        raw["seed"] = a.seed
    cfg = pipeline.merge_config(raw)
    report, manifest = pipeline.run_pipeline(cfg, a.out_dir)
    print(json.dumps({"f1": report.f1, "auc": report.auc, "artifacts": len(manifest["artifacts"])}))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="terraseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic two-sensor world")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--extent", type=float, default=200.0)
    s.add_argument("--density", type=float, default=40.0)
    s.add_argument("--separable", action="store_true", help="drop the deliberately confusable surfaces")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("colorize", help="attach orthophoto colours to points")
    s.add_argument("--points", required=True)
    s.add_argument("--ortho", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_colorize)

    s = sub.add_parser("train-encoder", help="train the intensity harmoniser")
    s.add_argument("--points", required=True)
    s.add_argument("--grain", required=True)
    s.add_argument("--roads", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=0.3)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--cell-size", type=float, default=1000.0)
    s.add_argument("--min-points", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_encoder)

    s = sub.add_parser("encode", help="replace raw intensity by the harmonised value")
    s.add_argument("--model", required=True)
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("featurize", help="per-point feature table for Ground points")
    s.add_argument("--points", required=True)
    s.add_argument("--labels", help="label polygons; adds label and class_tag columns")
    s.add_argument("--sample", type=int, default=0, help="balanced sample size (0 = every Ground point)")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("train-gbt", help="train the boosted-tree classifier")
    s.add_argument("--features", required=True)
    s.add_argument("--valid", help="labelled validation features (default: hold out --valid-fraction)")
    s.add_argument("--trees", type=int, default=400)
    s.add_argument("--learning-rate", type=float, default=0.1)
    s.add_argument("--depth", type=int, default=7)
    s.add_argument("--min-leaf", type=int, default=20)
    s.add_argument("--valid-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_gbt)

    s = sub.add_parser("predict-gbt", help="per-point fortified probabilities")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict_gbt)

    s = sub.add_parser("rasterize", help="feature, label or prediction rasters")
    s.add_argument("--points", required=True)
    s.add_argument("--cell-size", type=float, default=0.2)
    s.add_argument("--features-out")
    s.add_argument("--labels")
    s.add_argument("--labels-out")
    s.add_argument("--predictions", help="CSV of point_id,prob")
    s.add_argument("--prob-out")
    s.set_defaults(fn=cmd_rasterize)

    s = sub.add_parser("train-unet", help="train the U-Net on raster tiles")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--c0", type=int, default=16)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--metric", choices=["f1", "accuracy"], default="f1")
    s.add_argument("--channels", default="all")
    s.add_argument("--tile", type=int, default=96)
    s.add_argument("--stride", type=int, default=48)
    s.add_argument("--valid-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_unet)

    s = sub.add_parser("predict", help="stitched U-Net probabilities over a region")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--stride", type=int, default=48)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("evaluate", help="scores of a probability raster against labels")
    s.add_argument("--pred", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--classes")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("run", help="end-to-end run from a flat TOML config")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--out-dir", default="run")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"terraseg: error: {exc}", file=sys.stderr)
        return 1
    except pipeline.StageError as exc:
        print(f"terraseg: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, ValidationError) else 2
    except Exception as exc:  # noqa: BLE001 - top-level handler maps failures to exit status 2
        print(f"terraseg: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
