"""End-to-end runs driven by a flat key/value config, with a hashed manifest."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gbt as gbt_mod
from . import harmonize, metrics, segnet, stitch, synth
from .core import (CLASS_NAMES, LasClass, PointCloud, PointLabels, ValidationError, build_index, label_points,
                   load_points, load_polygons, load_raster, save_points, save_raster)
from .features import FeatureTable, build_feature_table, colorize
from .raster import CHANNEL_GROUPS, FEATURE_CHANNELS, empty_grid, rasterize_features, rasterize_labels, \
    rasterize_point_predictions

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 7,
    "synth": True,
    "extent": 120.0,
    "density": 40.0,
    "separable": False,
    "world_dir": "",
    "encoder": True,
    "alpha": 1.0,
    "beta": 0.3,
    "gamma": 1.0,
    "encoder_epochs": 300,
    "encoder_cell_size": 20.0,
    "split": "cross-sensor",
    "model": "gbt",
    "gbt_samples": 8000,
    "gbt_trees": 400,
    "gbt_depth": 7,
    "valid_fraction": 0.2,
    "cell_size": 0.2,
    "tile": 96,
    "stride": 48,
    "k": 3,
    "c0": 16,
    "unet_epochs": 50,
    "patience": 10,
    "channels": "all",
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_config(path) -> dict:
    return merge_config(read_config(path))


def read_config(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    return raw


def merge_config(raw: dict) -> dict:
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ValidationError(f"config must be flat; tables found: {nested}")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    cfg = dict(DEFAULTS)
    for k, v in raw.items():
        want = type(DEFAULTS[k])
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, want) or (want is int and isinstance(v, bool)):
            raise ValidationError(f"config key {k!r} expects {want.__name__}, got {v!r}")
        cfg[k] = v
    if cfg["split"] not in ("cross-sensor", "same-sensor"):
        raise ValidationError("split must be cross-sensor or same-sensor")
    if cfg["model"] not in ("gbt", "unet", "both"):
        raise ValidationError("model must be gbt, unet or both")
    channel_list(cfg["channels"])
    return cfg


def channel_list(spec: str) -> list[str]:
    """``all`` or comma-separated channel names / group names (lidar, color, intensity)."""
    if spec == "all":
        return list(FEATURE_CHANNELS)
    out = []
    for part in (p.strip() for p in spec.split(",")):
        names = CHANNEL_GROUPS.get(part, [part])
        for n in names:
            if n not in FEATURE_CHANNELS:
                raise ValidationError(f"unknown channel {n!r}")
            if n not in out:
                out.append(n)
    return [c for c in FEATURE_CHANNELS if c in out]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# reusable experiment pieces


@dataclass
class Split:
    train: np.ndarray   # boolean point masks
    test: np.ndarray


def territory_split(cloud: PointCloud, kind: str) -> Split:
    """Masks over points. Training always uses the lowest sensor id; the test
    part is either another sensor (cross-sensor) or the eastern half of the
    training sensor's territory (same-sensor, training then uses the west)."""
    sensors = np.unique(cloud.sensor_id)
    first = cloud.sensor_id == sensors[0]
    if kind == "cross-sensor":
        if len(sensors) < 2:
            raise ValidationError("cross-sensor split needs at least two sensors")
        return Split(first, cloud.sensor_id == sensors[1])
    xm = float(np.median(cloud.x[first]))
    return Split(first & (cloud.x < xm), first & (cloud.x >= xm))


def balanced_sample(mask: np.ndarray, fortified: np.ndarray, ground: np.ndarray, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Sorted ids of up to ``n`` Ground points from ``mask``, half of them fortified."""
    ids = []
    for v in (True, False):
        pool = np.flatnonzero(mask & ground & (fortified == v))
        if len(pool) == 0:
            raise ValidationError("no points of one class in the sampled region")
        ids.append(rng.choice(pool, min(n // 2, len(pool)), replace=False))
    return np.sort(np.concatenate(ids))


def feature_table(cloud: PointCloud, ids: np.ndarray, fortified: np.ndarray, tags, index=None) -> FeatureTable:
    index = index or build_index(cloud, 1.0)
    src = "encoded" if cloud.encoded else "raw"
    ft = build_feature_table(cloud, index, src, point_ids=ids)
    ft.labels = fortified[ft.point_ids].astype(np.int64)
    ft.class_tags = [tags[i] for i in ft.point_ids]
    return ft


def point_raster_eval(cloud: PointCloud, ids: np.ndarray, probs: np.ndarray, fortified: np.ndarray,
                      codes: np.ndarray, cell_size: float) -> metrics.EvalReport:
    """Rasterise sampled predictions and their labels on a common grid and score them."""
    sub = cloud.subset(ids)
    grid = empty_grid(sub.bbox, cell_size)
    pred = rasterize_point_predictions(sub, np.arange(len(ids)), probs, grid)
    lab = PointLabels(fortified[ids], tuple(CLASS_NAMES[int(c)] for c in codes[ids]))
    labels = rasterize_labels(sub, lab, grid)
    return metrics.evaluate(pred, labels, labels)


def region_raster(cloud: PointCloud, mask: np.ndarray, cell_size: float, tile: int):
    """Feature raster over the bounding box of the masked points (at least one tile wide)."""
    sub = cloud.subset(np.flatnonzero(mask))
    (x0, y0), (x1, y1) = sub.bbox
    span = tile * cell_size
    x1, y1 = max(x1, x0 + span), max(y1, y0 + span)
    grid = empty_grid(((x0, y0), (x1 - 1e-9, y1 - 1e-9)), cell_size)
    return sub, grid


# --------------------------------------------------------------------------
# the one-shot run


class Run:
    def __init__(self, cfg: dict, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}

    def record(self, name: str, path: Path) -> Path:
        self.artifacts[name] = str(path.relative_to(self.out))
        return path

    def stage(self, name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(*args)
        except (ValidationError, FileNotFoundError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    def manifest(self) -> dict:
        files = {k: {"path": p, "sha256": sha256_file(self.out / p)} for k, p in sorted(self.artifacts.items())}
        return {"config": self.cfg, "artifacts": files}


def run_pipeline(cfg: dict, out_dir) -> tuple[metrics.EvalReport, dict]:
    """synth -> colorize -> (encoder) -> featurize/GBT and/or rasterize/U-Net -> evaluate."""
    cfg = merge_config(cfg)
    run = Run(cfg, out_dir)
    seed = cfg["seed"]

    def load_world():
        if cfg["synth"]:
            spec = synth.WorldSpec(seed=seed, extent=cfg["extent"], density=cfg["density"],
                                   confusers=not cfg["separable"])
            world = synth.generate_world(spec)
            paths = world.save(run.out / "world")
            for k, p in paths.items():
                run.record(f"world.{k}", p)
            return world.cloud, world.ortho, world.labels, world.roads, world.grain
        d = Path(cfg["world_dir"])
        return (load_points(d / "points.bin"), load_raster(d / "ortho.tsr"), load_polygons(d / "labels.geojson"),
                load_polygons(d / "roads.geojson"), load_polygons(d / "grain.geojson"))

    cloud, ortho, labels, roads, grain = run.stage("synth", load_world)
    cloud, _ = run.stage("colorize", colorize, cloud, ortho)
    save_points(cloud, run.record("points_color", run.out / "points_color.bin"))

    if cfg["encoder"]:
        def encode():
            hcfg = harmonize.HarmonizeConfig(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
                                             epochs=cfg["encoder_epochs"], cell_size=cfg["encoder_cell_size"],
                                             seed=seed)
            data = harmonize.prepare_encoder_data(cloud, roads, grain, hcfg)
            model = harmonize.train_encoder(data, hcfg)
            harmonize.save_encoder(model, run.record("encoder", run.out / "encoder.tsnn"))
            return harmonize.encode_cloud(model, cloud)
        cloud = run.stage("train-encoder", encode)
        save_points(cloud, run.record("points_encoded", run.out / "points_encoded.bin"))

    pl = label_points(cloud, labels)
    fortified = pl.fortified
    codes = pl.class_code
    split = territory_split(cloud, cfg["split"])
    reports = {}

    if cfg["model"] in ("gbt", "both"):
        def gbt_stage():
            rng = np.random.default_rng(seed)
            ground = cloud.las_class == LasClass.GROUND
            tr = balanced_sample(split.train, fortified, ground, cfg["gbt_samples"], rng)
            te = balanced_sample(split.test, fortified, ground, cfg["gbt_samples"], rng)
            index = build_index(cloud, 1.0)
            ft_tr = feature_table(cloud, tr, fortified, pl.class_tag, index)
            ft_te = feature_table(cloud, te, fortified, pl.class_tag, index)
            ft_tr.save(run.record("features_train", run.out / "features_train.csv"))
            ft_te.save(run.record("features_test", run.out / "features_test.csv"))
            va = rng.random(len(ft_tr)) < cfg["valid_fraction"]
            gcfg = gbt_mod.GbtConfig(num_trees=cfg["gbt_trees"], max_depth=cfg["gbt_depth"], seed=seed)
            model = gbt_mod.fit_gbt(ft_tr.X[~va], ft_tr.labels[~va], ft_tr.X[va], ft_tr.labels[va], gcfg)
            gbt_mod.save_gbt(model, run.record("gbt", run.out / "gbt.tsgb"))
            probs = model.predict_proba(ft_te.X)
            return point_raster_eval(cloud, ft_te.point_ids, probs, fortified, codes, cfg["cell_size"])
        reports["gbt"] = run.stage("train-gbt", gbt_stage)

    if cfg["model"] in ("unet", "both"):
        reports["unet"] = run.stage("train-unet", unet_experiment, cloud, pl, split, cfg, run)

    main = reports.get("unet", reports.get("gbt"))
    out = main.to_dict()
    if len(reports) > 1:
        for name, rep in reports.items():
            for k, v in rep.to_dict().items():
                out[f"{name}.{k}"] = v
    report_path = run.record("report", run.out / "report.json")
    report_path.write_text(json.dumps(out, indent=2, sort_keys=True))
    manifest = run.manifest()
    (run.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return main, manifest


def unet_experiment(cloud: PointCloud, pl, split: Split, cfg: dict, run: Run | None = None,
                    channels=None) -> metrics.EvalReport:
    """Tiles from the training territory (southern part validates), stitched
    prediction over the test territory."""
    channels = channels or channel_list(cfg["channels"])
    tile, cs = cfg["tile"], cfg["cell_size"]
    tr_cloud, tr_grid = region_raster(cloud, split.train, cs, tile)
    tr_ids = np.flatnonzero(split.train)
    tr_lab = PointLabels(pl.fortified[tr_ids], tuple(pl.class_tag[i] for i in tr_ids))
    F = rasterize_features(tr_cloud, tr_grid)
    L = rasterize_labels(tr_cloud, tr_lab, tr_grid)
    h = F.height
    n_valid_rows = max(tile, int(round(cfg["valid_fraction"] * h / tile)) * tile)
    if h - n_valid_rows < tile:
        raise ValidationError("training territory too small for separate training and validation tiles")
    cut = h - n_valid_rows
    tr = segnet.crop_tiles(F.window(0, 0, cut, F.width), L.window(0, 0, cut, L.width), tile, cfg["stride"],
                           channels)
    va = segnet.crop_tiles(F.window(cut, 0, h - cut, F.width), L.window(cut, 0, h - cut, L.width), tile, tile,
                           channels)
    ucfg = segnet.UNetConfig(k=cfg["k"], c0=cfg["c0"], epochs=cfg["unet_epochs"], patience=cfg["patience"],
                             seed=cfg["seed"])
    model = segnet.train_unet(tr, va, ucfg)
    if run is not None:
        segnet.save_unet(model, run.record("unet", run.out / "unet.tsnn"), {"channels": channels})
    te_cloud, te_grid = region_raster(cloud, split.test, cs, tile)
    te_ids = np.flatnonzero(split.test)
    te_lab = PointLabels(pl.fortified[te_ids], tuple(pl.class_tag[i] for i in te_ids))
    Ft = rasterize_features(te_cloud, te_grid)
    Lt = rasterize_labels(te_cloud, te_lab, te_grid)
    prob = stitch.stitch_predictions(model, Ft, tile, cfg["stride"], channels)
    if run is not None:
        save_raster(prob, run.record("unet_prob", run.out / "unet_prob.tsr"))
        save_raster(Lt, run.record("labels_test", run.out / "labels_test.tsr"))
    return metrics.evaluate(prob, Lt, Lt)
