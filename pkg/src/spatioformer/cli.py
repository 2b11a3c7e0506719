"""Command line entry point: ``spatioformer <subcommand> ...``.

Every subcommand writes only inside its ``--out`` directory and leaves a
``manifest.json`` there recording the config hash, seed, versions and the
digests of its inputs. Exit codes: 0 ok, 2 usage, 3 config error, 4 data
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SynthConfig,
    TileGrid,
    ChipBatch,
    check_no_leakage,
    load_chips,
    read_samples,
    read_split,
    split_by_tiles,
    synth_generate,
    synth_scene,
    write_chip,
    write_samples,
    write_split,
)
from .errors import ConfigError, DataError, SpatioformerError
from .geoenc import GeoEncoderConfig, encode_many, render_layer
from .mapper import aggregate, predict_map, uncertainty_map
from .model import ModelParams, init
from .numerics import RngStream
from .raster import RasterStack, read_grid, read_raster, write_raster
from .train import (
    Dataset,
    TrainConfig,
    TrainingAborted,
    ablate_chip_size,
    evaluate,
    format_table,
    train,
    write_log,
    write_metrics,
)
from .uncert import UncertaintyConfig, mc_uncertainty_many

SEED_ENV = "SPATIOFORMER_SEED"
log = logging.getLogger("spatioformer")


# --------------------------------------------------------------------------
# helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def _write_manifest(out: Path, args, config: dict, inputs) -> None:
    canon = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": args.command,
        "config": config,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": args.seed,
        "versions": {"spatioformer": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and Path(p).is_file()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(samples_path) -> Dataset:
    samples = read_samples(samples_path)
    if not samples:
        raise DataError(f"{samples_path}: no samples")
    chips = load_chips(samples, Path(samples_path).parent)
    return Dataset(samples, ChipBatch.from_chips(chips))


def _split_sets(data: Dataset, split_path, grid: TileGrid):
    mapping = read_split(split_path)
    parts = {"train": [], "val": [], "test": []}
    for i, s in enumerate(data.samples):
        name = mapping.get(s.id)
        if name not in parts:
            raise DataError(f"{split_path}: sample {s.id!r} has no valid split assignment")
        parts[name].append(i)
    sets = {k: data.subset(v) for k, v in parts.items()}
    check_no_leakage(grid, **{k: v.samples for k, v in sets.items()})
    return sets


def _grid(args) -> TileGrid:
    return TileGrid(args.tile_deg[0], args.tile_deg[1])


def _train_config(args) -> TrainConfig:
    raw = _load_json(args.config)
    for key in ("kind", "chip_size", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    raw["seed"] = args.seed
    return TrainConfig.from_dict(raw)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = _out_dir(args)
    scfg = SynthConfig.from_dict(_load_json(args.config))
    samples, chips = synth_generate(scfg, args.n, RngStream(args.seed, 10))
    (out / "chips").mkdir(exist_ok=True)
    for s, c in zip(samples, chips):
        write_chip(c, out / s.chip_path)
    write_samples(samples, out / "samples.csv")
    info = {"config": scfg.to_dict(), "n": args.n}
    if scfg.signal == "center":
        info["geo_blind_bayes_risk"] = scfg.geo_blind_bayes_risk()
    (out / "synth.json").write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    if args.scene_size:
        scene = synth_scene(scfg, args.scene_size, RngStream(args.seed, 11))
        write_raster(out / "scene.rast", list(scene))
    _write_manifest(out, args, {"synth": scfg.to_dict(), "n": args.n, "scene_size": args.scene_size}, [args.config])
    print(f"wrote {len(samples)} samples to {out / 'samples.csv'}")


def cmd_split(args) -> None:
    out = _out_dir(args)
    samples = read_samples(args.samples)
    assign = split_by_tiles(samples, _grid(args), tuple(args.fractions), args.seed)
    write_split(assign, samples, out / "split.csv")
    counts = assign.counts()
    _write_manifest(out, args, {"fractions": args.fractions, "tile_deg": args.tile_deg}, [args.samples])
    print("tiles: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args) -> None:
    from .plotting import save_training_curve_png

    out = _out_dir(args)
    tcfg = _train_config(args)
    mcfg = tcfg.model_config()
    sets = _split_sets(_load_dataset(args.samples), args.split, _grid(args))
    params = init(mcfg, RngStream(tcfg.seed, 0))
    try:
        res = train(params, mcfg, tcfg, sets["train"], sets["val"], _grid(args))
    except TrainingAborted as exc:
        exc.result.params.save(out / "model.spf", mcfg)
        write_log(exc.result.log, out / "epochs.csv")
        raise
    res.params.save(out / "model.spf", mcfg)
    (out / "model.json").write_text(mcfg.to_json(), encoding="utf-8")
    write_log(res.log, out / "epochs.csv")
    save_training_curve_png(res.log, out / "training.png", title=f"{tcfg.kind} {tcfg.chip_size}x{tcfg.chip_size}")
    _write_manifest(out, args, tcfg.to_dict(), [args.config, args.samples, args.split])
    print(f"best epoch {res.best_epoch}, validation MSE {res.best_val:.4f}")


def _load_model(path):
    params, cfg = ModelParams.load(path)
    if cfg is None:
        raise DataError(f"{path}: checkpoint carries no model config")
    return params, cfg


def cmd_eval(args) -> None:
    out = _out_dir(args)
    params, mcfg = _load_model(args.checkpoint)
    sets = _split_sets(_load_dataset(args.samples), args.split, _grid(args))
    m = evaluate(params, mcfg, sets[args.subset])
    rows = [(mcfg.kind, m)]
    write_metrics(rows, out / "metrics.csv")
    table = format_table(rows)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    _write_manifest(out, args, {"subset": args.subset}, [args.checkpoint, args.samples, args.split])
    print(table)


def cmd_ablate(args) -> None:
    from .plotting import save_ablation_png

    out = _out_dir(args)
    tcfg = _train_config(args)
    sets = _split_sets(_load_dataset(args.samples), args.split, _grid(args))
    rows = ablate_chip_size(tcfg, sets["train"], sets["val"], sets["test"], args.sizes, _grid(args))
    labelled = [(f"{s}x{s}", m) for s, m in rows]
    write_metrics(labelled, out / "ablation.csv", key="input_size")
    (out / "ablation.txt").write_text(format_table(labelled, key="input_size") + "\n", encoding="utf-8")
    save_ablation_png(rows, out / "ablation.png")
    _write_manifest(out, args, {**tcfg.to_dict(), "sizes": args.sizes}, [args.config, args.samples, args.split])
    print(format_table(labelled, key="input_size"))


def cmd_predict_map(args) -> None:
    from .plotting import save_raster_png

    out = _out_dir(args)
    params, mcfg = _load_model(args.checkpoint)
    scene = read_raster(args.scene)
    chip = args.chip_size or mcfg.chip_size
    grid = predict_map(params, mcfg, scene, chip, year=args.year, tile_rows=args.tile_rows)
    stem = f"richness_{args.year}" if args.year is not None else "richness"
    write_raster(out / f"{stem}.rast", grid)
    save_raster_png(grid, out / f"{stem}.png")
    config = {"chip_size": chip, "year": args.year}
    if args.uncertainty:
        ucfg = UncertaintyConfig(args.mc_n, args.mc_rate, args.seed)
        ugrid = uncertainty_map(params, mcfg, scene, ucfg, chip, year=args.year, tile_rows=args.tile_rows)
        ustem = stem.replace("richness", "uncertainty")
        write_raster(out / f"{ustem}.rast", ugrid)
        save_raster_png(ugrid, out / f"{ustem}.png")
        config.update(mc_n=args.mc_n, mc_rate=args.mc_rate)
    _write_manifest(out, args, config, [args.checkpoint, args.scene])
    print(f"wrote {out / (stem + '.rast')}")


def cmd_aggregate(args) -> None:
    from .plotting import save_raster_png

    out = _out_dir(args)
    stack = RasterStack([read_grid(p) for p in args.inputs])
    grid = aggregate(stack, args.stat)
    write_raster(out / f"{args.stat}.rast", grid)
    save_raster_png(grid, out / f"{args.stat}.png")
    _write_manifest(out, args, {"stat": args.stat, "inputs": sorted(map(str, args.inputs))}, args.inputs)
    print(f"wrote {out / (args.stat + '.rast')}")


def cmd_encode_geo(args) -> None:
    from .plotting import save_geo_layers_png, save_raster_png

    out = _out_dir(args)
    gcfg = GeoEncoderConfig(args.d, args.a, args.c)
    config = {"d": args.d, "a": args.a, "c": args.c}
    if args.render is not None or args.all_layers:
        if args.bbox is None or args.res is None:
            raise ConfigError("rendering needs --bbox and --res")
        layers = range(1, gcfg.d + 1) if args.all_layers else [args.render]
        grids = [render_layer(gcfg, j, args.bbox, args.res) for j in layers]
        for g in grids:
            write_raster(out / f"{g.band}.rast", g)
            if args.png:
                save_raster_png(g, out / f"{g.band}.png", vmin=-2, vmax=2)
        if args.all_layers and args.png:
            save_geo_layers_png(grids, out / "layers.png")
        config.update(bbox=args.bbox, res=args.res, layers=list(layers))
    else:
        if args.csv:
            with open(args.csv, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            try:
                lon = np.array([float(r["lon"]) for r in rows])
                lat = np.array([float(r["lat"]) for r in rows])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{args.csv}: needs numeric lon and lat columns") from exc
        elif args.lon is not None and args.lat is not None:
            lon, lat = np.array([args.lon]), np.array([args.lat])
        else:
            raise ConfigError("give --lon/--lat, --csv, or --render")
        tok = encode_many(gcfg, lon, lat)
        with open(out / "tokens.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["lon", "lat", *(f"g{j}" for j in range(1, gcfg.d + 1))])
            for x, y, t in zip(lon, lat, tok):
                w.writerow([repr(float(x)), repr(float(y)), *(repr(float(v)) for v in t)])
    _write_manifest(out, args, config, [args.csv])
    print(f"wrote encoder output to {out}")


def cmd_uncertainty(args) -> None:
    out = _out_dir(args)
    params, mcfg = _load_model(args.checkpoint)
    data = _load_dataset(args.samples)
    if args.split:
        data = _split_sets(data, args.split, _grid(args))[args.subset]
    ucfg = UncertaintyConfig(args.mc_n, args.mc_rate, args.seed)
    results = mc_uncertainty_many(params, mcfg, data.chips.crop(mcfg.chip_size), ucfg)
    with open(out / "uncertainty.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y_det", "y_mc", "epsilon"])
        for s, r in zip(data.samples, results):
            w.writerow([s.id, repr(r.deterministic), repr(r.mean), "nan" if r.undefined else repr(r.epsilon)])
    flagged = sum(r.undefined for r in results)
    if flagged:
        log.warning("%d sample(s) have a zero MC mean; epsilon reported as nan", flagged)
    _write_manifest(out, args, {"mc_n": args.mc_n, "mc_rate": args.mc_rate}, [args.checkpoint, args.samples, args.split])
    print(f"wrote {len(results)} rows to {out / 'uncertainty.csv'}")


# --------------------------------------------------------------------------
# parser


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatioformer", description="Geo-encoded transformer for species richness regression.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
        if out:
            sp.add_argument("--out", required=True, help="output directory; nothing is written outside it")

    def tiles(sp):
        sp.add_argument("--tile-deg", nargs=2, type=float, default=(0.9, 0.9), metavar=("LON", "LAT"),
                        help="tile width and height in degrees (default 0.9 0.9)")

    sp = sub.add_parser("synth", help="generate a synthetic location-dependent dataset")
    common(sp)
    sp.add_argument("--config", help="JSON file of synthetic generator settings")
    sp.add_argument("--n", type=int, default=4000, help="number of samples (default 4000)")
    sp.add_argument("--scene-size", type=int, default=0, help="also write an N x N six-band scene.rast")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("split", help="block-based train/val/test split over tiles")
    common(sp)
    tiles(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--fractions", nargs=3, type=float, default=(0.8, 0.1, 0.1))
    sp.set_defaults(func=cmd_split)

    for name, func, helptext in (("train", cmd_train, "train a model"), ("ablate", cmd_ablate, "input-size ablation")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        tiles(sp)
        sp.add_argument("--config", help="JSON training config")
        sp.add_argument("--samples", required=True)
        sp.add_argument("--split", required=True)
        sp.add_argument("--kind", choices=("spatioformer", "vit", "cnn"))
        sp.add_argument("--epochs", type=int)
        if name == "train":
            sp.add_argument("--chip-size", dest="chip_size", type=int)
        else:
            sp.add_argument("--sizes", nargs="+", type=int, default=[1, 3, 5, 7, 9])
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    tiles(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict-map", help="sliding-window richness (and uncertainty) map of a scene")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True, help="six-band raster file")
    sp.add_argument("--year", type=int)
    sp.add_argument("--chip-size", type=int)
    sp.add_argument("--uncertainty", action="store_true", help="also write the MC dropout uncertainty map")
    sp.add_argument("--mc-n", type=int, default=100)
    sp.add_argument("--mc-rate", type=float, default=0.5)
    sp.add_argument("--tile-rows", type=int, default=16, help="scene rows per inference tile")
    sp.set_defaults(func=cmd_predict_map)

    sp = sub.add_parser("aggregate", help="cross-year mean or std of map rasters")
    common(sp)
    sp.add_argument("--stat", choices=("mean", "std"), required=True)
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("encode-geo", help="geolocation tokens or rendered encoding layers")
    common(sp)
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--a", type=float, default=1.0)
    sp.add_argument("--c", type=float, default=100.0)
    sp.add_argument("--lon", type=float)
    sp.add_argument("--lat", type=float)
    sp.add_argument("--csv", help="CSV with lon and lat columns")
    sp.add_argument("--render", type=int, metavar="J", help="render encoding layer J (1-based)")
    sp.add_argument("--all-layers", action="store_true", help="render every layer")
    sp.add_argument("--bbox", nargs=4, type=float, metavar=("W", "S", "E", "N"))
    sp.add_argument("--res", type=float, help="cell size in degrees")
    sp.add_argument("--png", action="store_true", help="also write grayscale PNGs")
    sp.set_defaults(func=cmd_encode_geo)

    sp = sub.add_parser("uncertainty", help="per-sample MC dropout uncertainty")
    common(sp)
    tiles(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--split")
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.add_argument("--mc-n", type=int, default=100)
    sp.add_argument("--mc-rate", type=float, default=0.5)
    sp.set_defaults(func=cmd_uncertainty)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        args.func(args)
    except SpatioformerError as exc:
        kind = {3: "config error", 4: "data error", 5: "numeric failure"}.get(exc.exit_code, "error")
        print(f"spatioformer {args.command}: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"spatioformer {args.command}: data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
