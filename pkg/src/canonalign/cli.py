"""Command-line surface: synth, extract, train, eval-pck, eval-cypck, warp, viz.

Every run writes its exact config next to its outputs; declared outputs are
never silently overwritten (pass --force). Exit codes: 0 success, 2 input or
usage error, 3 numerical divergence. The ASIC_CACHE_DIR environment variable
relocates the pseudo-correspondence cache.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluate, synthetic
from .checkpoint import CheckpointError
from .collection import CollectionError, load_collection, load_feature_maps
from .config import ConfigError, RunConfig
from .matching import build_all_pairs, default_cache_path
from .model import coordinate_maps
from .train import DivergenceError, load_model_from_checkpoint, resume, train_collection

logger = logging.getLogger("canonalign")


class CliError(RuntimeError):
    pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, CollectionError, CheckpointError,
            evaluate.EvaluationError, FileExistsError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonalign",
                                     description="Joint image-collection alignment "
                                                 "through a learned canonical grid")
    sub = parser.add_subparsers(required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic collection with ground truth")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tps-strength", type=float, default=0.1)
    p.add_argument("--feature-noise", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=0.15)
    p.add_argument("--with-parts", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="compute + cache pseudo-correspondences")
    p.add_argument("collection_dir")
    p.add_argument("--cache", default=None, help="cache file (default: collection dir "
                                                 "or $ASIC_CACHE_DIR)")
    _config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="optimize the alignment model on a collection")
    p.add_argument("collection_dir")
    p.add_argument("--out", default=None, help="run directory (default: timestamped under runs/)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-pck", help="pairwise keypoint-transfer PCK")
    p.add_argument("run_dir")
    p.add_argument("--collection", default=None)
    p.add_argument("--alphas", default=None, help="comma-separated thresholds")
    p.add_argument("--oracle", action="store_true",
                   help="score the synthetic ground-truth transfer instead of the model")
    p.add_argument("--restrict-foreground", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval_pck)

    p = sub.add_parser("eval-cypck", help="k-cycle keypoint consistency curve")
    p.add_argument("run_dir")
    p.add_argument("--collection", default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--num-sequences", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alphas", default=None)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval_cypck)

    p = sub.add_parser("warp", help="dense-warp one image onto another")
    p.add_argument("run_dir")
    p.add_argument("src_index", type=int)
    p.add_argument("dst_index", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("viz", help="canonical-space colormap renderings")
    p.add_argument("run_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_viz)
    return parser


def _config_flags(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config entry (flags win over the file)")


def _build_config(args, collection_dir: Path) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    explicit_size = any(s.startswith("io.image_size=") for s in args.set)
    if args.config:
        explicit_size = explicit_size or "image_size" in json.loads(
            Path(args.config).read_text()).get("io", {})
    meta_path = collection_dir / "meta.json"
    if not explicit_size and meta_path.is_file():
        size = json.loads(meta_path.read_text()).get("size")
        if size:
            cfg.io.image_size = int(size)
    for entry in args.set:
        if "=" not in entry:
            raise ConfigError(f"malformed --set {entry!r}, expected SECTION.KEY=VALUE")
        key, value = entry.split("=", 1)
        cfg.apply_override(key, value)
    cfg.collection_dir = str(collection_dir)
    cfg.validate()
    return cfg


def _prepared_collection(cfg: RunConfig, collection_dir: Path):
    collection = load_collection(collection_dir, cfg.io)
    features = load_feature_maps(collection_dir, collection)
    return collection, features


def cmd_synth(args) -> int:
    coll = synthetic.generate(n=args.n, seed=args.seed, size=args.size,
                              tps_strength=args.tps_strength,
                              photometric_jitter=args.jitter,
                              feature_noise=args.feature_noise,
                              with_parts=args.with_parts)
    out = coll.save(args.out_dir, force=args.force)
    print(f"wrote {len(coll)} images to {out}")
    return 0


def cmd_extract(args) -> int:
    collection_dir = Path(args.collection_dir)
    cfg = _build_config(args, collection_dir)
    collection, features = _prepared_collection(cfg, collection_dir)
    cache = Path(args.cache) if args.cache else default_cache_path(collection_dir)
    pairs = build_all_pairs(features, cache_path=cache)
    total = sum(m.k for m in pairs.values())
    print(f"{len(pairs)} pairs, {total} matches, cache at {cache}")
    return 0


def cmd_train(args) -> int:
    collection_dir = Path(args.collection_dir)
    cfg = _build_config(args, collection_dir)
    run_dir = Path(args.out) if args.out else Path("runs") / (
        f"{collection_dir.name}-{time.strftime('%Y%m%d-%H%M%S')}")
    if run_dir.exists() and any(run_dir.iterdir()) and not args.force and not args.resume:
        raise CliError(f"run directory {run_dir} is not empty (use --force)")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")

    collection, features = _prepared_collection(cfg, collection_dir)
    matches = build_all_pairs(features, cache_path=default_cache_path(collection_dir))
    if args.resume:
        overrides = {}
        for entry in args.set:
            key, value = entry.split("=", 1)
            scratch = RunConfig()
            scratch.apply_override(key, value)
            section, name = key.split(".", 1)
            overrides[f"{section}.{name}"] = getattr(getattr(scratch, section), name)
        overrides = {k: v for k, v in overrides.items()
                     if k.startswith(("train.", "objective."))}
        result = resume(args.resume, collection, matches=matches,
                        config_overrides=overrides, out_dir=run_dir)
    else:
        result = train_collection(collection, matches=matches, config=cfg.train,
                                  objective=cfg.objective, out_dir=run_dir)
    _write_viz(run_dir, result.net, result.grid, collection, force=True)
    print(f"trained {result.iteration} iterations; checkpoint {result.checkpoint_path}")
    return 0


def _load_run(run_dir: Path, collection_override=None):
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise CliError(f"no config.json in {run_dir}; is this a run directory?")
    cfg = RunConfig.load(cfg_path)
    collection_dir = Path(collection_override or cfg.collection_dir or "")
    if not collection_dir.is_dir():
        raise CliError(f"collection directory {collection_dir} not found; pass --collection")
    collection = load_collection(collection_dir, cfg.io)
    return cfg, collection_dir, collection


def _latest_checkpoint(run_dir: Path) -> Path:
    candidates = sorted((run_dir / "checkpoints").glob("ckpt_*.bin"))
    if not candidates:
        raise CliError(f"no checkpoints under {run_dir}")
    return candidates[-1]


def _model_maps(run_dir: Path, collection):
    net, grid, _ = load_model_from_checkpoint(_latest_checkpoint(run_dir))
    return coordinate_maps(net, collection.images), grid


def _oracle_transfer(collection_dir: Path):
    if not (collection_dir / "meta.json").is_file():
        raise CliError("--oracle needs a synthetic collection (meta.json missing)")
    gt = synthetic.load_ground_truth(collection_dir)
    return synthetic.make_oracle_transfer(gt["transforms"], gt["meta"]["size"])


def _fresh_output(path: Path, force: bool):
    if path.exists() and not force:
        raise CliError(f"output {path} exists (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)


def cmd_eval_pck(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, collection_dir, collection = _load_run(run_dir, args.collection)
    if args.alphas:
        cfg.pck.alphas = tuple(float(a) for a in args.alphas.split(","))
    if args.oracle:
        result = evaluate.evaluate_pairwise_pck(collection, config=cfg.pck,
                                                transfer=_oracle_transfer(collection_dir),
                                                jobs=args.jobs)
    else:
        maps, _ = _model_maps(run_dir, collection)
        result = evaluate.evaluate_pairwise_pck(collection, maps, config=cfg.pck,
                                                restrict_to_foreground=args.restrict_foreground,
                                                jobs=args.jobs)
    records = evaluate.pck_records(result)
    out = run_dir / "metrics" / "pck.json"
    _fresh_output(out, args.force)
    evaluate.write_metric_records(out, records)
    if args.csv:
        _write_csv(out.with_suffix(".csv"), records)
    print(json.dumps(records, indent=1, sort_keys=True))
    return 0


def cmd_eval_cypck(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, collection_dir, collection = _load_run(run_dir, args.collection)
    alphas = (tuple(float(a) for a in args.alphas.split(","))
              if args.alphas else evaluate.DEFAULT_CYPCK_ALPHAS)
    if args.oracle:
        transfer = _oracle_transfer(collection_dir)
    else:
        maps, _ = _model_maps(run_dir, collection)
        transfer = evaluate.make_model_transfer(maps)
    curve = evaluate.compute_k_cypck(collection, args.k, transfer,
                                     num_sequences=args.num_sequences,
                                     seed=args.seed, alphas=alphas, config=cfg.pck)
    records = curve.to_json_records()
    out = run_dir / "metrics" / f"cypck_k{args.k}.json"
    _fresh_output(out, args.force)
    evaluate.write_metric_records(out, records)
    if args.csv:
        _write_csv(out.with_suffix(".csv"), records)
    print(json.dumps(records, indent=1, sort_keys=True))
    return 0


def cmd_warp(args) -> int:
    run_dir = Path(args.run_dir)
    _, _, collection = _load_run(run_dir)
    n = len(collection)
    if not (0 <= args.src_index < n and 0 <= args.dst_index < n):
        raise CliError(f"image indices must lie in [0, {n})")
    maps, _ = _model_maps(run_dir, collection)
    masks = collection.mask_or_ones()
    warped, _ = evaluate.dense_warp(maps[args.src_index], maps[args.dst_index],
                                    collection.images[args.src_index],
                                    masks[args.src_index])
    out = run_dir / "viz" / f"warp_{args.src_index:03d}_to_{args.dst_index:03d}.png"
    _fresh_output(out, args.force)
    _write_png(out, warped)
    print(f"wrote {out}")
    return 0


def cmd_viz(args) -> int:
    run_dir = Path(args.run_dir)
    _, _, collection = _load_run(run_dir)
    maps, grid = _model_maps(run_dir, collection)
    net, grid, _ = load_model_from_checkpoint(_latest_checkpoint(run_dir))
    _write_viz(run_dir, net, grid, collection, force=args.force)
    print(f"wrote visualizations under {run_dir / 'viz'}")
    return 0


def _write_viz(run_dir: Path, net, grid, collection, force: bool):
    viz_dir = run_dir / "viz"
    viz_dir.mkdir(parents=True, exist_ok=True)
    maps = coordinate_maps(net, collection.images)
    rendered = evaluate.render_canonical_viz(maps, grid)
    for name, cm in zip(collection.names, rendered["colormaps"]):
        path = viz_dir / f"canon_{name}.png"
        if path.exists() and not force:
            raise CliError(f"output {path} exists (use --force)")
        _write_png(path, cm)
    _write_png(viz_dir / "grid_rgb.png", rendered["grid_rgb"])
    _write_png(viz_dir / "grid_alpha.png", rendered["grid_alpha"])


def _write_png(path: Path, array: np.ndarray):
    arr = np.clip(np.asarray(array, dtype=np.float64), 0, 1)
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


def _write_csv(path: Path, records: list):
    if not records:
        return
    keys = sorted(records[0].keys())
    lines = [",".join(keys)]
    lines += [",".join(str(r.get(k, "")) for k in keys) for r in records]
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
