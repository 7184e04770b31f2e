"""Command-line pipeline: gen, rasterize, augment, train, score, eval,
localize, health-hist, matrix.

Conventions: manifests are JSON Lines with paths relative to the
manifest's own directory; every run writes a resolved_config.json next
to its outputs; all randomness is seeded from flags; failures print one
machine-readable JSON line to stderr and exit 1 (usage errors exit 2).
Set SEMAND_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .augment import (
    ACTIONS,
    AugmentParams,
    RASTER_STRATEGIES,
    augment_with_posedness,
    baseline_augment_with_posedness,
    save_action_log,
)
from .errors import ConfigError, SemandError
from .experiments import DeskRun, desk_model_config, eval_auc, fit_train_prototype, train_on_world
from .geometry import load_geometry_jsonl, write_geometry_jsonl
from .model import init_state, load_checkpoint, save_checkpoint
from .raster import (
    Channel,
    ManifestRow,
    fuse,
    load_rgb,
    normalize,
    rasterize_crm,
    rasterize_polygons,
    rasterize_segments,
    read_manifest,
    read_smnd,
    write_manifest,
    write_smnd,
)
from .scoring import (
    classifier_score,
    embed,
    fit_prototype,
    health_histogram,
    localize,
    ood_score,
    auc_from_scores,
)
from .synthgen import (
    WorldConfig,
    channels_for_modalities,
    fused_normal,
    generate_tile,
    generate_world,
    make_eval_split,
    split_tiles,
)
from .tilemath import PixelGrid, TileKey
from .training import DiskPairProvider, TrainConfig, train

log = logging.getLogger("semand")

_SCORE_METHODS = ("clf", "cosine", "euclid", "mahalanobis", "gauss_density")


def _setup_logging() -> None:
    level = os.environ.get("SEMAND_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _tile_stem(tile: TileKey) -> str:
    return f"{tile.zoom}_{tile.x}_{tile.y}"


def _write_resolved_config(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["semand_version"] = __version__
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_json_config(path: str | None, cls, overrides: dict):
    raw = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in raw and isinstance(raw[f.name], list):
            raw[f.name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in raw[f.name]
            )
    return cls(**raw)


def _parse_modalities(text: str) -> tuple[str, ...]:
    mods = tuple(m.strip() for m in text.split(",") if m.strip())
    channels_for_modalities(mods)  # validates
    return mods


def _parse_actions(text: str) -> tuple[str, ...]:
    acts = tuple(a.strip() for a in text.split(",") if a.strip())
    for a in acts:
        if a not in ACTIONS:
            raise ConfigError(f"unknown action {a!r}")
    return acts


def _thread_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# gen


def cmd_gen(args) -> int:
    cfg = _load_json_config(args.config, WorldConfig, {"seed": args.seed})
    out = Path(args.out)
    (out / "geometry").mkdir(parents=True, exist_ok=True)
    (out / "tiles").mkdir(exist_ok=True)
    keys = cfg.tile_keys()

    def build(key: TileKey) -> ManifestRow:
        td = generate_tile(cfg, key)
        stem = _tile_stem(key)
        geo_rel = f"geometry/{stem}.jsonl"
        tile_rel = f"tiles/{stem}.smnd"
        write_geometry_jsonl(
            out / geo_rel,
            polygons=td.casements,
            road_edges=td.graph.segments(),
            trajectories=td.trajectories,
        )
        fused = fused_normal(td, ("RNP", "M", "SI"))
        write_smnd(out / tile_rel, fused.names, fused.tensor())
        return ManifestRow(
            tile=key.as_string(),
            path=tile_rel,
            label="normal",
            posedness=None,
            channels=list(fused.names),
            geometry=geo_rel,
        )

    rows = _thread_map(build, keys, args.threads)
    rows.sort(key=lambda r: r.tile)
    if args.eval_tiles > 0:
        _, eval_keys = split_tiles(keys, args.eval_tiles, seed=cfg.seed)
        eval_set = {k.as_string() for k in eval_keys}
        write_manifest(out / "manifest_train.jsonl", [r for r in rows if r.tile not in eval_set])
        write_manifest(out / "manifest_eval.jsonl", [r for r in rows if r.tile in eval_set])
    else:
        write_manifest(out / "manifest.jsonl", rows)
    _write_resolved_config(out, {
        "command": "gen",
        "world": dataclasses.asdict(cfg),
        "eval_tiles": args.eval_tiles,
        "threads": args.threads,
    })
    print(f"generated {len(rows)} tiles in {out}")
    return 0


# rasterize


def cmd_rasterize(args) -> int:
    src = Path(args.geometry)
    files = sorted(src.glob("*.jsonl")) if src.is_dir() else [src]
    if not files:
        raise ConfigError(f"no geometry files under {src}")
    out = Path(args.out)
    (out / "tiles").mkdir(parents=True, exist_ok=True)

    def build(path: Path) -> ManifestRow:
        if args.tile:
            tile = TileKey.from_string(args.tile)
        else:
            try:
                z, x, y = (int(v) for v in path.stem.split("_"))
            except ValueError as exc:
                raise ConfigError(
                    f"{path.name}: expected z_x_y.jsonl naming (or pass --tile)"
                ) from exc
            tile = TileKey(z, x, y)
        grid = PixelGrid(tile, args.grid_size)
        geo = load_geometry_jsonl(path)
        chans: list[Channel] = []
        if args.imagery:
            img_dir = Path(args.imagery)
            candidates = [img_dir / f"{_tile_stem(tile)}.npy", img_dir / f"{_tile_stem(tile)}.smnd"]
            found = [c for c in candidates if c.exists()]
            if found:
                chans.extend(load_rgb(found[0], grid))
        chans.append(normalize(rasterize_crm(geo.trajectories, "walk", grid)))
        chans.append(normalize(rasterize_crm(geo.trajectories, "drive", grid)))
        chans.append(normalize(rasterize_segments(geo.road_edges, grid)))
        chans.append(normalize(rasterize_polygons(geo.polygons, grid)))
        fused = fuse(chans)
        rel = f"tiles/{_tile_stem(tile)}.smnd"
        write_smnd(out / rel, fused.names, fused.tensor())
        return ManifestRow(
            tile=tile.as_string(),
            path=rel,
            label="normal",
            posedness=None,
            channels=list(fused.names),
            geometry=os.path.relpath(path, out),
        )

    rows = _thread_map(build, files, args.threads)
    rows.sort(key=lambda r: r.tile)
    write_manifest(out / "manifest.jsonl", rows)
    _write_resolved_config(out, {"command": "rasterize", "grid_size": args.grid_size,
                                 "geometry": str(src), "threads": args.threads})
    print(f"rasterized {len(rows)} tiles in {out}")
    return 0


# augment


def cmd_augment(args) -> int:
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    rows = [r for r in read_manifest(manifest_path) if r.label == "normal"]
    if not rows:
        raise ConfigError(f"{manifest_path}: no normal rows to augment")
    out = Path(args.out)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    params = AugmentParams(rho=args.rho, actions=_parse_actions(args.actions))

    def build(item: tuple[int, ManifestRow]) -> list[ManifestRow]:
        idx, row = item
        tile = row.tile_key()
        names, arr = read_smnd(base / row.path)
        grid = PixelGrid(tile, arr.shape[1])
        if "RCPP" not in names:
            raise ConfigError(f"{row.path}: tile has no RCPP channel")
        rcpp_idx = names.index("RCPP")
        seed = int(
            np.random.SeedSequence(entropy=args.seed, spawn_key=(idx,)).generate_state(1)[0]
        )
        stem = _tile_stem(tile)
        log_rel = None
        if args.strategy == "rpa":
            if row.geometry is None:
                raise ConfigError(f"{row.tile}: rpa strategy needs geometry paths")
            geo = load_geometry_jsonl(base / row.geometry)
            rec = augment_with_posedness(geo.polygons, tile, params, seed, grid=grid)
            aug_rcpp = normalize(rec.augmented_rcpp).data
            rho_val = rec.posedness
            log_rel = f"logs/{stem}.json"
            save_action_log(out / log_rel, rec.action_log)
        else:
            normal = Channel("RCPP", grid, arr[rcpp_idx])
            aug, rho_val, _ = baseline_augment_with_posedness(
                normal, args.strategy, params, seed
            )
            aug_rcpp = normalize(aug).data
        aug_arr = arr.copy()
        aug_arr[rcpp_idx] = aug_rcpp
        aug_rel = f"tiles/{stem}_aug.smnd"
        write_smnd(out / aug_rel, names, aug_arr)
        normal_copy = dataclasses.replace(
            row, path=os.path.relpath(base / row.path, out),
            geometry=os.path.relpath(base / row.geometry, out) if row.geometry else None,
        )
        aug_row = ManifestRow(
            tile=row.tile,
            path=aug_rel,
            label="augmented",
            posedness=rho_val,
            channels=names,
            strategy=args.strategy,
            geometry=normal_copy.geometry,
            action_log=log_rel,
        )
        return [normal_copy, aug_row]

    nested = _thread_map(build, list(enumerate(rows)), args.threads)
    out_rows = [r for pair in nested for r in pair]
    out_rows.sort(key=lambda r: (r.tile, r.label))
    write_manifest(out / "manifest.jsonl", out_rows)
    _write_resolved_config(out, {
        "command": "augment", "manifest": str(manifest_path), "rho": args.rho,
        "seed": args.seed, "strategy": args.strategy, "actions": args.actions,
        "threads": args.threads,
    })
    print(f"augmented {len(rows)} tiles in {out}")
    return 0


# train


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    modalities = _parse_modalities(args.modalities)
    channels = channels_for_modalities(modalities)
    params = AugmentParams(rho=args.rho, actions=_parse_actions(args.actions))
    provider = DiskPairProvider(
        rows, manifest_path.parent, params, args.seed, channels, strategy=args.strategy
    )
    xn, _ = provider.get_pair(0, 0)
    grid_size = xn.shape[-1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = desk_model_config(len(channels), args.crop or grid_size, seed=args.seed)
    state = init_state(model_cfg)
    train_cfg = TrainConfig(
        batch_pairs=args.batch_pairs,
        epochs=args.epochs,
        peak_lr=args.peak_lr,
        w_bc=args.w_bc,
        w_cl=args.w_cl,
        w_if=args.w_if,
        rho=args.rho,
        seed=args.seed,
        crop=args.crop,
    )
    resolved = train(state, provider, train_cfg, log_path=out / "training_log.csv")
    save_checkpoint(state, out / "checkpoint.smck")
    _write_resolved_config(out, {
        "command": "train",
        "manifest": str(manifest_path),
        "modalities": list(modalities),
        "strategy": args.strategy,
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(resolved),
        "augment": dataclasses.asdict(params),
    })
    print(f"trained {state.step} steps; checkpoint at {out / 'checkpoint.smck'}")
    return 0


# score


def _load_tensors(rows: Sequence[ManifestRow], base: Path, channels: Sequence[str]) -> np.ndarray:
    tensors = []
    for row in rows:
        names, arr = read_smnd(base / row.path)
        idx = {n: i for i, n in enumerate(names)}
        missing = [n for n in channels if n not in idx]
        if missing:
            raise ConfigError(f"{row.path}: missing channels {missing}")
        tensors.append(np.stack([arr[idx[n]] for n in channels]))
    return np.stack(tensors)


def cmd_score(args) -> int:
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    if not rows:
        raise ConfigError(f"{manifest_path}: empty manifest")
    state = load_checkpoint(args.checkpoint)
    channels = channels_for_modalities(_parse_modalities(args.modalities))
    if len(channels) != state.config.input_channels:
        raise ConfigError(
            f"model expects {state.config.input_channels} channels but "
            f"--modalities selects {len(channels)}"
        )
    x = _load_tensors(rows, manifest_path.parent, channels)
    batch = max(1, args.batch)
    slices = [slice(i, i + batch) for i in range(0, len(rows), batch)]
    if args.method == "clf":
        parts = _thread_map(lambda sl: classifier_score(state, x[sl]), slices, args.threads)
        scores = np.concatenate(parts)
    else:
        parts = _thread_map(lambda sl: embed(state, x[sl]), slices, args.threads)
        z = np.concatenate(parts)
        normal_idx = [i for i, r in enumerate(rows) if r.label == "normal"]
        if len(normal_idx) < 2:
            raise ConfigError("OOD scoring needs at least 2 normal rows for the prototype")
        proto = fit_prototype(z[normal_idx])
        scores = ood_score(z, proto, args.method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile", "label", "strategy", "method", "score"])
        for row, score in zip(rows, scores):
            writer.writerow(
                [row.tile, row.label, row.strategy or "", args.method, f"{score:.8g}"]
            )
    _write_resolved_config(out.parent, {
        "command": "score", "checkpoint": str(args.checkpoint),
        "manifest": str(manifest_path), "method": args.method,
        "modalities": args.modalities, "threads": args.threads,
    })
    print(f"scored {len(rows)} tiles -> {out}")
    return 0


def _read_scores_csv(path: str | Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_eval(args) -> int:
    records = _read_scores_csv(args.scores)
    if not records:
        raise ConfigError(f"{args.scores}: no score rows")
    pos = np.array([float(r["score"]) for r in records if r["label"] != "normal"])
    neg = np.array([float(r["score"]) for r in records if r["label"] == "normal"])
    from .errors import EvaluationError

    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("scores file needs both normal and augmented rows")
    value = auc_from_scores(pos, neg)
    print(f"auc={value:.4f}")
    return 0


def cmd_localize(args) -> int:
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    matching = [r for r in rows if r.tile == args.tile and r.label == args.label]
    if not matching:
        raise ConfigError(f"tile {args.tile} with label {args.label} not in manifest")
    row = matching[0]
    state = load_checkpoint(args.checkpoint)
    channels = channels_for_modalities(_parse_modalities(args.modalities))
    if len(channels) != state.config.input_channels:
        raise ConfigError("modalities do not match the checkpoint's input channels")
    x = _load_tensors([row], manifest_path.parent, channels)[0]
    saliency = localize(state, x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"saliency_{_tile_stem(row.tile_key())}.smnd"
    write_smnd(dest, ["SALIENCY"], saliency[None].astype(np.float32))
    _write_resolved_config(out, {
        "command": "localize", "checkpoint": str(args.checkpoint),
        "tile": args.tile, "label": args.label,
    })
    print(f"saliency map -> {dest}")
    return 0


def cmd_health_hist(args) -> int:
    records = _read_scores_csv(args.scores)
    if not records:
        raise ConfigError(f"{args.scores}: no score rows")
    scores = np.array([float(r["score"]) for r in records])
    rep = health_histogram(scores, bins=args.bins, threshold=args.threshold)
    lines = []
    for i in range(args.bins):
        lines.append(
            f"{rep.edges[i]:.3f},{rep.edges[i + 1]:.3f},{rep.counts[i]},{rep.fractions[i]:.6f}"
        )
    print("bin_lo,bin_hi,count,fraction")
    for line in lines:
        print(line)
    print(
        f"below_threshold({rep.threshold:g})="
        f"{rep.below_threshold_fraction * 100:.2f}%"
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count,fraction\n")
            fh.write("\n".join(lines) + "\n")
    return 0


# matrix


_AXIS_NAMES = ("loss_weights", "modalities", "actions", "rho", "strategies")


def cmd_matrix(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    unknown = set(spec) - {"world", "eval_tiles", "run", "axes", "seed"}
    if unknown:
        raise ConfigError(f"unknown matrix keys: {sorted(unknown)}")
    axes = spec.get("axes", {})
    unknown_axes = set(axes) - set(_AXIS_NAMES)
    if unknown_axes:
        raise ConfigError(f"unknown axes: {sorted(unknown_axes)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    rows: list[list] = []
    if axes:
        world_cfg = _load_json_config(None, WorldConfig, dict(spec.get("world", {})))
        run_overrides = dict(spec.get("run", {}))
        unknown_run = set(run_overrides) - {f.name for f in dataclasses.fields(DeskRun)}
        if unknown_run:
            raise ConfigError(f"unknown run keys: {sorted(unknown_run)}")
        seed = int(spec.get("seed", 0))
        world = generate_world(world_cfg)
        n_eval = int(spec.get("eval_tiles", max(2, len(world.tiles) // 5)))
        train_keys, eval_keys = world.split(n_eval, seed=seed)
        base_run = DeskRun(seed=seed, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in run_overrides.items()
        })

        def run_cell(axis: str, cell, run: DeskRun, eval_strategies: list[str]):
            try:
                state, provider = train_on_world(world, train_keys, run)
                split = make_eval_split(
                    world, eval_keys, run.rho, eval_strategies, seed=seed + 1,
                    modalities=run.modalities,
                )
                method = "clf" if run.w_bc + run.w_if > 0 else "cosine"
                proto = (
                    fit_train_prototype(state, provider) if method != "clf" else None
                )
                for ev in eval_strategies:
                    value = eval_auc(state, split, ev, method=method, proto=proto)
                    rows.append([axis, json.dumps(cell), run.strategy, ev, f"{value:.4f}", ""])
            except SemandError as exc:
                log.warning("matrix cell failed: %s", exc)
                rows.append([axis, json.dumps(cell), run.strategy, "", "", str(exc)])

        for axis, cells in axes.items():
            for cell in cells:
                if axis == "loss_weights":
                    run = dataclasses.replace(base_run, **{
                        k: float(v) for k, v in cell.items()
                        if k in ("w_bc", "w_cl", "w_if")
                    })
                    run_cell(axis, cell, run, [run.strategy])
                elif axis == "modalities":
                    run = dataclasses.replace(base_run, modalities=tuple(cell))
                    run_cell(axis, cell, run, [run.strategy])
                elif axis == "actions":
                    run = dataclasses.replace(base_run, actions=tuple(cell))
                    run_cell(axis, cell, run, [run.strategy])
                elif axis == "rho":
                    run = dataclasses.replace(base_run, rho=float(cell))
                    run_cell(axis, cell, run, [run.strategy])
                elif axis == "strategies":
                    run = dataclasses.replace(base_run, strategy=str(cell))
                    run_cell(axis, cell, run, [str(c) for c in axes["strategies"]])
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "cell", "train_strategy", "eval_strategy", "auc", "error"])
        writer.writerows(rows)
    _write_resolved_config(out, {"command": "matrix", "spec": str(args.spec)})
    print(f"matrix report -> {report_path} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semand",
        description="Self-supervised multimodal geospatial anomaly detection (desk scale)",
    )
    parser.add_argument("--version", action="version", version=f"semand {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, threads=True):
        p.add_argument("--seed", type=int, default=0, help="random seed")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="worker threads")

    p = sub.add_parser("gen", help="generate a synthetic world")
    p.add_argument("--config", help="WorldConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-tiles", type=int, default=0, help="tiles held out for eval")
    add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("rasterize", help="rasterize geometry JSONL into tiles")
    p.add_argument("--geometry", required=True, help="geometry file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=256)
    p.add_argument("--tile", help="tile key z/x/y when rasterizing a single file")
    p.add_argument("--imagery", help="directory of per-tile RGB rasters (.npy/.smnd)")
    add_common(p)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("augment", help="write augmented counterparts for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=0.10, help="posedness threshold")
    p.add_argument("--strategy", default="rpa", choices=("rpa",) + RASTER_STRATEGIES)
    p.add_argument("--actions", default=",".join(ACTIONS))
    add_common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the detector on a rasterized dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", default="RNP,M,SI")
    p.add_argument("--strategy", default="rpa", choices=("rpa",) + RASTER_STRATEGIES)
    p.add_argument("--actions", default=",".join(ACTIONS))
    p.add_argument("--rho", type=float, default=0.10)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch-pairs", type=int, default=16)
    p.add_argument("--peak-lr", type=float, default=1e-2)
    p.add_argument("--w-bc", type=float, default=1.0)
    p.add_argument("--w-cl", type=float, default=1.0)
    p.add_argument("--w-if", type=float, default=1.5)
    p.add_argument("--crop", type=int, default=None)
    add_common(p, threads=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score every tile in a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", default="clf", choices=_SCORE_METHODS)
    p.add_argument("--modalities", default="RNP,M,SI")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=64)
    add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUC of a scores CSV")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="saliency map for one tile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tile", required=True, help="tile key z/x/y")
    p.add_argument("--label", default="augmented", choices=("normal", "augmented"))
    p.add_argument("--modalities", default="RNP,M,SI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("health-hist", help="score histogram for data health")
    p.add_argument("--scores", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_health_hist)

    p = sub.add_parser("matrix", help="run an experiment matrix end to end")
    p.add_argument("--spec", required=True, help="matrix spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_matrix)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SemandError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
