"""Randomized polygon augmentation of a tile's casement polygons.

Each polygon is independently selected for augmentation; a selected
polygon receives a shuffled sequence of rotate/translate/scale/delete
actions with parameters drawn uniformly from two-sided exclusion
intervals, and the result is clipped to the tile's spatial extent. An
acceptance-rejection wrapper redraws until the rasterized change is
large enough (posedness above threshold).

All randomness comes from counter-split child generators of an explicit
seed, so every attempt is independent yet reproducible and the whole
pipeline can run tiles in parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyTileError,
    RejectionExhaustedError,
    UndefinedPosednessError,
)
from .geometry import Polygon, Rotate, Scale, Translate, apply_affine, clip_to_tile
from .raster import Channel, rasterize_polygons
from .tilemath import PixelGrid, TileKey

ACTIONS = ("rotate", "translate", "scale", "delete")

RASTER_STRATEGIES = ("rotation90", "cutout", "random_erase", "cutpaste")


@dataclass(frozen=True)
class AugmentParams:
    """Sampling intervals and acceptance settings.

    Defaults are the values found optimal in the experiments this
    implementation follows: theta in [pi/6, pi/2], translation in
    [0.00006, 0.00012] decimal degrees, scale in [0.2, 0.7] u [1.4, 3.0],
    selection probability 0.5, posedness threshold 0.10.
    """

    theta0: float = math.pi / 6
    theta1: float = math.pi / 2
    delta0: float = 0.00006
    delta1: float = 0.00012
    beta_lo: float = 0.2
    beta0_lo: float = 0.7
    beta0_hi: float = 1.4
    beta_hi: float = 3.0
    p_select: float = 0.5
    rho: float = 0.10
    max_attempts: int = 1000
    actions: tuple[str, ...] = ACTIONS  # allowed action set (|A| sweeps)

    def __post_init__(self) -> None:
        if not 0 < self.theta0 < self.theta1:
            raise ConfigError("need 0 < theta0 < theta1")
        if not 0 < self.delta0 < self.delta1:
            raise ConfigError("need 0 < delta0 < delta1")
        if not 0 < self.beta_lo < self.beta0_lo < 1 < self.beta0_hi < self.beta_hi:
            raise ConfigError("need 0 < beta- < beta0- < 1 < beta0+ < beta+")
        if not 0 < self.p_select < 1:
            raise ConfigError("need 0 < p_select < 1")
        if self.rho < 0:
            raise ConfigError("posedness threshold must be >= 0")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        actions = tuple(self.actions)
        object.__setattr__(self, "actions", actions)
        if not actions or len(set(actions)) != len(actions):
            raise ConfigError("actions must be a non-empty set")
        for a in actions:
            if a not in ACTIONS:
                raise ConfigError(f"unknown action {a!r}")


@dataclass(frozen=True)
class PolygonLog:
    """Actions applied to one polygon, in application order."""

    polygon_id: str
    selected: bool
    actions: tuple[dict, ...] = ()


ActionLog = tuple[PolygonLog, ...]


@dataclass(frozen=True)
class AugmentationRecord:
    tile: TileKey
    normal_rcpp: Channel
    augmented_rcpp: Channel
    posedness: float
    action_log: ActionLog
    seed: int
    attempts: int


def _child_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-split child generator: independent per (seed, key)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _sample_union(rng: np.random.Generator, a1: float, b1: float, a2: float, b2: float) -> float:
    """Uniform draw from [a1, b1] u [a2, b2], weighted by interval length."""
    len1 = b1 - a1
    len2 = b2 - a2
    u = rng.uniform(0.0, len1 + len2)
    return a1 + u if u < len1 else a2 + (u - len1)


def _select_polygons(rng: np.random.Generator, n: int, p_select: float) -> list[int]:
    """Independently select each index with probability p_select.

    Falls back to one uniformly random index when nothing was selected,
    so the augmented tile always differs somewhere in vector space.
    """
    draws = rng.random(n)
    chosen = [j for j in range(n) if draws[j] < p_select]
    if not chosen:
        chosen = [int(rng.integers(n))]
    return chosen


def _sample_action_sequence(
    rng: np.random.Generator, actions: tuple[str, ...] = ACTIONS
) -> list[str]:
    """Include each allowed action with probability 1/2, then shuffle.

    Falls back to one uniformly random action when none was included.
    """
    draws = rng.random(len(actions))
    included = [a for a, d in zip(actions, draws) if d < 0.5]
    if not included:
        included = [actions[int(rng.integers(len(actions)))]]
    order = rng.permutation(len(included))
    return [included[i] for i in order]


def _apply_logged_action(poly: Polygon, entry: dict) -> Polygon | None:
    kind = entry["kind"]
    if kind == "rotate":
        return apply_affine(poly, Rotate(entry["theta"]))
    if kind == "translate":
        return apply_affine(poly, Translate(entry["dx"], entry["dy"]))
    if kind == "scale":
        return apply_affine(poly, Scale(entry["bx"], entry["by"]))
    if kind == "delete":
        return None
    raise ConfigError(f"unknown action kind {kind!r}")


def rand_poly_augment(
    polys: Sequence[Polygon],
    tile: TileKey,
    params: AugmentParams,
    seed: int,
    attempt: int = 0,
) -> tuple[list[Polygon], ActionLog]:
    """One randomized augmentation draw over a tile's polygons.

    Returns the augmented polygon set (clipped to the tile) and the
    per-polygon action log with the sampled parameters; replaying the
    log reproduces the output exactly.
    """
    polys = list(polys)
    if not polys:
        raise EmptyTileError(f"tile {tile.as_string()}: no polygons to augment")
    sel_rng = _child_rng(seed, attempt, 0)
    chosen = set(_select_polygons(sel_rng, len(polys), params.p_select))

    out: list[Polygon] = []
    log: list[PolygonLog] = []
    for j, poly in enumerate(polys):
        if j not in chosen:
            out.append(poly)
            log.append(PolygonLog(poly.id, selected=False))
            continue
        rng = _child_rng(seed, attempt, 1 + j)
        sequence = _sample_action_sequence(rng, params.actions)
        entries: list[dict] = []
        current: Polygon | None = poly
        for kind in sequence:
            if kind == "rotate":
                theta = _sample_union(
                    rng, -params.theta1, -params.theta0, params.theta0, params.theta1
                )
                entries.append({"kind": "rotate", "theta": theta})
            elif kind == "translate":
                dx = _sample_union(
                    rng, -params.delta1, -params.delta0, params.delta0, params.delta1
                )
                dy = _sample_union(
                    rng, -params.delta1, -params.delta0, params.delta0, params.delta1
                )
                entries.append({"kind": "translate", "dx": dx, "dy": dy})
            elif kind == "scale":
                bx = _sample_union(
                    rng, params.beta_lo, params.beta0_lo, params.beta0_hi, params.beta_hi
                )
                by = _sample_union(
                    rng, params.beta_lo, params.beta0_lo, params.beta0_hi, params.beta_hi
                )
                entries.append({"kind": "scale", "bx": bx, "by": by})
            else:
                entries.append({"kind": "delete"})
            current = _apply_logged_action(current, entries[-1])
            if current is None:
                break  # delete terminates the sequence
        if current is not None:
            out.extend(clip_to_tile(current, tile))
        log.append(PolygonLog(poly.id, selected=True, actions=tuple(entries)))
    return out, tuple(log)


def replay_action_log(
    polys: Sequence[Polygon], tile: TileKey, log: ActionLog
) -> list[Polygon]:
    """Re-apply a recorded action log to the original polygons."""
    if len(log) != len(polys):
        raise ConfigError("action log does not match polygon list")
    out: list[Polygon] = []
    for poly, entry in zip(polys, log):
        if entry.polygon_id != poly.id:
            raise ConfigError(
                f"action log for {entry.polygon_id!r} does not match {poly.id!r}"
            )
        if not entry.selected:
            out.append(poly)
            continue
        current: Polygon | None = poly
        for act in entry.actions:
            current = _apply_logged_action(current, act)
            if current is None:
                break
        if current is not None:
            out.extend(clip_to_tile(current, tile))
    return out


def posedness(normal: Channel, augmented: Channel) -> float:
    """Frobenius-norm ratio ||augmented - normal||_F / ||normal||_F."""
    if normal.grid != augmented.grid:
        raise ConfigError("posedness needs both rasters on the same grid")
    base = float(np.linalg.norm(normal.data.astype(np.float64)))
    if base == 0.0:
        raise UndefinedPosednessError("normal raster is all zero")
    diff = augmented.data.astype(np.float64) - normal.data.astype(np.float64)
    return float(np.linalg.norm(diff)) / base


def augment_with_posedness(
    polys: Sequence[Polygon],
    tile: TileKey,
    params: AugmentParams,
    seed: int,
    grid: PixelGrid | None = None,
) -> AugmentationRecord:
    """Acceptance-rejection wrapper: redraw until posedness > rho.

    Each attempt uses a fresh counter-derived sub-seed. A max_attempts
    cap bounds the loop; hitting it raises RejectionExhaustedError.
    """
    if grid is None:
        grid = PixelGrid(tile)
    elif grid.tile != tile:
        raise ConfigError("grid does not belong to the tile being augmented")
    normal = rasterize_polygons(polys, grid)
    if float(normal.data.max()) == 0.0:
        raise UndefinedPosednessError(
            f"tile {tile.as_string()}: normal raster has no set pixels"
        )
    for attempt in range(1, params.max_attempts + 1):
        aug_polys, log = rand_poly_augment(polys, tile, params, seed, attempt=attempt)
        augmented = rasterize_polygons(aug_polys, grid)
        rho = posedness(normal, augmented)
        if rho > params.rho:
            return AugmentationRecord(
                tile=tile,
                normal_rcpp=normal,
                augmented_rcpp=augmented,
                posedness=rho,
                action_log=log,
                seed=seed,
                attempts=attempt,
            )
    raise RejectionExhaustedError(
        f"tile {tile.as_string()}: no draw exceeded rho={params.rho} "
        f"in {params.max_attempts} attempts"
    )


# Baseline raster-space augmenters used for strategy comparisons.

_RECT_MIN_FRAC = 1 / 16
_RECT_MAX_FRAC = 1 / 4


def _random_rect(rng: np.random.Generator, size: int) -> tuple[int, int, int, int]:
    lo = max(1, int(size * _RECT_MIN_FRAC))
    hi = max(lo, int(size * _RECT_MAX_FRAC))
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    return top, left, h, w


def baseline_augment(ch: Channel, strategy: str, seed: int) -> Channel:
    """Domain-agnostic raster augmentation of one channel."""
    rng = _child_rng(seed)
    data = ch.data.astype(np.float64).copy()
    size = ch.grid.size
    if strategy == "rotation90":
        k = int(rng.integers(4))
        data = np.rot90(data, k).copy()
    elif strategy == "cutout":
        top, left, h, w = _random_rect(rng, size)
        data[top : top + h, left : left + w] = 0.0
    elif strategy == "random_erase":
        top, left, h, w = _random_rect(rng, size)
        data[top : top + h, left : left + w] = rng.uniform(0.0, 1.0, size=(h, w))
    elif strategy == "cutpaste":
        top, left, h, w = _random_rect(rng, size)
        patch = data[top : top + h, left : left + w].copy()
        dst_top = int(rng.integers(0, size - h + 1))
        dst_left = int(rng.integers(0, size - w + 1))
        data[dst_top : dst_top + h, dst_left : dst_left + w] = patch
    else:
        raise ConfigError(f"unknown baseline strategy {strategy!r}")
    return Channel(ch.name, ch.grid, data)


def baseline_augment_with_posedness(
    ch: Channel, strategy: str, params: AugmentParams, seed: int
) -> tuple[Channel, float, int]:
    """Posedness acceptance-rejection around a baseline augmenter."""
    if float(np.linalg.norm(ch.data)) == 0.0:
        raise UndefinedPosednessError("channel has no set pixels")
    for attempt in range(1, params.max_attempts + 1):
        aug = baseline_augment(ch, strategy, _attempt_seed(seed, attempt))
        rho = posedness(ch, aug)
        if rho > params.rho:
            return aug, rho, attempt
    raise RejectionExhaustedError(
        f"{strategy}: no draw exceeded rho={params.rho} in {params.max_attempts} attempts"
    )


def _attempt_seed(seed: int, attempt: int) -> int:
    # Stable 63-bit sub-seed per attempt.
    return int(
        np.random.SeedSequence(entropy=seed, spawn_key=(attempt,)).generate_state(1)[0]
    )


def action_log_to_json(log: ActionLog) -> str:
    return json.dumps(
        [
            {
                "polygon_id": e.polygon_id,
                "selected": e.selected,
                "actions": list(e.actions),
            }
            for e in log
        ],
        indent=None,
    )


def action_log_from_json(text: str) -> ActionLog:
    raw = json.loads(text)
    return tuple(
        PolygonLog(
            polygon_id=e["polygon_id"],
            selected=bool(e["selected"]),
            actions=tuple(e.get("actions", [])),
        )
        for e in raw
    )


def save_action_log(path: str | Path, log: ActionLog) -> None:
    Path(path).write_text(action_log_to_json(log), encoding="utf-8")


def load_action_log(path: str | Path) -> ActionLog:
    return action_log_from_json(Path(path).read_text(encoding="utf-8"))
