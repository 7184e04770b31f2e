"""Training loop: paired minibatches, schedule, and optimizer step.

One agent owns the ModelState; batch assembly is pure and seeded, so a
fixed seed reproduces the loss trajectory exactly on one thread.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .augment import (
    AugmentParams,
    augment_with_posedness,
    baseline_augment_with_posedness,
)
from .errors import ConfigError, TrainingError
from .geometry import load_geometry_jsonl
from .model import ModelState, backward, forward
from .objective import BatchFeatures, LossReport, loss_total
from .raster import Channel, ManifestRow, normalize, read_smnd
from .tilemath import PixelGrid


@dataclass(frozen=True)
class TrainConfig:
    batch_pairs: int = 32  # N normal + N augmented per step
    epochs: int = 8
    peak_lr: float = 1e-2
    warmup_epochs: int = 1
    cosine_decay_alpha: float = 0.001
    momentum: float = 0.9  # first-moment decay
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    tau: float = 0.5
    gamma: float = 1.0
    w_bc: float = 1.0
    w_cl: float = 1.0
    w_if: float = 1.5
    rho: float = 0.10
    seed: int = 0
    steps_per_epoch: int = 100  # derived from the dataset by the driver
    crop: int | None = None  # train on random square crops of this size

    def __post_init__(self) -> None:
        if self.batch_pairs < 2:
            raise ConfigError("batch_pairs must be >= 2 (contrastive pairs)")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if self.peak_lr <= 0 or self.tau <= 0:
            raise ConfigError("rates must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak, then cosine decay to alpha * peak."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    warmup = cfg.warmup_steps()
    if warmup > 0 and step < warmup:
        return cfg.peak_lr * step / warmup
    last = cfg.total_steps() - 1
    if last <= warmup:
        progress = 1.0
    else:
        progress = min(1.0, (step - warmup) / (last - warmup))
    alpha = cfg.cosine_decay_alpha
    return cfg.peak_lr * (alpha + (1.0 - alpha) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def _adamw_update(state: ModelState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    t = state.step + 1
    b1, b2 = cfg.momentum, cfg.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads[name].astype(p.dtype)
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p -= (lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * p)).astype(
            p.dtype
        )


def train_step(
    state: ModelState,
    x_normal: np.ndarray,
    x_aug: np.ndarray,
    cfg: TrainConfig,
) -> LossReport:
    """One optimizer step on an index-aligned batch of pairs."""
    if x_normal.shape != x_aug.shape:
        raise ConfigError("normal and augmented batches must have equal shapes")
    fwd_n = forward(state, x_normal)
    fwd_a = forward(state, x_aug)
    batch = BatchFeatures(
        z_normal=fwd_n.z,
        z_aug=fwd_a.z,
        s_normal=fwd_n.s,
        s_aug=fwd_a.s,
        tau=cfg.tau,
        gamma=cfg.gamma,
        w_bc=cfg.w_bc,
        w_cl=cfg.w_cl,
        w_if=cfg.w_if,
    )
    report = loss_total(batch)
    if not math.isfinite(report.l_total):
        raise TrainingError(f"non-finite loss at step {state.step}: {report}")
    grads_n, _ = backward(state, fwd_n, report.grad_z_normal, report.grad_s_normal)
    grads_a, _ = backward(state, fwd_a, report.grad_z_aug, report.grad_s_aug)
    grads = {k: grads_n[k] + grads_a[k] for k in grads_n}
    _adamw_update(state, grads, lr_at(state.step, cfg), cfg)
    state.step += 1
    return report


class PairProvider(Protocol):
    """Source of index-aligned (normal, augmented) input tensors."""

    def __len__(self) -> int: ...

    def get_pair(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]: ...


class DiskPairProvider:
    """Training pairs from rasterized tiles on disk.

    Reference channels come straight from each tile's container; the
    augmented casement channel is redrawn per (epoch, index) -- from the
    tile's vector geometry for the polygon strategy, or from the stored
    raster for the baseline strategies.
    """

    def __init__(
        self,
        rows: Sequence[ManifestRow],
        base_dir: str | Path,
        params: AugmentParams,
        seed: int,
        channel_names: Sequence[str],
        strategy: str = "rpa",
    ) -> None:
        base = Path(base_dir)
        self.params = params
        self.seed = seed
        self.strategy = strategy
        self._ref: list[np.ndarray] = []
        self._normal_rcpp: list[Channel] = []
        self._casements: list = []
        self._tiles = []
        names = [n for n in channel_names if n != "RCPP"]
        for row in rows:
            if row.label != "normal":
                continue
            stored_names, arr = read_smnd(base / row.path)
            idx = {n: i for i, n in enumerate(stored_names)}
            missing = [n for n in names + ["RCPP"] if n not in idx]
            if missing:
                raise ConfigError(f"{row.path}: missing channels {missing}")
            tile = row.tile_key()
            grid = PixelGrid(tile, arr.shape[1])
            self._ref.append(np.stack([arr[idx[n]] for n in names]) if names else
                             np.zeros((0, arr.shape[1], arr.shape[2]), dtype=arr.dtype))
            self._normal_rcpp.append(Channel("RCPP", grid, arr[idx["RCPP"]]))
            self._tiles.append(tile)
            if strategy == "rpa":
                if row.geometry is None:
                    raise ConfigError(f"{row.tile}: polygon strategy needs geometry")
                geo = load_geometry_jsonl(base / row.geometry)
                if not geo.polygons:
                    raise ConfigError(f"{row.tile}: geometry has no casement polygons")
                self._casements.append(geo.polygons)
            else:
                self._casements.append(None)
        if not self._tiles:
            raise ConfigError("manifest has no normal tiles")

    def __len__(self) -> int:
        return len(self._tiles)

    def get_pair(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        sub_seed = int(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(epoch, index)).generate_state(1)[0]
        )
        normal = self._normal_rcpp[index]
        if self.strategy == "rpa":
            rec = augment_with_posedness(
                self._casements[index],
                self._tiles[index],
                self.params,
                sub_seed,
                grid=normal.grid,
            )
            aug = rec.augmented_rcpp
        else:
            aug, _, _ = baseline_augment_with_posedness(
                normal, self.strategy, self.params, sub_seed
            )
        ref = self._ref[index]
        xn = np.concatenate([ref, normalize(normal).data[None]], axis=0)
        xa = np.concatenate([ref, normalize(aug).data[None]], axis=0)
        return xn, xa


def _crop_pair(
    xn: np.ndarray, xa: np.ndarray, crop: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    size = xn.shape[-1]
    if crop > size:
        raise ConfigError(f"crop {crop} larger than input {size}")
    if crop == size:
        return xn, xa
    top = int(rng.integers(0, size - crop + 1))
    left = int(rng.integers(0, size - crop + 1))
    return (
        xn[..., top : top + crop, left : left + crop],
        xa[..., top : top + crop, left : left + crop],
    )


def train(
    state: ModelState,
    provider: PairProvider,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    on_step: Callable[[int, float, LossReport], None] | None = None,
) -> TrainConfig:
    """Run the full schedule over the provider's pairs.

    Pair order is reshuffled every epoch from the config seed; partial
    trailing batches are dropped so every step sees a full batch.
    Returns the config with steps_per_epoch resolved from the dataset.
    """
    n_pairs = len(provider)
    steps_per_epoch = n_pairs // cfg.batch_pairs
    if steps_per_epoch < 1:
        raise ConfigError(
            f"dataset of {n_pairs} pairs is smaller than one batch of {cfg.batch_pairs}"
        )
    cfg = replace(cfg, steps_per_epoch=steps_per_epoch)

    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "l_bc", "l_cl", "l_if", "l_total"])
    try:
        for epoch in range(cfg.epochs):
            order_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(epoch, 0))
            )
            order = order_rng.permutation(n_pairs)
            for step_in_epoch in range(steps_per_epoch):
                idx = order[
                    step_in_epoch * cfg.batch_pairs : (step_in_epoch + 1) * cfg.batch_pairs
                ]
                xs_n, xs_a = [], []
                for pair_pos, i in enumerate(idx):
                    xn, xa = provider.get_pair(epoch, int(i))
                    if cfg.crop is not None:
                        crop_rng = np.random.default_rng(
                            np.random.SeedSequence(
                                entropy=cfg.seed,
                                spawn_key=(epoch, 1 + step_in_epoch, pair_pos),
                            )
                        )
                        xn, xa = _crop_pair(xn, xa, cfg.crop, crop_rng)
                    xs_n.append(xn)
                    xs_a.append(xa)
                lr = lr_at(state.step, cfg)
                report = train_step(state, np.stack(xs_n), np.stack(xs_a), cfg)
                if writer is not None:
                    writer.writerow(
                        [
                            state.step - 1,
                            f"{lr:.8g}",
                            f"{report.l_bc:.8g}",
                            f"{report.l_cl:.8g}",
                            f"{report.l_if:.8g}",
                            f"{report.l_total:.8g}",
                        ]
                    )
                if on_step is not None:
                    on_step(state.step - 1, lr, report)
    finally:
        if fh is not None:
            fh.close()
    return cfg
