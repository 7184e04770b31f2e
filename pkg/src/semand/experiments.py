"""End-to-end desk experiment drivers.

Shared by the CLI (train / matrix subcommands) and the acceptance suite:
train a model on a synthetic world with a chosen augmentation strategy,
modality subset, and loss weights, then measure anomaly-detection AUC on
a held-out split.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .augment import AugmentParams
from .errors import ConfigError
from .model import ModelConfig, ModelState, init_state
from .scoring import (
    Prototype,
    auc_from_scores,
    classifier_score,
    embed,
    fit_prototype,
    ood_score,
)
from .synthgen import EvalSplit, World, WorldPairProvider, channels_for_modalities
from .tilemath import TileKey
from .training import TrainConfig, train


def desk_model_config(
    input_channels: int, grid_size: int, seed: int = 0
) -> ModelConfig:
    """Backbone sized to the tile raster: enough stride-2 stages to pool
    down to a small map, capped at the default four."""
    stages: list[tuple[int, int, int]] = []
    widths = (16, 32, 64, 128)
    size = grid_size
    for w in widths:
        if size <= 8:
            break
        stages.append((w, 3, 2))
        size //= 2
    return ModelConfig(
        input_channels=input_channels,
        conv_stages=tuple(stages),
        seed=seed,
    )


@dataclass(frozen=True)
class DeskRun:
    """One training cell of an experiment."""

    modalities: tuple[str, ...] = ("RNP", "M", "SI")
    strategy: str = "rpa"
    rho: float = 0.10
    actions: tuple[str, ...] = ("rotate", "translate", "scale", "delete")
    w_bc: float = 1.0
    w_cl: float = 1.0
    w_if: float = 1.5
    epochs: int = 6
    batch_pairs: int = 16
    peak_lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0


def train_on_world(
    world: World,
    train_keys: Sequence[TileKey],
    run: DeskRun,
    aug_params: AugmentParams | None = None,
    log_path=None,
) -> tuple[ModelState, WorldPairProvider]:
    if aug_params is None:
        aug_params = AugmentParams()
    aug_params = replace(aug_params, rho=run.rho, actions=tuple(run.actions))
    channels = channels_for_modalities(run.modalities)
    provider = WorldPairProvider(
        world,
        train_keys,
        aug_params,
        seed=run.seed,
        modalities=run.modalities,
        strategy=run.strategy,
    )
    model_cfg = desk_model_config(
        len(channels), world.config.grid_size, seed=run.seed
    )
    state = init_state(model_cfg)
    train_cfg = TrainConfig(
        batch_pairs=run.batch_pairs,
        epochs=run.epochs,
        peak_lr=run.peak_lr,
        weight_decay=run.weight_decay,
        w_bc=run.w_bc,
        w_cl=run.w_cl,
        w_if=run.w_if,
        rho=run.rho,
        seed=run.seed,
    )
    train(state, provider, train_cfg, log_path=log_path)
    return state, provider


def fit_train_prototype(
    state: ModelState, provider: WorldPairProvider, max_tiles: int = 256
) -> Prototype:
    """Prototype from the normal halves of the training pairs."""
    feats = []
    for idx in range(min(len(provider), max_tiles)):
        xn, _ = provider.get_pair(0, idx)
        feats.append(xn)
    z = embed(state, np.stack(feats))
    return fit_prototype(z)


def eval_auc(
    state: ModelState,
    split: EvalSplit,
    strategy: str,
    method: str = "clf",
    proto: Prototype | None = None,
    batch: int = 64,
) -> float:
    """AUC of the model's scores on one strategy's anomalies."""
    normals, anomalies = split.by_strategy(strategy)
    if not normals or not anomalies:
        raise ConfigError(f"eval split has no tiles for strategy {strategy!r}")

    def score_items(items):
        out = []
        for start in range(0, len(items), batch):
            x = np.stack([i.tensor for i in items[start : start + batch]])
            if method == "clf":
                out.append(classifier_score(state, x))
            else:
                if proto is None:
                    raise ConfigError("OOD scoring needs a fitted prototype")
                out.append(ood_score(embed(state, x), proto, method))
        return np.concatenate(out)

    return auc_from_scores(score_items(anomalies), score_items(normals))
