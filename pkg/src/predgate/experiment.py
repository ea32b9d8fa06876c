"""Desk-scale protocol: train one zoo model on a sequence set and score it on held-out data."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .datasets import SequenceSet, ShapeGenConfig, gen_sequences
from .metrics import copy_last_frame, evaluate_frames
from .predcode_stack import StackConfig, audit_config, build_stack, next_frame_predictions
from .presets import preset_config
from .trainer import TrainConfig, train

ZOO_COLUMNS = ("model", "peephole", "gates", "roles", "params", "mse", "mae", "ssim", "train_wall_ms", "error")

DESK_SEED = 7
DESK_TRAIN = 2000
DESK_HOLDOUT = 200


@dataclass(frozen=True)
class DeskData:
    train: SequenceSet
    test: SequenceSet


def desk_data(seed: int = DESK_SEED, n_train: int = DESK_TRAIN, n_holdout: int = DESK_HOLDOUT) -> DeskData:
    """Default synthetic set: ``n_train`` training plus ``n_holdout`` held-out sequences."""
    full = gen_sequences(ShapeGenConfig(seed=seed), n_train + n_holdout)
    tr, te = full.split(n_holdout)
    return DeskData(tr, te)


def baseline_scores(test: SequenceSet) -> dict:
    rep = evaluate_frames(copy_last_frame(test.data), test.data)
    return dict(mse=rep.mse, mae=rep.mae, ssim=rep.ssim)


def run_model(
    config: StackConfig,
    train_set: SequenceSet,
    test_set: SequenceSet,
    train_config: TrainConfig,
    init_seed: int | None = None,
) -> dict:
    """Train, predict every next frame of ``test_set`` and return one zoo row."""
    spec = config.spec
    row = dict(model=config.model, peephole=spec.peephole, gates="|".join(spec.gates),
               roles="|".join(spec.roles), params=audit_config(config).total)
    start = time.perf_counter()
    seed = train_config.seed if init_seed is None else init_seed
    stack, _ = train(build_stack(config, seed), train_set, train_config)
    wall = (time.perf_counter() - start) * 1000.0
    rep = evaluate_frames(next_frame_predictions(stack, test_set.data), test_set.data)
    row.update(mse=rep.mse, mae=rep.mae, ssim=rep.ssim, train_wall_ms=wall, error="")
    return row


def failed_row(config_or_model, exc: BaseException) -> dict:
    model = getattr(config_or_model, "model", config_or_model)
    return dict(model=model, peephole="", gates="", roles="", params="", mse=np.nan, mae=np.nan,
                ssim=np.nan, train_wall_ms=np.nan, error=f"{type(exc).__name__}: {exc}")


def desk_config(model: str, **overrides) -> StackConfig:
    return preset_config("desk", model, **overrides)
