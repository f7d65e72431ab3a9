"""Training loop, evaluation and the variant-comparison harness."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .config import RunConfig, write_config_echo
from .data import FeatureSet, batch_indices, save_checkpoint
from .errors import ConfigError
from .model import JcaModel, mlsm_loss, one_hot, segment_accuracy
from .optim import Adam

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,train_acc,val_acc"


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.train_acc!r},{self.val_acc!r}"


@dataclass
class TrainResult:
    model: JcaModel
    history: list[EpochMetrics]
    best_epoch: int
    best_params: dict[str, np.ndarray] = field(repr=False)

    @property
    def best_train_acc(self) -> float:
        return max((m.train_acc for m in self.history), default=float("nan"))

    @property
    def best_val_acc(self) -> float:
        vals = [m.val_acc for m in self.history if not math.isnan(m.val_acc)]
        return max(vals, default=float("nan"))


def check_compatible(config: RunConfig, data: FeatureSet, what: str = "dataset") -> None:
    """Raise ConfigError naming both sides when ``data`` does not fit ``config``."""
    ours = (config.N, config.audio_dim, config.visual_positions, config.visual_channels)
    theirs = (data.segments, data.audio_dim, data.visual_positions, data.visual_channels)
    if ours != theirs:
        raise ConfigError(
            f"config dims (N, audio_dim, positions, channels)={ours} do not match {what} dims {theirs}"
        )
    if len(data) and data.labels.max() >= config.class_count:
        raise ConfigError(
            f"{what} has label {int(data.labels.max())} but config class_count is {config.class_count}"
        )


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def predict_scores(model: JcaModel, data: FeatureSet, batch_size: int = 64) -> np.ndarray:
    """Pre-sigmoid scores (S, N, C) in dataset order."""
    out = []
    with ag.no_grad():
        for idx in batch_indices(len(data), batch_size):
            batch = data[idx]
            out.append(model.forward(batch.audio, batch.visual).logits.data)
    return np.concatenate(out, axis=0)


def evaluate(model: JcaModel, data: FeatureSet, batch_size: int = 64) -> float:
    return segment_accuracy(predict_scores(model, data, batch_size), data.labels)


def train_step(model: JcaModel, opt: Adam, batch: FeatureSet) -> tuple[float, int]:
    """One forward/backward/update on its own tape; returns (loss, correct segments)."""
    with ag.Tape() as tape:
        logits = model.forward(batch.audio, batch.visual).logits
        loss = mlsm_loss(logits, one_hot(batch.labels, model.config.class_count))
        tape.backward(loss)
    opt.step()
    opt.zero_grad()
    correct = int(np.sum(logits.data.argmax(axis=-1) == batch.labels))
    return float(loss.data), correct


def _open_log(path: str | os.PathLike):
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    fh = open(path, "a")
    if fresh:
        fh.write(LOG_HEADER + "\n")
        fh.flush()
    return fh


def train(
    config: RunConfig,
    train_set: FeatureSet,
    val_set: FeatureSet | None = None,
    log_path: str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Train with Adam; keeps the parameters of the best validation epoch.

    Without a validation set the last epoch counts as best. Everything is a
    pure function of the config (seed included) and the data.
    """
    config.validate()
    check_compatible(config, train_set, "training set")
    if val_set is not None:
        check_compatible(config, val_set, "validation set")
    model = JcaModel(config)
    opt = Adam(model.params, lr=config.learning_rate)
    history: list[EpochMetrics] = []
    best_params = {k: v.copy() for k, v in model.state().items()}
    best_epoch, best_val = 0, -1.0

    log = _open_log(log_path) if log_path is not None else None
    if log_path is not None:
        write_config_echo(config, log_path)
    if checkpoint_path is not None:
        write_config_echo(config, checkpoint_path)
    try:
        for epoch in range(1, config.epochs + 1):
            total_loss, correct, segments = 0.0, 0, 0
            for idx in batch_indices(len(train_set), config.batch_size, epoch_seed(config.seed, epoch)):
                batch = train_set[idx]
                loss, hits = train_step(model, opt, batch)
                total_loss += loss * len(idx)
                correct += hits
                segments += batch.labels.size
            val_acc = evaluate(model, val_set, config.batch_size) if val_set is not None else float("nan")
            metrics = EpochMetrics(epoch, total_loss / len(train_set), correct / segments, val_acc)
            history.append(metrics)
            if log is not None:
                log.write(metrics.csv_row() + "\n")
                log.flush()
            logger.info("epoch %d loss %.5f train_acc %.4f val_acc %.4f", *dataclasses.astuple(metrics))
            improved = val_set is None or val_acc > best_val
            if improved:
                best_val, best_epoch = val_acc, epoch
                best_params = {k: v.copy() for k, v in model.state().items()}
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, config, best_params)
            if on_epoch is not None:
                on_epoch(metrics)
    finally:
        if log is not None:
            log.close()
    if checkpoint_path is not None and config.epochs == 0:
        save_checkpoint(checkpoint_path, config, best_params)
    return TrainResult(model, history, best_epoch, best_params)


# Ablation variants: (label, config overrides, published reference accuracy on AVE, %).
ABLATION_VARIANTS: list[tuple[str, dict, float]] = [
    ("w/o residual embedding", {"residual_embedding": "off"}, 75.2),
    ("w/ average pooling", {"early_fusion": "average"}, 75.1),
    ("w/ max pooling", {"early_fusion": "max"}, 75.0),
    ("w/ co-attention", {"coattention_mode": "original"}, 75.4),
    ("w/ joint co-attention", {}, 76.2),
]


@dataclass
class AblationRow:
    variant: str
    parameters: int
    train_acc: float
    val_acc: float
    reference_acc: float
    epochs: int


def run_ablation(
    base: RunConfig,
    train_set: FeatureSet,
    val_set: FeatureSet | None = None,
    variants: list[tuple[str, dict, float]] | None = None,
) -> list[AblationRow]:
    rows = []
    for label, overrides, reference in variants or ABLATION_VARIANTS:
        config = RunConfig.from_dict({**base.to_dict(), **overrides}).validate()
        result = train(config, train_set, val_set)
        rows.append(
            AblationRow(
                label,
                result.model.num_parameters(),
                result.history[-1].train_acc if result.history else float("nan"),
                result.best_val_acc,
                reference,
                len(result.history),
            )
        )
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    """Plain-text comparison table; the reference column is informational."""
    lines = [f"{'variant':<26}{'params':>10}{'train_acc':>11}{'val_acc':>9}{'ref_AVE_%':>11}"]
    for r in rows:
        lines.append(
            f"{r.variant:<26}{r.parameters:>10}{r.train_acc:>11.4f}{r.val_acc:>9.4f}{r.reference_acc:>11.1f}"
        )
    return "\n".join(lines)
