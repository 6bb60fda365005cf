"""Training loop: Adam + early stopping, FGSM adversarial training, and sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .dataset import SplitAssignment
from .models import Checkpoint, Classifier, NumericError, checkpoint_of
from .pipeline import (
    AugmentationConfig,
    ImageBatch,
    ImageStore,
    batches_for_partition,
    derive_seed,
)

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)
DEFAULT_LEARNING_RATES = (0.1, 0.01, 0.001, 0.0001)
DEFAULT_BATCH_SIZES = (16, 32, 64)


class TrainingDiverged(Exception):
    def __init__(self, message: str, history: "TrainingHistory"):
        super().__init__(message)
        self.history = history


class SweepError(Exception):
    def __init__(self, message: str, leaderboard: list):
        super().__init__(message)
        self.leaderboard = leaderboard


@dataclass(frozen=True)
class AdversarialConfig:
    epsilon: float
    mix_ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: AugmentationConfig | None = None
    adversarial: AdversarialConfig | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> dict:
        doc = asdict(self)
        return doc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def to_json(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for r in self.records:
                writer.writerow([r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc])


def save_curves_png(history: TrainingHistory, path: str | Path) -> None:
    """Accuracy and loss curves (train + validation) side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history.records]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(11, 4))
    ax_acc.plot(epochs, [r.train_acc for r in history.records], label="train")
    ax_acc.plot(epochs, [r.val_acc for r in history.records], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    ax_loss.plot(epochs, [r.train_loss for r in history.records], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history.records], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    if history.best_epoch >= 0:
        for ax in (ax_acc, ax_loss):
            ax.axvline(history.best_epoch, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class EarlyStopState:
    patience: int
    min_delta: float = 1e-4
    best_metric: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0

    def improved(self, val_metric: float) -> bool:
        return val_metric < self.best_metric - self.min_delta


def early_stop_update(state: EarlyStopState, epoch: int, val_metric: float) -> str:
    """Advance the early-stopping state; returns "continue" or "stop".

    The monitored metric is validation loss (lower is better); improvement
    must beat the incumbent by more than ``min_delta``. Stops once
    ``patience`` consecutive epochs pass without improvement.
    """
    if state.improved(val_metric):
        state.best_metric = val_metric
        state.best_epoch = epoch
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    return "stop" if state.epochs_since_improvement >= state.patience else "continue"


def fgsm_perturb(images: np.ndarray, grads: np.ndarray, epsilon: float) -> np.ndarray:
    """x' = clip(x + eps * sign(g), 0, 1) with sign(0) = 0."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0.0:
        return images.copy()
    out = np.clip(images + np.float32(epsilon) * np.sign(grads), 0.0, 1.0)
    return out.astype(images.dtype, copy=False)


def fgsm(classifier: Classifier, batch: ImageBatch, epsilon: float) -> ImageBatch:
    """Single-step sign attack on the batch loss; labels unchanged."""
    if epsilon == 0.0:
        images = batch.images.copy()
    else:
        _, grad = classifier.loss_and_grads(batch, wrt="input")
        images = fgsm_perturb(batch.images, grad, epsilon)
    return ImageBatch(images=images, labels=batch.labels.copy(), sample_ids=batch.sample_ids)


def _evaluate_pass(classifier: Classifier, batches: Iterable[ImageBatch]) -> tuple[float, float]:
    """Mean clamped cross-entropy and accuracy over a batch stream."""
    total_loss = 0.0
    correct = 0
    count = 0
    for batch in batches:
        _, probs = classifier.forward(batch)
        losses = -(batch.labels * np.log(probs + 1e-12)).sum(axis=1)
        total_loss += float(losses.sum())
        correct += int((probs.argmax(axis=1) == batch.label_indices).sum())
        count += len(batch)
    if count == 0:
        return math.nan, math.nan
    return total_loss / count, correct / count


def fit(
    classifier: Classifier,
    store: ImageStore,
    split: SplitAssignment,
    config: TrainingConfig,
) -> tuple[Checkpoint, TrainingHistory]:
    """Train with Adam, one step per batch, early-stopped on validation loss.

    Per-epoch shuffle seeds derive from (config.seed, epoch). When
    ``config.adversarial`` is set, each training batch is concatenated with
    its FGSM counterpart (equal halves); validation stays clean. The
    returned checkpoint holds the weights of the minimum-val-loss epoch.
    """
    train_ids = split.ids("train")
    val_ids = split.ids("val")
    if not train_ids or not val_ids:
        raise ValueError("train and val partitions must be non-empty")

    optimizer = torch.optim.Adam(
        classifier.trainable_parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
    )
    stopper = EarlyStopState(patience=config.patience, min_delta=config.min_delta)
    history = TrainingHistory()
    best_val_loss = math.inf
    best_weights: dict[str, np.ndarray] | None = None
    best_metrics: dict | None = None

    for epoch in range(config.max_epochs):
        epoch_seed = derive_seed(config.seed, epoch)
        classifier.net.train()
        loss_sum, correct, count = 0.0, 0, 0
        for batch in batches_for_partition(
            store,
            split,
            "train",
            batch_size=config.batch_size,
            shuffle_seed=epoch_seed,
            augment_cfg=config.augment,
            augment_seed=epoch_seed,
        ):
            if config.adversarial is not None:
                adv = fgsm(classifier, batch, config.adversarial.epsilon)
                batch = ImageBatch(
                    images=np.concatenate([batch.images, adv.images]),
                    labels=np.concatenate([batch.labels, adv.labels]),
                    sample_ids=batch.sample_ids + adv.sample_ids,
                )
            x = classifier._to_tensor(batch.images)
            y = torch.from_numpy(batch.labels).to(classifier.dtype)
            logits = classifier.net(x)
            p = torch.softmax(logits, dim=1)
            loss = -(y * torch.log(p + 1e-12)).sum(dim=1).mean()
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            preds = logits.argmax(dim=1).detach().numpy()
            loss_sum += float(loss.detach()) * len(batch)
            correct += int((preds == batch.label_indices).sum())
            count += len(batch)
        train_loss = loss_sum / max(count, 1)
        train_acc = correct / max(count, 1)

        try:
            val_loss, val_acc = _evaluate_pass(
                classifier,
                batches_for_partition(store, split, "val", batch_size=config.batch_size),
            )
        except NumericError:
            val_loss, val_acc = math.nan, math.nan
        history.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        history.stopped_epoch = epoch
        log.info(
            "epoch %d: train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
            epoch, train_loss, train_acc, val_loss, val_acc,
        )
        if math.isnan(val_loss) or math.isinf(val_loss):
            raise TrainingDiverged(f"validation loss diverged at epoch {epoch}", history)

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_weights = classifier.state_arrays()
            best_metrics = {
                "val_loss": val_loss,
                "val_acc": val_acc,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "epoch": epoch,
            }
            history.best_epoch = epoch
        if early_stop_update(stopper, epoch, val_loss) == "stop":
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break

    if best_weights is not None:
        classifier.load_state_arrays(best_weights)
    checkpoint = checkpoint_of(
        classifier,
        preprocess={
            "image_size": 224,
            "scale": "unit_interval",
            "augment": config.augment.to_json() if config.augment else None,
        },
        training_config=config.to_json(),
        metrics=best_metrics,
        epoch=history.best_epoch,
    )
    return checkpoint, history


def adversarial_fit(
    classifier: Classifier,
    store: ImageStore,
    split: SplitAssignment,
    config: TrainingConfig,
) -> tuple[Checkpoint, TrainingHistory]:
    """fit() with FGSM batch mixing; config.adversarial must be set."""
    if config.adversarial is None:
        raise ValueError("adversarial_fit requires config.adversarial")
    return fit(classifier, store, split, config)


@dataclass
class SweepRow:
    epsilon: float
    val_loss: float
    val_accuracy: float
    optimal_epochs: int
    error: str | None = None


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)

    def best_row(self) -> SweepRow:
        ok = [r for r in self.rows if r.error is None]
        if not ok:
            raise SweepError("every sweep run failed", self.rows)
        return min(ok, key=lambda r: (-r.val_accuracy, r.val_loss))

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epsilon", "val_loss", "val_accuracy", "optimal_epochs"])
            for r in self.rows:
                writer.writerow([r.epsilon, r.val_loss, r.val_accuracy, r.optimal_epochs])

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def epsilon_sweep(
    classifier_factory: Callable[[], Classifier],
    store: ImageStore,
    split: SplitAssignment,
    config: TrainingConfig,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
) -> SweepTable:
    """Adversarial-training sweep: fresh classifier per epsilon.

    Rows carry (epsilon, best val loss, best val accuracy, optimal_epochs)
    where optimal_epochs = best_epoch + 1. A failed run is recorded and the
    sweep continues.
    """
    table = SweepTable()
    for eps in epsilons:
        run_cfg = replace(
            config,
            adversarial=AdversarialConfig(epsilon=float(eps)) if eps > 0 else None,
        )
        try:
            classifier = classifier_factory()
            _, history = fit(classifier, store, split, run_cfg)
            best = history.records[history.best_epoch]
            table.rows.append(
                SweepRow(
                    epsilon=float(eps),
                    val_loss=best.val_loss,
                    val_accuracy=best.val_acc,
                    optimal_epochs=history.best_epoch + 1,
                )
            )
        except TrainingDiverged as exc:
            log.warning("epsilon %.3f diverged: %s", eps, exc)
            table.rows.append(
                SweepRow(
                    epsilon=float(eps),
                    val_loss=math.nan,
                    val_accuracy=math.nan,
                    optimal_epochs=0,
                    error=str(exc),
                )
            )
    return table


@dataclass
class LeaderboardRow:
    learning_rate: float
    batch_size: int
    val_loss: float
    val_accuracy: float
    optimal_epochs: int
    error: str | None = None


def hyperparameter_sweep(
    classifier_factory: Callable[[], Classifier],
    store: ImageStore,
    split: SplitAssignment,
    base_config: TrainingConfig,
    learning_rates: Sequence[float] = DEFAULT_LEARNING_RATES,
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
) -> tuple[TrainingConfig, list[LeaderboardRow]]:
    """Grid search over learning rate x batch size.

    Winner is the max best-val-accuracy configuration; ties break toward the
    lower learning rate, then the smaller batch. Raises SweepError (carrying
    the leaderboard) if every run diverged.
    """
    leaderboard: list[LeaderboardRow] = []
    for lr in learning_rates:
        for bs in batch_sizes:
            cfg = replace(base_config, learning_rate=float(lr), batch_size=int(bs))
            try:
                _, history = fit(classifier_factory(), store, split, cfg)
                best = history.records[history.best_epoch]
                leaderboard.append(
                    LeaderboardRow(float(lr), int(bs), best.val_loss, best.val_acc, history.best_epoch + 1)
                )
            except TrainingDiverged as exc:
                leaderboard.append(
                    LeaderboardRow(float(lr), int(bs), math.nan, math.nan, 0, error=str(exc))
                )
    winner = select_winner(leaderboard)
    best_config = replace(base_config, learning_rate=winner.learning_rate, batch_size=winner.batch_size)
    return best_config, leaderboard


def select_winner(leaderboard: Sequence[LeaderboardRow]) -> LeaderboardRow:
    """Max val accuracy; ties go to the lower learning rate, then smaller batch."""
    ok = [r for r in leaderboard if r.error is None]
    if not ok:
        raise SweepError("every hyperparameter run diverged", list(leaderboard))
    return min(ok, key=lambda r: (-r.val_accuracy, r.learning_rate, r.batch_size))
