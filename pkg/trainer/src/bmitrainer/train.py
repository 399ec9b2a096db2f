"""Training loop: Adam + MSE on raw BMI targets with plateau LR decay.

Defaults follow the fixed recipe (40 epochs, batch 64, lr 0.001, weight decay
0.0001, LR x0.1 after 5 epochs without validation-loss improvement); no
augmentation and no further hyperparameter tuning. MAE and MAPE are logged
per epoch for both phases, and the best-validation-loss weights are kept.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .model import BmiRegressor


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(
            f"non-finite training loss {loss} at epoch {epoch}, step {step}; "
            "lower the learning rate or inspect the input data"
        )
        self.epoch = epoch
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    lr_factor: float = 0.1
    lr_patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be nonnegative")
        if self.lr_patience < 1:
            raise ValueError("lr_patience must be at least 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_mae: float
    train_mape: float
    val_loss: float
    val_mae: float
    val_mape: float
    lr: float


@dataclass
class TrainResult:
    model: BmiRegressor
    history: list[EpochMetrics] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = None

    def load_best(self) -> BmiRegressor:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model


def _phase_metrics(outputs: list[torch.Tensor], targets: list[torch.Tensor]) -> tuple[float, float, float]:
    preds = torch.cat(outputs).reshape(-1).double()
    truth = torch.cat(targets).reshape(-1).double()
    err = preds - truth
    mse = float((err ** 2).mean())
    mae = float(err.abs().mean())
    mape = float((err.abs() / truth.abs().clamp_min(1e-12)).mean() * 100.0)
    return mse, mae, mape


def train(
    model: BmiRegressor,
    train_dataset: Dataset,
    val_dataset: Dataset | None,
    cfg: TrainConfig | None = None,
    metrics_csv: str | Path | None = None,
    parameters: list[nn.Parameter] | None = None,
) -> TrainResult:
    """Train the model, checkpointing the best-validation-loss weights.

    ``parameters`` restricts the optimizer to a subset (used by fine-tuning);
    by default every parameter with requires_grad is optimized. When no
    validation set is given the training set doubles as one, which keeps the
    plateau scheduler and best-checkpoint logic well defined.
    """
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)

    loader = DataLoader(
        train_dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    val_loader = DataLoader(val_dataset or train_dataset, batch_size=cfg.batch_size)

    if parameters is None:
        parameters = [p for p in model.parameters() if p.requires_grad]
    if not parameters:
        raise ValueError("no trainable parameters selected")

    optimizer = torch.optim.Adam(parameters, lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=cfg.lr_factor, patience=cfg.lr_patience)
    loss_fn = nn.MSELoss()

    result = TrainResult(model=model)
    for epoch in range(cfg.epochs):
        model.train()
        outputs, targets = [], []
        for step, (x, y) in enumerate(loader):
            optimizer.zero_grad()
            out = model(x)
            loss = loss_fn(out, y)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(epoch, step, loss_value)
            loss.backward()
            optimizer.step()
            outputs.append(out.detach())
            targets.append(y.detach())
        train_loss, train_mae, train_mape = _phase_metrics(outputs, targets)

        model.eval()
        outputs, targets = [], []
        with torch.no_grad():
            for x, y in val_loader:
                outputs.append(model(x))
                targets.append(y)
        val_loss, val_mae, val_mape = _phase_metrics(outputs, targets)

        scheduler.step(val_loss)
        result.history.append(EpochMetrics(
            epoch=epoch,
            train_loss=train_loss, train_mae=train_mae, train_mape=train_mape,
            val_loss=val_loss, val_mae=val_mae, val_mape=val_mape,
            lr=optimizer.param_groups[0]["lr"],
        ))
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = copy.deepcopy(model.state_dict())

    if metrics_csv is not None:
        write_metrics_csv(result.history, metrics_csv)
    return result


def write_metrics_csv(history: list[EpochMetrics], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_mae", "train_mape",
                         "val_loss", "val_mae", "val_mape", "lr"])
        for m in history:
            writer.writerow([m.epoch, m.train_loss, m.train_mae, m.train_mape,
                             m.val_loss, m.val_mae, m.val_mape, m.lr])


def save_checkpoint(model: BmiRegressor, path: str | Path) -> None:
    """Resumable eager checkpoint (spec + weights); artifacts are separate."""
    from dataclasses import asdict

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"spec": asdict(model.spec), "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> BmiRegressor:
    from .model import ModelSpec, build_model

    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = build_model(ModelSpec(**payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    return model
