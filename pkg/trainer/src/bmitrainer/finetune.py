"""Fine-tuning strategies: which parameters thaw, and proof that the rest froze.

Three ladder rungs, in strictly increasing trainable-parameter order:
  unfreeze_classifier       only the regression head
  unfreeze_last_dense_block the final dense block onward, plus the head
  unfreeze_all              everything

`frozen_checksum` hashes the frozen tensors so tests (and cautious callers)
can prove bit-identity of frozen weights across a fine-tuning run.
"""

from __future__ import annotations

import hashlib

import torch
from torch import nn
from torch.utils.data import Dataset

from .model import BmiRegressor
from .train import TrainConfig, TrainResult, train

UNFREEZE_CLASSIFIER = "unfreeze_classifier"
UNFREEZE_LAST_DENSE_BLOCK = "unfreeze_last_dense_block"
UNFREEZE_ALL = "unfreeze_all"
STRATEGIES = (UNFREEZE_CLASSIFIER, UNFREEZE_LAST_DENSE_BLOCK, UNFREEZE_ALL)

# Module-name prefixes that form the "last dense block onward" group.
_LAST_BLOCK_PREFIXES = {
    "densenet121": ("features.denseblock4", "features.norm5", "head"),
    "densenet201": ("features.denseblock4", "features.norm5", "head"),
    "tiny": ("features.denseblock2", "features.se2", "head"),
}


class StrategyError(ValueError):
    pass


def trainable_prefixes(model: BmiRegressor, strategy: str) -> tuple[str, ...]:
    if strategy == UNFREEZE_CLASSIFIER:
        return ("head",)
    if strategy == UNFREEZE_LAST_DENSE_BLOCK:
        prefixes = _LAST_BLOCK_PREFIXES.get(model.spec.backbone)
        if prefixes is None:
            raise StrategyError(
                f"strategy {strategy!r} is not defined for backbone {model.spec.backbone!r}"
            )
        return prefixes
    if strategy == UNFREEZE_ALL:
        return ("",)
    raise StrategyError(f"unknown fine-tuning strategy {strategy!r}")


def apply_strategy(model: BmiRegressor, strategy: str) -> list[nn.Parameter]:
    """Set requires_grad per strategy; returns the trainable parameters."""
    prefixes = trainable_prefixes(model, strategy)
    trainable: list[nn.Parameter] = []
    for name, param in model.named_parameters():
        selected = any(name.startswith(p) for p in prefixes)
        param.requires_grad = selected
        if selected:
            trainable.append(param)
    if not trainable:
        raise StrategyError(f"strategy {strategy!r} selected no parameters")
    return trainable


def trainable_parameter_count(model: BmiRegressor, strategy: str) -> int:
    prefixes = trainable_prefixes(model, strategy)
    return sum(
        p.numel() for name, p in model.named_parameters()
        if any(name.startswith(pre) for pre in prefixes)
    )


def frozen_checksum(model: BmiRegressor) -> str:
    """SHA-256 over all parameters with requires_grad=False, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if not param.requires_grad:
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def finetune(
    model: BmiRegressor,
    train_dataset: Dataset,
    val_dataset: Dataset | None,
    strategy: str,
    cfg: TrainConfig | None = None,
    metrics_csv=None,
) -> TrainResult:
    """Fine-tune under a freeze strategy; only selected parameters update."""
    parameters = apply_strategy(model, strategy)
    return train(model, train_dataset, val_dataset, cfg,
                 metrics_csv=metrics_csv, parameters=parameters)
