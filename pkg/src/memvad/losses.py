"""Training objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from memvad import memory as mem


@dataclass
class LossWeights:
    compact: float = 0.1
    separate: float = 0.1
    uniform: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        for name in ("compact", "separate", "uniform", "margin"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


def intensity_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    return torch.mean((output - target) ** 2)


def _flat(queries: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    q = queries.reshape(-1, queries.shape[-1])
    return F.normalize(q, dim=-1) if normalize else q


def compactness_loss(queries: torch.Tensor, bank: mem.BankLike, normalize_queries: bool = False):
    """Mean squared distance from each query to its nearest item."""
    items = mem._items(bank)
    q = _flat(queries, normalize_queries)
    first, _ = mem.nearest_items(items, q)
    return torch.mean(torch.sum((q - items[first]) ** 2, dim=-1))


def separateness_loss(
    queries: torch.Tensor, bank: mem.BankLike, margin: float = 1.0, normalize_queries: bool = False
):
    """Triplet hinge: nearest item must be closer than the second nearest by ``margin``."""
    items = mem._items(bank)
    if items.shape[0] < 2:
        raise ValueError("separateness needs at least two memory items")
    q = _flat(queries, normalize_queries)
    first, second = mem.nearest_items(items, q)
    d_pos = torch.sum((q - items[first]) ** 2, dim=-1)
    d_neg = torch.sum((q - items[second]) ** 2, dim=-1)
    return torch.mean(torch.clamp(d_pos - d_neg + margin, min=0.0))


def total_loss(
    parts: dict,
    weights: LossWeights,
    use_memory: bool = True,
    uniform_supervision: bool = False,
    use_compact: bool = True,
    use_separate: bool = True,
):
    """Weighted sum of the loss parts; memory terms drop out when memory is off.

    ``parts`` maps "intensity", "compactness", "separateness", "uniform" to
    scalars. Missing auxiliary parts are treated as disabled.
    """
    total = parts["intensity"]
    if not use_memory:
        return total
    if use_compact and parts.get("compactness") is not None:
        total = total + weights.compact * parts["compactness"]
    if use_separate and parts.get("separateness") is not None:
        total = total + weights.separate * parts["separateness"]
    if uniform_supervision and parts.get("uniform") is not None:
        total = total + weights.uniform * parts["uniform"]
    return total


def compute_parts(
    output: torch.Tensor,
    target: torch.Tensor,
    queries: Optional[torch.Tensor],
    bank: Optional[mem.BankLike],
    update_weights: Optional[torch.Tensor],
    weights: LossWeights,
    normalize_queries: bool = False,
) -> dict:
    parts = {"intensity": intensity_loss(output, target)}
    if queries is None or bank is None:
        return parts
    parts["compactness"] = compactness_loss(queries, bank, normalize_queries)
    parts["separateness"] = separateness_loss(queries, bank, weights.margin, normalize_queries)
    if update_weights is not None:
        parts["uniform"] = mem.uniform_supervision_loss(update_weights)
    return parts
