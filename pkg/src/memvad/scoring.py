"""Frame-level abnormality scoring and ROC-AUC evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from memvad import memory as mem

PSNR_CAP = 100.0
MINMAX_EPS = 1e-8


class DegenerateSeriesWarning(UserWarning):
    """A series had (numerically) zero range and was normalized to zeros."""


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    """PSNR in dB of frames stored in [-1, 1], measured on the [0, 1] scale."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = float(torch.mean(((pred - target) / 2.0) ** 2))
    return psnr_from_mse(mse, cap)


def psnr_from_mse(mse: float, cap: float = PSNR_CAP) -> float:
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def query_distance(queries: torch.Tensor, bank: mem.BankLike, normalize_queries: bool = False) -> float:
    """Mean L2 distance from each query to its nearest item."""
    items = mem._items(bank)
    q = queries.reshape(-1, queries.shape[-1])
    if normalize_queries:
        q = F.normalize(q, dim=-1)
    first, _ = mem.nearest_items(items, q)
    return float(torch.mean(torch.linalg.vector_norm(q - items[first], dim=-1)))


def minmax_normalize(series, eps: float = MINMAX_EPS) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty series")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi - lo < eps:
        warnings.warn(
            f"series of length {x.size} has range {hi - lo:.3g} < {eps}; returning zeros",
            DegenerateSeriesWarning,
            stacklevel=2,
        )
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def abnormality_score(psnr_series, dist_series, lam: float) -> np.ndarray:
    """Fuse inverted normalized PSNR with normalized query distance.

    ``dist_series=None`` means no memory: the score is PSNR-only.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p = np.asarray(psnr_series, dtype=np.float64)
    psnr_part = 1.0 - minmax_normalize(p)
    if dist_series is None:
        return psnr_part
    d = np.asarray(dist_series, dtype=np.float64)
    if d.shape != p.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} PSNR values vs {d.shape[0]} distances")
    if lam == 1.0:
        return psnr_part
    return lam * psnr_part + (1.0 - lam) * minmax_normalize(d)


def auc(scores, labels) -> float:
    """ROC-AUC with ties counted as one half (Mann-Whitney statistic)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one normal and one anomalous frame")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ScoreSeries:
    """Per-frame scores of one video."""

    video_id: str
    frame_index: np.ndarray
    psnr: np.ndarray
    distance: Optional[np.ndarray]
    label: np.ndarray
    score: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=int)
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=int)
        if self.distance is not None:
            self.distance = np.asarray(self.distance, dtype=np.float64)
        n = len(self.psnr)
        lengths = {len(self.frame_index), len(self.label), n}
        if self.distance is not None:
            lengths.add(len(self.distance))
        if len(lengths) != 1:
            raise ValueError(f"video {self.video_id}: series lengths differ {sorted(lengths)}")
        if not set(np.unique(self.label)) <= {0, 1}:
            raise ValueError(f"video {self.video_id}: labels must be 0/1")

    def fuse(self, lam: float) -> np.ndarray:
        self.score = abnormality_score(self.psnr, self.distance, lam)
        return self.score


def frame_auc(series: Iterable[ScoreSeries], lam: Optional[float] = None) -> float:
    """AUC over frames of all videos, each video normalized on its own.

    When ``lam`` is given the fused score is (re)computed first.
    """
    scores, labels = [], []
    for s in series:
        if lam is not None or s.score is None:
            s.fuse(1.0 if lam is None else lam)
        scores.append(s.score)
        labels.append(s.label)
    if not scores:
        raise ValueError("no score series given")
    s = np.concatenate(scores)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite abnormality score")
    return auc(s, np.concatenate(labels))


def global_frame_auc(series: Sequence[ScoreSeries], lam: float) -> float:
    """Variant that min-max normalizes over the whole test set instead of per video."""
    psnrs = np.concatenate([s.psnr for s in series])
    labels = np.concatenate([s.label for s in series])
    dists = None
    if all(s.distance is not None for s in series):
        dists = np.concatenate([s.distance for s in series])
    return auc(abnormality_score(psnrs, dists, lam), labels)
