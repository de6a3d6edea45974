"""Memory bank of prototypical normal features and the operations on it.

Orientation convention: correlation maps are ``K x M`` (queries by items).
Every function accepts arbitrary leading batch dimensions on the query side,
so ``(B, K, C)`` query stacks work without reshaping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

NORM_TOL = 1e-5
BANK_MAGIC = b"MEMBANK1"
_HEADER = struct.Struct("<8sIIB3x")


class BankError(ValueError):
    """Raised for invalid memory-bank state or inputs."""


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise BankError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class MemoryBank:
    """``M x C`` matrix of unit-norm memory items.

    Banks are values: :func:`update` returns a new bank.
    """

    items: torch.Tensor

    def __post_init__(self):
        items = self.items
        if items.ndim != 2:
            raise BankError(f"memory items must be 2-D, got shape {tuple(items.shape)}")
        m, c = items.shape
        if m < 2 or c < 1:
            raise BankError(f"need M >= 2 and C >= 1, got M={m}, C={c}")
        _check_finite(items, "memory items")
        norms = items.detach().norm(dim=1)
        bad = (norms - 1).abs() > NORM_TOL
        if bad.any():
            idx = int(torch.nonzero(bad)[0])
            raise BankError(f"memory item {idx} has norm {float(norms[idx]):.8f}, expected 1")

    @property
    def M(self) -> int:
        return self.items.shape[0]

    @property
    def C(self) -> int:
        return self.items.shape[1]

    @classmethod
    def random(cls, M: int = 10, C: int = 512, seed: int = 0, dtype=torch.float32) -> "MemoryBank":
        gen = torch.Generator().manual_seed(seed)
        raw = torch.randn(M, C, generator=gen, dtype=dtype)
        return cls(F.normalize(raw, dim=1))

    def clone(self) -> "MemoryBank":
        return MemoryBank(self.items.detach().clone())

    def save(self, path: Union[str, Path]) -> None:
        """Write ``MEMBANK1`` header, M, C, itemsize, then little-endian row-major items."""
        arr = self.items.detach().cpu().numpy()
        itemsize = arr.dtype.itemsize
        if itemsize not in (4, 8):
            raise BankError(f"unsupported item dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=f"<f{itemsize}")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(BANK_MAGIC, self.M, self.C, itemsize))
            fh.write(data.tobytes(order="C"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MemoryBank":
        with open(path, "rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) != _HEADER.size:
                raise BankError(f"{path}: truncated header")
            magic, m, c, itemsize = _HEADER.unpack(header)
            if magic != BANK_MAGIC:
                raise BankError(f"{path}: bad magic {magic!r}")
            if itemsize not in (4, 8):
                raise BankError(f"{path}: bad itemsize {itemsize}")
            payload = fh.read()
        expected = m * c * itemsize
        if len(payload) != expected:
            raise BankError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
        native = np.float32 if itemsize == 4 else np.float64
        arr = np.frombuffer(payload, dtype=f"<f{itemsize}").reshape(m, c).astype(native)
        return cls(torch.from_numpy(arr))


BankLike = Union[MemoryBank, torch.Tensor]


def _items(bank: BankLike) -> torch.Tensor:
    return bank.items if isinstance(bank, MemoryBank) else bank


@dataclass(frozen=True)
class AssignmentSets:
    """Nearest-item label per query; ``sets`` views the same partition as index sets."""

    labels: torch.Tensor
    num_items: int

    @property
    def sets(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_items)]
        for k, m in enumerate(self.labels.reshape(-1).tolist()):
            out[m].add(k)
        return out

    def mask(self, dtype=torch.float32) -> torch.Tensor:
        """``(..., M, K)`` indicator with entry (m, k) = 1 iff query k is in set m."""
        onehot = F.one_hot(self.labels, self.num_items).to(dtype)
        return onehot.transpose(-1, -2)


def correlate(bank: BankLike, queries: torch.Tensor, normalize_queries: bool = False) -> torch.Tensor:
    """Dot-product correlation map ``(..., K, M)``; entry (k, m) is ``p_m . q_k``."""
    items = _items(bank)
    if queries.shape[-1] != items.shape[-1]:
        raise BankError(
            f"query dim {queries.shape[-1]} does not match item dim {items.shape[-1]}"
        )
    _check_finite(queries, "queries")
    _check_finite(items, "memory items")
    if normalize_queries:
        queries = F.normalize(queries, dim=-1)
    return queries @ items.transpose(0, 1)


def match_weights(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over items for each query (rows of the ``K x M`` map)."""
    _check_finite(scores, "scores")
    return torch.softmax(scores, dim=-1)


def update_weights(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over queries for each item, returned as ``(..., M, K)``."""
    _check_finite(scores, "scores")
    return torch.softmax(scores, dim=-2).transpose(-1, -2)


def read(bank: BankLike, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination of items per query: ``(..., K, M) -> (..., K, C)``."""
    items = _items(bank)
    if weights.shape[-1] != items.shape[0]:
        raise BankError(
            f"weights cover {weights.shape[-1]} items but bank has {items.shape[0]}"
        )
    return weights @ items


def assign_queries(weights: torch.Tensor) -> AssignmentSets:
    # torch.argmax returns the first maximal index, i.e. the lowest item wins ties.
    return AssignmentSets(torch.argmax(weights, dim=-1), weights.shape[-1])


def update(
    bank: MemoryBank,
    queries: torch.Tensor,
    v: torch.Tensor,
    sets: AssignmentSets,
) -> MemoryBank:
    """Move each item toward its assigned queries and renormalize.

    ``queries`` is ``K x C``, ``v`` is ``M x K``. Items whose set is empty are
    copied unchanged.
    """
    items = bank.items.detach()
    queries = queries.detach()
    v = v.detach()
    if queries.ndim != 2 or v.ndim != 2:
        raise BankError("update expects flat K x C queries and M x K weights")
    K = queries.shape[0]
    if v.shape != (bank.M, K) or sets.labels.shape != (K,):
        raise BankError(
            f"inconsistent shapes: bank {tuple(items.shape)}, queries {tuple(queries.shape)}, "
            f"v {tuple(v.shape)}, labels {tuple(sets.labels.shape)}"
        )
    _check_finite(queries, "queries")
    mask = sets.mask(dtype=v.dtype)
    raw = items + (v * mask) @ queries.to(items.dtype)
    norms = raw.norm(dim=1)
    occupied = mask.sum(dim=1) > 0
    zero = occupied & (norms == 0)
    if zero.any():
        idx = int(torch.nonzero(zero)[0])
        raise BankError(f"update of memory item {idx} cancelled to the zero vector")
    new = torch.where(occupied[:, None], raw / norms.clamp_min(1e-30)[:, None], items)
    return MemoryBank(new.clone())


def distribution_histogram(sets: AssignmentSets) -> np.ndarray:
    """Number of queries assigned to each item."""
    return np.bincount(sets.labels.reshape(-1).cpu().numpy(), minlength=sets.num_items)


def uniform_supervision_loss(v: torch.Tensor) -> torch.Tensor:
    """MSE between update weights ``(..., M, K)`` and the uniform map ``1/K``."""
    K = v.shape[-1]
    return torch.mean((v - 1.0 / K) ** 2)


def nearest_items(bank: BankLike, queries: torch.Tensor, normalize_queries: bool = False):
    """Indices of nearest and second-nearest items by the dot-product ordering.

    Returns ``(first, second)``; ``second`` is ``None`` when M < 2.
    """
    scores = correlate(bank, queries, normalize_queries)
    first = torch.argmax(scores, dim=-1)
    if scores.shape[-1] < 2:
        return first, None
    masked = scores.masked_fill(F.one_hot(first, scores.shape[-1]).bool(), float("-inf"))
    second = torch.argmax(masked, dim=-1)
    return first, second
