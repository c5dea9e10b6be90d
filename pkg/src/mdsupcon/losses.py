"""Cross-entropy and supervised contrastive (SupCon) losses.

Both losses take a ``reduction`` of ``"sum"`` (the plain per-batch sum) or
``"mean"`` (sum divided by the number of rows). Optimisation defaults to
``"mean"`` so that a single learning rate works across batch sizes.

``supcon_loss_bruteforce`` is a deliberately naive double loop used as an
oracle; it shares no code with the vectorised path.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import DegenerateInputError, ShapeError, ValidationError
from .ndtensor import Tensor

logger = logging.getLogger(__name__)

# Number of anchor views seen with no positive partner; they contribute 0.
counters: Counter = Counter()

_REDUCTIONS = ("sum", "mean")


@dataclass
class SupConBatch:
    projections: Tensor
    labels: np.ndarray
    temperature: float

    def __post_init__(self):
        self.projections = nd.as_tensor(self.projections)
        self.labels = np.asarray(self.labels)
        z = self.projections
        if z.data.ndim != 2:
            raise ShapeError(f"projections must be 2-d, got {z.shape}")
        if z.shape[0] < 2:
            raise ShapeError("a contrastive batch needs at least two views")
        if self.labels.shape != (z.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {z.shape[0]} views")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


@dataclass
class CEBatch:
    logits: Tensor
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.logits = nd.as_tensor(self.logits)
        self.labels = np.asarray(self.labels)
        if self.logits.data.ndim != 2:
            raise ShapeError(f"logits must be 2-d, got {self.logits.shape}")
        if self.n_classes is None:
            self.n_classes = self.logits.shape[1]
        if self.logits.shape[1] != self.n_classes or self.n_classes < 2:
            raise ShapeError(f"logits have {self.logits.shape[1]} columns for K={self.n_classes}")
        if self.labels.shape != (self.logits.shape[0],):
            raise ShapeError("one label per logit row required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")


def _check_reduction(reduction: str) -> None:
    if reduction not in _REDUCTIONS:
        raise ValidationError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")


def cross_entropy(batch: CEBatch, reduction: str = "mean") -> Tensor:
    _check_reduction(reduction)
    s = batch.logits.data
    n = s.shape[0]
    rows = np.arange(n)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    denom = e.sum(axis=1, keepdims=True)
    log_probs = (s - m) - np.log(denom)
    total = -log_probs[rows, batch.labels].sum()
    div = n if reduction == "mean" else 1
    probs = e / denom

    def backward(g):
        d = probs.copy()
        d[rows, batch.labels] -= 1
        return (d * (g / div),)

    return nd._emit("cross_entropy", np.asarray(total / div, dtype=s.dtype), (batch.logits,), backward)


def positive_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


def _supcon_normalized(u: Tensor, labels: np.ndarray, temperature: float, reduction: str) -> Tensor:
    U = u.data
    n = U.shape[0]
    pos = positive_mask(labels)
    n_pos = pos.sum(axis=1)
    lonely = n_pos == 0
    if lonely.any():
        counters["singleton_views"] += int(lonely.sum())
        logger.debug("supcon: %d view(s) without a positive contribute 0", int(lonely.sum()))

    logits = (U @ U.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    denom = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    coef = np.where(lonely, 0.0, 1.0 / np.maximum(n_pos, 1)).astype(U.dtype)
    np.fill_diagonal(logits, 0.0)
    # -c_i * sum_j (s_ij - lse_i) == -c_i * sum_j s_ij + lse_i for anchors with positives
    per_view = -coef * np.sum(np.where(pos, logits, 0.0), axis=1) + np.where(lonely, 0.0, lse)
    div = n if reduction == "mean" else 1
    total = per_view.sum() / div
    soft = e / denom
    soft[lonely] = 0.0

    def backward(g):
        gs = (soft - coef[:, None] * pos) * (g / div)
        return (((gs + gs.T) @ U) / temperature,)

    return nd._emit("supcon", np.asarray(total, dtype=U.dtype), (u,), backward)


def supcon_loss(batch: SupConBatch, reduction: str = "mean") -> Tensor:
    _check_reduction(reduction)
    u = nd.l2_normalize(batch.projections)
    return _supcon_normalized(u, batch.labels, batch.temperature, reduction)


def supcon_loss_bruteforce(batch: SupConBatch) -> float:
    """Literal double-loop SupCon with sum reduction, in plain Python floats."""
    rows = [[float(v) for v in row] for row in np.asarray(batch.projections.data)]
    labels = [int(v) for v in batch.labels]
    tau = float(batch.temperature)
    n = len(rows)
    if n > 64:
        raise ValidationError("brute-force oracle is limited to 64 views")

    unit = []
    for row in rows:
        norm = math.sqrt(sum(v * v for v in row))
        if norm <= nd.NORM_EPS:
            raise DegenerateInputError("zero projection row")
        unit.append([v / norm for v in row])

    def sim(a, b):
        return sum(x * y for x, y in zip(unit[a], unit[b]))

    total = 0.0
    for i in range(n):
        same = sum(1 for k in range(n) if labels[k] == labels[i])
        if same - 1 == 0:
            continue
        denom = 0.0
        for k in range(n):
            if k != i:
                denom += math.exp(sim(i, k) / tau)
        acc = 0.0
        for j in range(n):
            if j != i and labels[j] == labels[i]:
                acc += math.log(math.exp(sim(i, j) / tau) / denom)
        total += -1.0 / (same - 1) * acc
    return total
