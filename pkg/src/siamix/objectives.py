"""Segmentation losses and confusion-count metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor

LOSS_KINDS = ("wce", "focal", "dice")
DICE_SMOOTH = 1.0


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    b, c, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[idx]} at pixel {idx} outside 0..{c - 1}")
    return labels.astype(np.int64)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) ints -> (B, N, H, W) indicator."""
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def _true_log_prob(logits: Tensor, labels: np.ndarray) -> Tensor:
    """log p of the labelled class at every pixel, shape (B, H, W)."""
    mask = T.Tensor(one_hot(labels, logits.shape[1], logits.dtype))
    return T.tsum(T.log_softmax(logits, axis=1) * mask, axis=1)


def weighted_cross_entropy(logits: Tensor, labels, class_weights: Sequence[float] | None = None) -> Tensor:
    labels = _check_labels(logits, labels)
    logp = _true_log_prob(logits, labels)
    if class_weights is None:
        return -T.mean(logp)
    wc = np.asarray(class_weights, dtype=np.float64)
    if wc.shape != (logits.shape[1],) or (wc <= 0).any():
        raise ConfigError(f"class weights must be {logits.shape[1]} positive values, got {list(wc)}")
    pix_w = T.Tensor(wc[labels].astype(logits.dtype))
    return -T.mean(logp * pix_w)


def focal_loss(logits: Tensor, labels, gamma: float = 2.0) -> Tensor:
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    labels = _check_labels(logits, labels)
    logp = _true_log_prob(logits, labels)
    if gamma == 0:
        return -T.mean(logp)
    # floor keeps d/dp (1-p)^gamma finite for gamma < 1 when p rounds to 1
    q = 1.0 - T.exp(logp)
    q = q + T.Tensor(np.where(q.data <= 0, np.finfo(q.dtype).tiny, 0).astype(q.dtype))
    return -T.mean(T.power(q, gamma) * logp)


def dice_loss(logits: Tensor, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Global soft dice on the foreground; classes 1..N-1 averaged when N > 2."""
    labels = _check_labels(logits, labels)
    n = logits.shape[1]
    probs = T.softmax(logits, axis=1)
    y = one_hot(labels, n, logits.dtype)
    losses = []
    for c in range(1, n):
        p = probs[:, c]
        inter = T.tsum(p * T.Tensor(y[:, c]))
        denom = T.tsum(p) + float(y[:, c].sum()) + smooth
        losses.append(1.0 - (2.0 * inter + smooth) / denom)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total / float(len(losses))


@dataclass(frozen=True)
class LossSpec:
    components: tuple[tuple[str, float], ...] = (("dice", 1.0), ("focal", 1.0))
    class_weights: tuple[float, ...] | None = None
    gamma: float = 2.0

    def __post_init__(self):
        if not self.components:
            raise ConfigError("loss spec needs at least one component")
        for kind, weight in self.components:
            if kind not in LOSS_KINDS:
                raise ConfigError(f"unknown loss component {kind!r}; choose from {LOSS_KINDS}")
            if weight < 0:
                raise ConfigError(f"loss weight for {kind} is negative")
        if all(w == 0 for _, w in self.components):
            raise ConfigError("all loss weights are zero")
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "LossSpec":
        """``"dice:1,focal:1"`` -> LossSpec."""
        comps = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            kind, _, weight = part.partition(":")
            try:
                comps.append((kind.strip(), float(weight) if weight else 1.0))
            except ValueError as exc:
                raise ConfigError(f"bad loss weight in {part!r}") from exc
        return cls(tuple(comps), **kwargs)


def composite_loss(spec: LossSpec, logits: Tensor, labels) -> Tensor:
    total = None
    for kind, weight in spec.components:
        if weight == 0:
            continue
        if kind == "wce":
            term = weighted_cross_entropy(logits, labels, spec.class_weights)
        elif kind == "focal":
            term = focal_loss(logits, labels, spec.gamma)
        else:
            term = dice_loss(logits, labels)
        term = term * weight if weight != 1 else term
        total = term if total is None else total + term
    return total


def inverse_frequency_weights(labels: Iterable[np.ndarray], num_classes: int) -> tuple[float, ...]:
    """Per-class 1/frequency over a label collection, rescaled to mean 1.

    Absent classes get the largest observed weight rather than infinity.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    if counts.sum() == 0:
        raise DataError("no labelled pixels to derive class weights from")
    present = counts > 0
    inv = np.zeros(num_classes)
    inv[present] = counts.sum() / counts[present]
    inv[~present] = inv[present].max()
    return tuple(float(v) for v in inv / inv.mean())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError(f"negative confusion count: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion_counts(pred, labels, cls: int = 1) -> ConfusionCounts:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ShapeError(f"prediction {pred.shape} and labels {labels.shape} differ in shape")
    p, y = pred == cls, labels == cls
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


@dataclass(frozen=True)
class Score:
    f1: float
    iou: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.f1, self.iou))


def f1_iou(counts: ConfusionCounts) -> Score:
    """F1 = 2TP/(2TP+FP+FN), IoU = TP/(TP+FP+FN); both 0 and flagged if undefined."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return Score(0.0, 0.0, degenerate=True)
    return Score(2 * counts.tp / denom, counts.tp / (counts.tp + counts.fp + counts.fn))


def mean_scores(scores: Sequence[Score]) -> Score:
    if not scores:
        raise ContractError("no scores to average")
    return Score(
        float(np.mean([s.f1 for s in scores])),
        float(np.mean([s.iou for s in scores])),
        degenerate=any(s.degenerate for s in scores),
    )


@dataclass
class MetricsReport:
    """Accumulates per-class confusion counts across batches."""

    num_classes: int
    counts: list[ConfusionCounts] = field(default_factory=list)

    def __post_init__(self):
        if not self.counts:
            self.counts = [ConfusionCounts(0, 0, 0, 0) for _ in range(self.num_classes)]

    def update(self, pred, labels) -> None:
        for c in range(self.num_classes):
            self.counts[c] = self.counts[c] + confusion_counts(pred, labels, c)

    def score(self, cls: int) -> Score:
        return f1_iou(self.counts[cls])

    @property
    def building(self) -> Score:
        """Foreground-class score (class 1)."""
        return self.score(1)

    @property
    def class_mean(self) -> Score:
        return mean_scores([self.score(c) for c in range(self.num_classes)])

    def rows(self) -> list[dict]:
        out = []
        for c, k in enumerate(self.counts):
            s = f1_iou(k)
            out.append({"class": c, "TP": k.tp, "FP": k.fp, "FN": k.fn, "TN": k.tn, "F1": s.f1, "IoU": s.iou})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["class", "TP", "FP", "FN", "TN", "F1", "IoU"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()
