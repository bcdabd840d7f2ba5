"""Online instance classifier refinement.

Each stage is a (C+1)-way proposal classifier (background last) supervised by
labels mined from the previous stage's scores. Mined labels are plain arrays,
so no gradient reaches the stage that produced them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .boxes import iou_matrix
from .numeric import axis_softmax, linear, weighted_ce


class UnlabeledImage(ValueError):
    def __init__(self, msg: str = "unlabeled image"):
        super().__init__(msg)


@dataclass(frozen=True)
class SupervisionSet:
    """Per-proposal targets.

    ``labels[r]`` is a class index in ``0..C`` with ``C`` meaning background.
    ``targets`` holds regression targets for foreground rows (NaN elsewhere)
    when the set came from pseudo-GT assignment.
    """

    labels: np.ndarray  # (R,) int
    weights: np.ndarray  # (R,) in [0, 1]
    num_classes: int
    targets: Optional[np.ndarray] = None  # (R, 4)
    matched: Optional[np.ndarray] = None  # (R,) index of the seed / pseudo-GT, -1 if none

    @property
    def foreground(self) -> np.ndarray:
        return self.labels < self.num_classes

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_classes + 1))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out


def refine_forward(hidden: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise softmax over C+1 classes; ``w`` is ``(hidden, C+1)``."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ValueError("no proposals")
    if w.shape[0] != hidden.shape[1] or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: stage {w.shape}/{b.shape} for hidden {hidden.shape}")
    return axis_softmax(linear(hidden, w, b), 1)


def mine_supervision(prev_scores: np.ndarray, labels: np.ndarray, proposals: np.ndarray,
                     iou_pos: float = 0.5) -> SupervisionSet:
    """Label proposals from the previous stage's per-class scores.

    ``prev_scores`` is ``(R, C)`` (MIL fused scores, transposed) or
    ``(R, C+1)`` (a refinement stage; the background column is dropped).
    For each present class the top-scoring proposal is the seed; proposals
    with IoU >= ``iou_pos`` to a seed take its class and the seed's score as
    weight, the strongest seed winning where neighbourhoods overlap. All other
    proposals are background, weighted by the strongest seed score.
    """
    labels = np.asarray(labels)
    c = labels.shape[0]
    scores = np.asarray(prev_scores, dtype=np.float64)
    if scores.shape[1] == c + 1:
        scores = scores[:, :c]
    if scores.shape[1] != c:
        raise ValueError(f"shape mismatch: scores {prev_scores.shape} for {c} classes")
    if not 0 < iou_pos < 1:
        raise ValueError("iou_pos must lie in (0, 1)")
    present = np.flatnonzero(labels > 0)
    if present.size == 0:
        raise UnlabeledImage()

    seeds = scores[:, present].argmax(axis=0)
    seed_scores = scores[seeds, present]
    overlaps = iou_matrix(proposals, proposals[seeds])  # (R, P)
    covered = overlaps >= iou_pos
    # strongest covering seed per proposal; argmax picks the lowest class index on ties
    ranked = np.where(covered, seed_scores[None, :], -np.inf)
    best = ranked.argmax(axis=1)
    fg = covered.any(axis=1)

    r = scores.shape[0]
    out_labels = np.full(r, c, dtype=np.int64)
    out_labels[fg] = present[best[fg]]
    weights = np.full(r, seed_scores.max())
    weights[fg] = seed_scores[best[fg]]
    matched = np.where(fg, best, -1)
    return SupervisionSet(out_labels, np.clip(weights, 0.0, 1.0), c, matched=matched)


def refine_loss(probs: np.ndarray, sup: SupervisionSet) -> float:
    if probs.shape != (len(sup.labels), sup.num_classes + 1):
        raise ValueError(f"shape mismatch: probs {probs.shape} vs {len(sup.labels)} proposals, "
                         f"{sup.num_classes + 1} classes")
    return weighted_ce(probs, sup.labels, sup.weights)
