"""Pseudo-GT supervised detection head: (C+1)-way classification plus per-class box regression."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .boxes import Box, iou_matrix
from .numeric import (axis_softmax, linear, relu, smooth_l1, smooth_l1_backward,
                      weighted_ce, weighted_ce_backward)
from .refine import SupervisionSet, UnlabeledImage


@dataclass(frozen=True)
class PseudoGT:
    classes: np.ndarray  # (G,) int, unique
    boxes: np.ndarray  # (G, 4)
    confidence: np.ndarray  # (G,) in [0, 1]
    num_classes: int
    proposal_index: Optional[np.ndarray] = None  # (G,) which proposal was picked

    def __len__(self) -> int:
        return len(self.classes)

    def items(self) -> list[tuple[int, Box, float]]:
        return [(int(c), Box.from_seq(b), float(s))
                for c, b, s in zip(self.classes, self.boxes, self.confidence)]


def mine_pseudo_gt(final_probs: np.ndarray, labels: np.ndarray, proposals: np.ndarray) -> PseudoGT:
    """Top-scoring proposal per present class (lowest index on ties)."""
    labels = np.asarray(labels)
    present = np.flatnonzero(labels > 0)
    if present.size == 0:
        raise UnlabeledImage()
    picks = np.asarray(final_probs)[:, present].argmax(axis=0)
    conf = np.clip(final_probs[picks, present], 0.0, 1.0)
    return PseudoGT(present.astype(np.int64), np.asarray(proposals, dtype=np.float64)[picks].copy(),
                    conf, labels.shape[0], picks)


# --------------------------------------------------------------------------
# box parameterisation

def _centers(b: np.ndarray):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorised ``(tx, ty, tw, th)`` of ``gt`` relative to ``proposals``."""
    px, py, pw, ph = _centers(np.asarray(proposals, dtype=np.float64))
    gx, gy, gw, gh = _centers(np.asarray(gt, dtype=np.float64))
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("non-positive box size")
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_boxes(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_boxes``; ``deltas`` broadcasts against proposals' leading dims."""
    px, py, pw, ph = _centers(np.asarray(proposals, dtype=np.float64))
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("non-positive box size")
    deltas = np.asarray(deltas, dtype=np.float64)
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * np.exp(deltas[..., 2])
    h = ph * np.exp(deltas[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(proposal: Box, gt: Box) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(proposal.as_array(), gt.as_array()))


def decode_box(proposal: Box, delta) -> Box:
    return Box.from_seq(decode_boxes(proposal.as_array(), np.asarray(delta, dtype=np.float64)))


# --------------------------------------------------------------------------
# assignment

def assign_rois(proposals: np.ndarray, pgt: PseudoGT, fg_iou: float = 0.5) -> SupervisionSet:
    """Match each proposal to its highest-IoU pseudo-GT (first on ties).

    Matches at IoU >= ``fg_iou`` become foreground with the pseudo-GT's class,
    confidence as weight and an encoded regression target; the rest are
    background weighted by the largest pseudo-GT confidence.
    """
    if len(pgt) == 0:
        raise ValueError("empty pseudo-GT")
    if not 0 < fg_iou < 1:
        raise ValueError("fg_iou must lie in (0, 1)")
    proposals = np.asarray(proposals, dtype=np.float64)
    r = len(proposals)
    overlaps = iou_matrix(proposals, pgt.boxes)
    best = overlaps.argmax(axis=1)
    fg = overlaps[np.arange(r), best] >= fg_iou

    labels = np.full(r, pgt.num_classes, dtype=np.int64)
    labels[fg] = pgt.classes[best[fg]]
    weights = np.full(r, pgt.confidence.max())
    weights[fg] = pgt.confidence[best[fg]]
    targets = np.full((r, 4), np.nan)
    if fg.any():
        targets[fg] = encode_boxes(proposals[fg], pgt.boxes[best[fg]])
    return SupervisionSet(labels, weights, pgt.num_classes, targets, np.where(fg, best, -1))


# --------------------------------------------------------------------------
# head

@dataclass(frozen=True)
class DetParams:
    trunk_w: np.ndarray  # (hidden, hidden), followed by ReLU
    trunk_b: np.ndarray
    cls_w: np.ndarray  # (hidden, C+1)
    cls_b: np.ndarray
    reg_w: np.ndarray  # (hidden, 4C)
    reg_b: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.reg_w.shape[1] // 4


@dataclass
class DetOutput:
    probs: np.ndarray  # (R, C+1)
    deltas: np.ndarray  # (R, C, 4)
    trunk_pre: np.ndarray
    trunk: np.ndarray


def det_forward(hidden: np.ndarray, p: DetParams) -> DetOutput:
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ValueError("no proposals")
    if p.trunk_w.shape[0] != hidden.shape[1]:
        raise ValueError(f"shape mismatch: trunk {p.trunk_w.shape} for hidden {hidden.shape}")
    if p.cls_w.shape[1] != p.num_classes + 1:
        raise ValueError("shape mismatch: classifier must have C+1 outputs for 4C regression outputs")
    pre = linear(hidden, p.trunk_w, p.trunk_b)
    t = relu(pre)
    probs = axis_softmax(linear(t, p.cls_w, p.cls_b), 1)
    deltas = linear(t, p.reg_w, p.reg_b).reshape(len(hidden), p.num_classes, 4)
    return DetOutput(probs, deltas, pre, t)


class DetLoss(NamedTuple):
    total: float
    cls: float
    loc: float


def _fg_residuals(deltas: np.ndarray, sup: SupervisionSet):
    fg = np.flatnonzero(sup.foreground)
    if fg.size and (sup.targets is None or np.any(~np.isfinite(sup.targets[fg]))):
        raise ValueError("foreground RoI missing regression target")
    if fg.size == 0:
        return fg, np.zeros((0, 4))
    return fg, deltas[fg, sup.labels[fg]] - sup.targets[fg]


def det_loss(probs: np.ndarray, deltas: np.ndarray, sup: SupervisionSet, lam: float = 1.0) -> DetLoss:
    """Weighted (C+1)-way cross-entropy plus ``lam`` times mean smooth-L1 over foreground RoIs."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    r = len(sup.labels)
    if probs.shape != (r, sup.num_classes + 1) or deltas.shape != (r, sup.num_classes, 4):
        raise ValueError(f"shape mismatch: probs {probs.shape}, deltas {deltas.shape} "
                         f"for {r} RoIs and {sup.num_classes} classes")
    l_cls = weighted_ce(probs, sup.labels, sup.weights)
    fg, res = _fg_residuals(deltas, sup)
    l_loc = float(smooth_l1(res).sum() / fg.size) if fg.size else 0.0
    return DetLoss(l_cls + lam * l_loc, l_cls, l_loc)


def det_loss_backward(probs: np.ndarray, deltas: np.ndarray, sup: SupervisionSet,
                      lam: float = 1.0, grad: float = 1.0):
    """Returns (d_probs, d_deltas)."""
    g_probs = weighted_ce_backward(probs, sup.labels, sup.weights, grad)
    g_deltas = np.zeros_like(deltas)
    fg, res = _fg_residuals(deltas, sup)
    if fg.size:
        g_deltas[fg, sup.labels[fg]] = smooth_l1_backward(grad * lam / fg.size, res)
    return g_probs, g_deltas


def composite_loss(l_img: float, l_mil: float, l_refine: float, l_det: float) -> float:
    """Plain sum of the four training objectives."""
    parts = (l_img, l_mil, l_refine, l_det)
    for name, v in zip(("L_img_cls", "L_mil", "L_refine", "L_det"), parts):
        if not np.isfinite(v):
            raise ValueError(f"{name} is not finite: {v}")
        if v < 0:
            raise ValueError(f"{name} is negative ({v}); an upstream loss is wrong")
    return l_img + l_mil + l_refine + l_det
