"""Two-stream MIL scoring over RoI features.

A shared trunk maps each RoI feature to a hidden vector; a classification
stream is softmaxed over classes and a detection stream over proposals, and
their product summed over proposals gives image-level class scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (axis_softmax, axis_softmax_backward, linear, linear_backward,
                      multilabel_bce, multilabel_bce_backward, relu)


@dataclass(frozen=True)
class MilParams:
    fc_w: tuple[np.ndarray, ...]  # shared trunk, each followed by ReLU
    fc_b: tuple[np.ndarray, ...]
    cls_w: np.ndarray  # (hidden, C)
    cls_b: np.ndarray
    det_w: np.ndarray  # (hidden, C)
    det_b: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]


@dataclass
class MilScores:
    x_cls: np.ndarray  # (C, R)
    x_det: np.ndarray  # (C, R)
    sigma_cls: np.ndarray  # softmax over classes, each column sums to 1
    sigma_det: np.ndarray  # softmax over proposals, each row sums to 1
    x_r: np.ndarray  # sigma_cls * sigma_det
    p: np.ndarray  # (C,) image scores


def trunk_forward(feats: np.ndarray, fc_w, fc_b):
    """Returns ``(hidden, pre_activations)``."""
    h = feats
    pres = []
    for w, b in zip(fc_w, fc_b):
        pre = linear(h, w, b)
        pres.append((h, pre))
        h = relu(pre)
    return h, pres


def trunk_backward(g: np.ndarray, fc_w, pres):
    """Returns ``(d_feats, d_fc_w, d_fc_b)``."""
    dws, dbs = [None] * len(fc_w), [None] * len(fc_w)
    for i in reversed(range(len(fc_w))):
        inp, pre = pres[i]
        g = g * (pre > 0)
        g, dws[i], dbs[i] = linear_backward(g, inp, fc_w[i])
    return g, tuple(dws), tuple(dbs)


def mil_scores(hidden: np.ndarray, p: MilParams) -> MilScores:
    if hidden.shape[0] == 0:
        raise ValueError("no proposals")
    x_cls = linear(hidden, p.cls_w, p.cls_b).T
    x_det = linear(hidden, p.det_w, p.det_b).T
    s_cls = axis_softmax(x_cls, 0)
    s_det = axis_softmax(x_det, 1)
    x_r = s_cls * s_det
    # the sum is at most 1 analytically; clamp away rounding overshoot
    return MilScores(x_cls, x_det, s_cls, s_det, x_r, np.clip(x_r.sum(axis=1), 0.0, 1.0))


def mil_forward(roi_feats: np.ndarray, p: MilParams):
    """Score proposals; returns ``(MilScores, hidden, trunk_cache)``."""
    roi_feats = np.asarray(roi_feats, dtype=np.float64)
    if roi_feats.ndim != 2 or roi_feats.shape[0] == 0:
        raise ValueError("no proposals")
    hidden, pres = trunk_forward(roi_feats, p.fc_w, p.fc_b)
    return mil_scores(hidden, p), hidden, pres


def mil_loss(scores: MilScores, labels: np.ndarray) -> float:
    return multilabel_bce(scores.p, labels)


def mil_scores_backward(g_p: np.ndarray, hidden: np.ndarray, scores: MilScores, p: MilParams):
    """Back-propagate d loss / d p to (d_hidden, d_cls_w, d_cls_b, d_det_w, d_det_b)."""
    g_xr = np.broadcast_to(g_p[:, None], scores.x_r.shape)
    g_xcls = axis_softmax_backward(g_xr * scores.sigma_det, scores.sigma_cls, 0)
    g_xdet = axis_softmax_backward(g_xr * scores.sigma_cls, scores.sigma_det, 1)
    dh1, dcw, dcb = linear_backward(g_xcls.T, hidden, p.cls_w)
    dh2, ddw, ddb = linear_backward(g_xdet.T, hidden, p.det_w)
    return dh1 + dh2, dcw, dcb, ddw, ddb


def mil_loss_backward(scores: MilScores, labels: np.ndarray, grad: float = 1.0) -> np.ndarray:
    return multilabel_bce_backward(scores.p, labels, grad)
