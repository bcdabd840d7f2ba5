"""The full network: backbone -> guided attention -> RoI pool -> MIL -> refinement -> detection head.

Parameters live in a flat ``dict[str, ndarray]`` (``ModelParams``) so the
optimiser and checkpoint code can treat them uniformly. ``forward`` computes
every active loss for one image view and keeps a cache that ``backward``
turns into a gradient dict with the same keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np

from . import attention as att
from .detection import (DetParams, PseudoGT, assign_rois, composite_loss, det_forward,
                        det_loss, det_loss_backward, mine_pseudo_gt)
from .mil import MilParams, mil_loss, mil_loss_backward, mil_scores, mil_scores_backward, trunk_backward, trunk_forward
from .numeric import axis_softmax_backward, linear_backward, weighted_ce_backward
from .refine import SupervisionSet, mine_supervision, refine_forward, refine_loss

ModelParams = Dict[str, np.ndarray]

MODES = ("joint", "mil_only", "mil_gam", "two_phase")


@dataclass(frozen=True)
class Heads:
    """Which loss terms are live for a forward pass."""

    gam: bool = True  # attention applied to features
    img: bool = True  # L_img_cls
    mil: bool = True
    refine: bool = True
    det: bool = True

    @classmethod
    def for_mode(cls, mode: str, phase: str = "A") -> "Heads":
        if mode == "joint":
            return cls()
        if mode == "mil_only":
            return cls(gam=False, img=False, refine=False, det=False)
        if mode == "mil_gam":
            return cls(refine=False, det=False)
        if mode == "two_phase":
            if phase == "A":
                return cls(det=False)
            return cls(img=False, mil=False, refine=False)
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    num_classes: int
    backbone_layers: int = 0
    roi_grid: tuple[int, int] = (2, 2)
    hidden: tuple[int, ...] = (64,)
    k_stages: int = 3
    init_std: float = 0.01
    seed: int = 0

    @property
    def roi_dim(self) -> int:
        return self.roi_grid[0] * self.roi_grid[1] * self.depth


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Gaussian(0, init_std) for the new heads; He-scaled trunk and identity backbone.

    The backbone and the shared fully connected trunk stand in for pretrained
    layers, so they start from a well-conditioned point rather than near zero.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, c, s = cfg.depth, cfg.num_classes, cfg.init_std
    p: ModelParams = {}
    bb = att.BackboneParams.identity(d, cfg.backbone_layers)
    for i, (w, b) in enumerate(zip(bb.weights, bb.biases)):
        p[f"backbone.conv{i}.w"] = w + s * rng.standard_normal(w.shape)
        p[f"backbone.conv{i}.b"] = b
    p["gam.gate_w"] = s * rng.standard_normal((d, d))
    p["gam.gate_b"] = np.zeros(d)
    p["gam.cls_w"] = s * rng.standard_normal((d, c))
    p["gam.cls_b"] = np.zeros(c)
    fan_in = cfg.roi_dim
    for i, h in enumerate(cfg.hidden):
        p[f"mil.fc{i}.w"] = rng.standard_normal((fan_in, h)) * np.sqrt(2.0 / fan_in)
        p[f"mil.fc{i}.b"] = np.zeros(h)
        fan_in = h
    hid = cfg.hidden[-1] if cfg.hidden else cfg.roi_dim
    p["mil.cls.w"] = s * rng.standard_normal((hid, c))
    p["mil.cls.b"] = np.zeros(c)
    p["mil.det.w"] = s * rng.standard_normal((hid, c))
    p["mil.det.b"] = np.zeros(c)
    for k in range(cfg.k_stages):
        p[f"refine{k}.w"] = s * rng.standard_normal((hid, c + 1))
        p[f"refine{k}.b"] = np.zeros(c + 1)
    p.update(init_det_params(cfg, rng))
    return p


def init_det_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    hid = cfg.hidden[-1] if cfg.hidden else cfg.roi_dim
    c, s = cfg.num_classes, cfg.init_std
    return {
        "det.trunk.w": rng.standard_normal((hid, hid)) * np.sqrt(2.0 / hid),
        "det.trunk.b": np.zeros(hid),
        "det.cls.w": s * rng.standard_normal((hid, c + 1)),
        "det.cls.b": np.zeros(c + 1),
        "det.reg.w": 0.1 * s * rng.standard_normal((hid, 4 * c)),
        "det.reg.b": np.zeros(4 * c),
    }


def backbone_params(p: ModelParams) -> att.BackboneParams:
    n = sum(1 for k in p if k.startswith("backbone.") and k.endswith(".w"))
    return att.BackboneParams(tuple(p[f"backbone.conv{i}.w"] for i in range(n)),
                              tuple(p[f"backbone.conv{i}.b"] for i in range(n)))


def attention_params(p: ModelParams) -> att.AttentionParams:
    return att.AttentionParams(p["gam.gate_w"], p["gam.gate_b"], p["gam.cls_w"], p["gam.cls_b"])


def mil_params(p: ModelParams) -> MilParams:
    n = sum(1 for k in p if k.startswith("mil.fc") and k.endswith(".w"))
    return MilParams(tuple(p[f"mil.fc{i}.w"] for i in range(n)), tuple(p[f"mil.fc{i}.b"] for i in range(n)),
                     p["mil.cls.w"], p["mil.cls.b"], p["mil.det.w"], p["mil.det.b"])


def det_params(p: ModelParams) -> DetParams:
    return DetParams(p["det.trunk.w"], p["det.trunk.b"], p["det.cls.w"], p["det.cls.b"],
                     p["det.reg.w"], p["det.reg.b"])


def num_stages(p: ModelParams) -> int:
    return sum(1 for k in p if k.startswith("refine") and k.endswith(".w"))


class LossBreakdown(NamedTuple):
    img_cls: float
    mil: float
    refine: float
    det: float
    total: float


@dataclass
class Cache:
    heads: Heads
    labels: np.ndarray
    proposals: np.ndarray
    raw: np.ndarray
    backbone: list
    feat: np.ndarray
    attn: Optional[att.AttentionOutput]
    enhanced: np.ndarray
    roi_argmax: np.ndarray
    roi_feats: np.ndarray
    trunk: list
    hidden: np.ndarray
    mil: Optional[object] = None
    stage_probs: list = field(default_factory=list)
    stage_sup: list = field(default_factory=list)
    det: Optional[object] = None
    det_sup: Optional[SupervisionSet] = None
    pseudo_gt: Optional[PseudoGT] = None
    lam: float = 1.0

    def signature(self) -> tuple:
        """Discrete decisions taken by the forward pass (used to detect kinks)."""
        parts = [self.roi_argmax.tobytes(), (self.hidden > 0).tobytes()]
        for _, pre in self.trunk:
            parts.append((pre > 0).tobytes())
        for pre, _ in self.backbone[1:]:
            parts.append((pre > 0).tobytes())
        if self.attn is not None:
            parts.append((self.attn.pre > 0).tobytes())
        for s in self.stage_sup:
            parts.append(s.labels.tobytes())
        if self.det_sup is not None:
            parts.append(self.det_sup.labels.tobytes())
            fg = self.det_sup.foreground
            res = self.det.deltas[fg, self.det_sup.labels[fg]] - self.det_sup.targets[fg]
            parts.append((np.abs(res) < 1).tobytes())
            parts.append((self.det.trunk_pre > 0).tobytes())
        return tuple(parts)


def embed(p: ModelParams, raw: np.ndarray, proposals: np.ndarray, grid: tuple[int, int], gam: bool):
    """Backbone, optional attention and RoI pooling; returns the first part of a Cache."""
    feat, bb_cache = att.backbone_forward(raw, backbone_params(p))
    attn = att.guided_attention(feat, attention_params(p)) if gam else None
    enhanced = attn.enhanced if attn is not None else feat
    roi_feats, roi_arg = att.roi_pool_many(enhanced, proposals, grid)
    hidden, trunk = trunk_forward(roi_feats, mil_params(p).fc_w, mil_params(p).fc_b)
    return feat, bb_cache, attn, enhanced, roi_feats, roi_arg, hidden, trunk


def forward(p: ModelParams, raw: np.ndarray, proposals: np.ndarray, labels: np.ndarray,
            heads: Heads, grid: tuple[int, int] = (2, 2), iou_pos: float = 0.5,
            fg_iou: float = 0.5, lam: float = 1.0,
            fixed_pgt: Optional[PseudoGT] = None,
            fixed_stage_sup: Optional[list[SupervisionSet]] = None) -> tuple[LossBreakdown, Cache]:
    """Losses for one image view.

    Supervision mined between stages (refinement labels, pseudo-GT) is held
    as constant arrays; ``backward`` never differentiates through it.
    ``fixed_pgt`` replaces online pseudo-GT mining (two-phase baseline);
    ``fixed_stage_sup`` replaces refinement mining (gradient checks).
    """
    labels = np.asarray(labels, dtype=np.float64)
    proposals = np.asarray(proposals, dtype=np.float64)
    feat, bb_cache, attn, enhanced, roi_feats, roi_arg, hidden, trunk = embed(
        p, raw, proposals, grid, heads.gam)
    cache = Cache(heads, labels, proposals, np.asarray(raw, dtype=np.float64), bb_cache, feat, attn,
                  enhanced, roi_arg, roi_feats, trunk, hidden, lam=lam)

    l_img = att.gam_loss(attn.class_scores, labels) if heads.img and attn is not None else 0.0
    l_mil = l_ref = l_det = 0.0
    need_mil = heads.mil or heads.refine or (heads.det and fixed_pgt is None)
    if need_mil:
        cache.mil = mil_scores(hidden, mil_params(p))
        if heads.mil:
            l_mil = mil_loss(cache.mil, labels)
    k_total = num_stages(p)
    if heads.refine or (heads.det and fixed_pgt is None):
        prev = cache.mil.x_r.T
        for k in range(k_total):
            probs = refine_forward(hidden, p[f"refine{k}.w"], p[f"refine{k}.b"])
            if fixed_stage_sup is not None:
                sup = fixed_stage_sup[k]
            else:
                sup = mine_supervision(prev, labels, proposals, iou_pos)
            cache.stage_probs.append(probs)
            cache.stage_sup.append(sup)
            if heads.refine:
                l_ref += refine_loss(probs, sup)
            prev = probs
    if heads.det:
        if fixed_pgt is not None:
            pgt = fixed_pgt
        else:
            final = cache.stage_probs[-1] if cache.stage_probs else cache.mil.x_r.T
            pgt = mine_pseudo_gt(final, labels, proposals)
        cache.pseudo_gt = pgt
        cache.det = det_forward(hidden, det_params(p))
        cache.det_sup = assign_rois(proposals, pgt, fg_iou)
        l_det = det_loss(cache.det.probs, cache.det.deltas, cache.det_sup, lam).total
    total = composite_loss(l_img, l_mil, l_ref, l_det)
    return LossBreakdown(l_img, l_mil, l_ref, l_det, total), cache


def backward(p: ModelParams, cache: Cache) -> ModelParams:
    """Gradient of the forward pass's total loss w.r.t. every parameter (zeros where inactive)."""
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    heads = cache.heads
    g_hidden = np.zeros_like(cache.hidden)

    if heads.mil:
        mp = mil_params(p)
        g_p = mil_loss_backward(cache.mil, cache.labels)
        dh, grads["mil.cls.w"], grads["mil.cls.b"], grads["mil.det.w"], grads["mil.det.b"] = \
            mil_scores_backward(g_p, cache.hidden, cache.mil, mp)
        g_hidden += dh

    if heads.refine:
        for k, (probs, sup) in enumerate(zip(cache.stage_probs, cache.stage_sup)):
            g_probs = weighted_ce_backward(probs, sup.labels, sup.weights)
            g_logit = axis_softmax_backward(g_probs, probs, 1)
            dh, grads[f"refine{k}.w"], grads[f"refine{k}.b"] = linear_backward(
                g_logit, cache.hidden, p[f"refine{k}.w"])
            g_hidden += dh

    if heads.det:
        det = cache.det
        g_probs, g_deltas = det_loss_backward(det.probs, det.deltas, cache.det_sup, cache.lam)
        g_logit = axis_softmax_backward(g_probs, det.probs, 1)
        dt1, grads["det.cls.w"], grads["det.cls.b"] = linear_backward(g_logit, det.trunk, p["det.cls.w"])
        dt2, grads["det.reg.w"], grads["det.reg.b"] = linear_backward(
            g_deltas.reshape(len(det.trunk), -1), det.trunk, p["det.reg.w"])
        g_pre = (dt1 + dt2) * (det.trunk_pre > 0)
        dh, grads["det.trunk.w"], grads["det.trunk.b"] = linear_backward(g_pre, cache.hidden, p["det.trunk.w"])
        g_hidden += dh

    mp = mil_params(p)
    g_roi, dws, dbs = trunk_backward(g_hidden, mp.fc_w, cache.trunk)
    for i, (dw, db) in enumerate(zip(dws, dbs)):
        grads[f"mil.fc{i}.w"], grads[f"mil.fc{i}.b"] = dw, db
    g_enh = att.roi_pool_backward(g_roi, cache.roi_argmax, cache.enhanced.shape)

    if cache.attn is not None:
        g_scores = att.gam_loss_backward(cache.attn.class_scores, cache.labels) if heads.img else None
        g_feat, grads["gam.gate_w"], grads["gam.gate_b"], grads["gam.cls_w"], grads["gam.cls_b"] = \
            att.guided_attention_backward(g_enh, g_scores, cache.feat, attention_params(p), cache.attn)
    else:
        g_feat = g_enh

    bb = backbone_params(p)
    if bb.num_layers:
        _, dws, dbs = att.backbone_backward(g_feat, bb, cache.backbone)
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            grads[f"backbone.conv{i}.w"], grads[f"backbone.conv{i}.b"] = dw, db
    return grads


@dataclass
class Prediction:
    """Per-proposal outputs for one view, in that view's coordinates."""

    scores: np.ndarray  # (R, C) foreground class scores
    boxes: np.ndarray  # (R, C, 4)
    probs: Optional[np.ndarray] = None  # (R, C+1) when the detection head produced them


def predict(p: ModelParams, raw: np.ndarray, proposals: np.ndarray, heads: Heads,
            grid: tuple[int, int] = (2, 2)) -> Prediction:
    """Inference scores and boxes for every proposal.

    With a detection head the scores are its class probabilities and boxes
    are regressed; otherwise the MIL fused scores score the raw proposals.
    """
    from .detection import decode_boxes

    proposals = np.asarray(proposals, dtype=np.float64)
    *_, hidden, _ = embed(p, raw, proposals, grid, heads.gam)
    c = p["mil.cls.w"].shape[1]
    if heads.det:
        out = det_forward(hidden, det_params(p))
        boxes = decode_boxes(proposals[:, None, :], out.deltas)
        return Prediction(out.probs[:, :c], boxes, out.probs)
    scores = mil_scores(hidden, mil_params(p)).x_r.T
    boxes = np.broadcast_to(proposals[:, None, :], (len(proposals), c, 4)).copy()
    return Prediction(scores, boxes)
