"""Detection post-processing and PASCAL-style metrics: NMS, AP/mAP and CorLoc."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .boxes import Box, Detection, iou, iou_matrix

__all__ = ["iou", "nms", "nms_indices", "average_precision", "corloc", "top_detections",
           "MetricReport", "evaluate", "format_report"]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Equal scores keep input order. A box is suppressed by a kept box when
    their IoU is >= ``iou_thresh``.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive &= overlaps[i] < iou_thresh
    return keep


def nms(dets: Sequence[Detection], iou_thresh: float = 0.3) -> list[Detection]:
    if not dets:
        if not 0 < iou_thresh < 1:
            raise ValueError("iou_thresh must lie in (0, 1)")
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


def _match(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]], iou_thresh: float):
    """VOC greedy matching; returns the TP flag of each detection in ranked order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_arr = {k: np.array([b.as_array() for b in v]).reshape(-1, 4) for k, v in gts.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arr.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        g = gt_arr.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(d.box.as_array(), g)[0]
        j = int(ov.argmax())
        if ov[j] >= iou_thresh and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[rank] = True
    return tp


def average_precision(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]],
                      iou_thresh: float = 0.5, mode: str = "continuous") -> Optional[float]:
    """AP of one class. ``gts`` maps image id to that class's GT boxes.

    Returns None when the class has no GT boxes. ``mode`` is ``continuous``
    (area under the precision envelope) or ``elevenpoint``.
    """
    if mode not in ("continuous", "elevenpoint"):
        raise ValueError(f"unknown AP mode {mode!r}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    tp = _match(dets, gts, iou_thresh)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, 1)
    if mode == "elevenpoint":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            mask = rec >= t - 1e-12
            ap += (prec[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def top_detections(dets: Mapping[str, Sequence[Detection]]) -> dict[tuple[str, int], Box]:
    """Best-scored box per (image, class); earlier detections win ties."""
    best: dict[tuple[str, int], Detection] = {}
    for image_id, items in dets.items():
        for d in items:
            key = (image_id, d.cls)
            if key not in best or d.score > best[key].score:
                best[key] = d
    return {k: v.box for k, v in best.items()}


def corloc(top_dets: Mapping[tuple[str, int], Box],
           gts: Mapping[str, Sequence[tuple[int, Box]]]) -> dict[int, float]:
    """Per-class fraction of positive images whose top box has IoU > 0.5 with a GT of that class.

    Classes with no positive image are left out.
    """
    hits: dict[int, int] = defaultdict(int)
    total: dict[int, int] = defaultdict(int)
    for image_id, items in gts.items():
        by_class: dict[int, list[Box]] = defaultdict(list)
        for c, b in items:
            by_class[c].append(b)
        for c, boxes in by_class.items():
            total[c] += 1
            top = top_dets.get((image_id, c))
            if top is not None and max(iou(top, b) for b in boxes) > 0.5:
                hits[c] += 1
    return {c: hits[c] / total[c] for c in sorted(total)}


@dataclass
class MetricReport:
    ap: dict[int, Optional[float]] = field(default_factory=dict)
    map: Optional[float] = None
    corloc: dict[int, float] = field(default_factory=dict)
    mean_corloc: Optional[float] = None
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    class_names: Sequence[str] = ()
    ap_mode: str = "continuous"

    def to_json(self) -> str:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        for key in ("ap", "corloc", "tp", "fp"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=2)


def evaluate(dets: Mapping[str, Sequence[Detection]],
             gts: Mapping[str, Sequence[tuple[int, Box]]], num_classes: int,
             what: Iterable[str] = ("map", "corloc"), iou_thresh: float = 0.5,
             ap_mode: str = "continuous", class_names: Sequence[str] = ()) -> MetricReport:
    """AP/mAP and/or CorLoc over the images in ``gts``."""
    what = set(what)
    rep = MetricReport(class_names=tuple(class_names), ap_mode=ap_mode)
    if "map" in what:
        for c in range(num_classes):
            cls_dets = [d for image_id in gts for d in dets.get(image_id, ()) if d.cls == c]
            cls_gts = {k: [b for cc, b in v if cc == c] for k, v in gts.items()}
            rep.ap[c] = average_precision(cls_dets, cls_gts, iou_thresh, ap_mode)
            if rep.ap[c] is not None:
                tp = _match(cls_dets, cls_gts, iou_thresh)
                rep.tp[c], rep.fp[c] = int(tp.sum()), int((~tp).sum())
        present = [v for v in rep.ap.values() if v is not None]
        rep.map = float(np.mean(present)) if present else None
    if "corloc" in what:
        rep.corloc = corloc(top_detections({k: dets.get(k, []) for k in gts}), gts)
        rep.mean_corloc = float(np.mean(list(rep.corloc.values()))) if rep.corloc else None
    return rep


def format_report(rep: MetricReport) -> str:
    names = list(rep.class_names)
    classes = sorted(set(rep.ap) | set(rep.corloc))
    rows = [("class", "AP", "CorLoc", "TP", "FP")]

    def fmt(v):
        return "-" if v is None else f"{100 * v:.1f}"

    for c in classes:
        name = names[c] if c < len(names) else str(c)
        rows.append((name, fmt(rep.ap.get(c)), fmt(rep.corloc.get(c)),
                     str(rep.tp.get(c, "-")), str(rep.fp.get(c, "-"))))
    rows.append(("mean", fmt(rep.map), fmt(rep.mean_corloc), "", ""))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines)
