"""Dataset schema, on-disk formats and the synthetic part-vs-whole generator.

On-disk layout
--------------
Manifest (JSON lines), one record per line::

    {"id": "img0", "feature": "features/img0.wsf",
     "proposals": [[x1, y1, x2, y2], ...], "labels": [0, 2],
     "gt": [{"class": 0, "box": [x1, y1, x2, y2]}],
     "variants": [{"feature": "features/img0_flip.wsf", "flip": true}]}

An optional first line ``{"meta": {"num_classes": C, "class_names": [...]}}``
fixes the class count; otherwise it is inferred from the labels.

Feature binary: magic ``WSODF1``, then uint32 H, W, D (little endian), then
H*W*D float32 little endian, row-major, channel last.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .boxes import Box, Detection, clip_boxes, iou_matrix, valid_boxes

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"WSODF1"
_HEADER = struct.Struct("<III")


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# feature binaries

def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError(f"feature map must be H x W x D, got shape {features.shape}")
    h, w, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(h, w, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_feature_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(len(FEATURE_MAGIC) + _HEADER.size)
    if len(head) < len(FEATURE_MAGIC) + _HEADER.size or head[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DatasetError(f"bad feature header in {path}")
    h, w, d = _HEADER.unpack(head[len(FEATURE_MAGIC):])
    expected = len(FEATURE_MAGIC) + _HEADER.size + 4 * h * w * d
    size = os.path.getsize(path)
    if size != expected:
        raise DatasetError(
            f"dim mismatch in {path}: header says {h}x{w}x{d} ({expected} bytes), file has {size}")
    return h, w, d


def read_features(path) -> np.ndarray:
    h, w, d = read_feature_header(path)
    offset = len(FEATURE_MAGIC) + _HEADER.size
    raw = np.fromfile(path, dtype="<f4", offset=offset)
    return raw.reshape(h, w, d).astype(np.float64)


@dataclass(frozen=True)
class FeatureRef:
    """A header-checked feature file, read on demand."""

    path: str
    shape: tuple[int, int, int]

    def load(self) -> np.ndarray:
        return read_features(self.path)


FeatureSource = Union[FeatureRef, np.ndarray]


def load_feature_source(src: FeatureSource) -> np.ndarray:
    if isinstance(src, FeatureRef):
        return src.load()
    return np.asarray(src, dtype=np.float64)


def feature_shape(src: FeatureSource) -> tuple[int, int, int]:
    return tuple(src.shape)  # type: ignore[return-value]


# --------------------------------------------------------------------------
# records

@dataclass(frozen=True)
class Variant:
    """A pre-materialised augmented view of an image.

    ``flip`` marks a horizontally mirrored view. Its feature map may have a
    different H x W from the base view; proposals are rescaled to it.
    """

    feature: FeatureSource
    flip: bool = False


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    feature: FeatureSource
    proposals: np.ndarray  # (R, 4) float64, clipped to the base feature map
    labels: np.ndarray  # (C,) float64 in {0, 1}
    variants: tuple[Variant, ...] = ()

    @property
    def height(self) -> int:
        return feature_shape(self.feature)[0]

    @property
    def width(self) -> int:
        return feature_shape(self.feature)[1]

    @property
    def depth(self) -> int:
        return feature_shape(self.feature)[2]

    def views(self) -> list[Variant]:
        """The base view followed by any augmented variants."""
        return [Variant(self.feature, False), *self.variants]

    def positive_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.labels > 0)]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Records plus evaluation-only ground truth.

    Ground-truth boxes live in ``ground_truth`` (image id -> list of
    ``(class, Box)``), never on the records, so training code that only walks
    ``records`` cannot see them.
    """

    records: tuple[ImageRecord, ...]
    num_classes: int
    class_names: tuple[str, ...]
    ground_truth: Mapping[str, tuple[tuple[int, Box], ...]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DatasetError(f"duplicate id {dup!r}")
        for r in self.records:
            if r.labels.shape != (self.num_classes,):
                raise DatasetError(f"record {r.id!r}: labels length {r.labels.shape[0]} != C={self.num_classes}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.ground_truth)

    def without_ground_truth(self) -> "Dataset":
        return Dataset(self.records, self.num_classes, self.class_names, {})

    def record(self, image_id: str) -> ImageRecord:
        for r in self.records:
            if r.id == image_id:
                return r
        raise KeyError(image_id)

    def equals(self, other: "Dataset") -> bool:
        if (self.num_classes, tuple(self.class_names)) != (other.num_classes, tuple(other.class_names)):
            return False
        if len(self) != len(other) or dict(self.ground_truth) != dict(other.ground_truth):
            return False
        for a, b in zip(self.records, other.records):
            if a.id != b.id or not np.array_equal(a.proposals, b.proposals):
                return False
            if not np.array_equal(a.labels, b.labels) or len(a.variants) != len(b.variants):
                return False
            for va, vb in zip(a.views(), b.views()):
                if va.flip != vb.flip:
                    return False
                if not np.array_equal(load_feature_source(va.feature), load_feature_source(vb.feature)):
                    return False
        return True


# --------------------------------------------------------------------------
# manifest io

def _parse_boxes(raw, what: str, rid: str) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"record {rid!r}: malformed {what}") from exc
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4 or not np.all(np.isfinite(arr)):
        raise DatasetError(f"record {rid!r}: {what} must be an array of [x1, y1, x2, y2]")
    return arr


def _resolve(base: Path, rel: str) -> str:
    p = Path(rel)
    return str(p if p.is_absolute() else base / p)


def load_dataset(manifest_path, require_labels: bool = True) -> Dataset:
    """Read and validate a JSON-lines manifest.

    Feature files are header-checked here but only read when a consumer
    calls ``load_feature_source``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    meta: dict = {}
    rows: list[dict] = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{manifest_path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"{manifest_path}:{lineno}: record must be a JSON object")
            if "meta" in obj and not rows and not meta:
                meta = obj["meta"]
                continue
            rows.append(obj)

    num_classes = meta.get("num_classes")
    if num_classes is None:
        top = -1
        for obj in rows:
            top = max([top, *obj.get("labels", []), *(g.get("class", -1) for g in obj.get("gt", []))])
        num_classes = top + 1
    num_classes = int(num_classes)
    if num_classes <= 0:
        raise DatasetError("dataset has no classes")
    class_names = tuple(meta.get("class_names") or [f"class{c}" for c in range(num_classes)])
    if len(class_names) != num_classes:
        raise DatasetError(f"class_names has {len(class_names)} entries, expected {num_classes}")

    records, gts, seen = [], {}, set()
    for obj in rows:
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise DatasetError(f"record without a string id: {str(obj)[:60]}")
        if rid in seen:
            raise DatasetError(f"duplicate id {rid!r}")
        seen.add(rid)
        for key in ("feature", "proposals", "labels"):
            if key not in obj:
                raise DatasetError(f"record {rid!r}: missing key {key!r}")

        fpath = _resolve(base, obj["feature"])
        try:
            shape = read_feature_header(fpath)
        except FileNotFoundError as exc:
            raise DatasetError(f"record {rid!r}: feature file not found: {fpath}") from exc
        except DatasetError as exc:
            raise DatasetError(f"record {rid!r}: {exc}") from exc
        h, w, _ = shape

        props = _parse_boxes(obj["proposals"], "proposals", rid)
        if len(props) == 0:
            raise DatasetError(f"record {rid!r}: empty proposal list")
        clipped = clip_boxes(props, w, h)
        if not np.array_equal(clipped, props):
            log.warning("record %r: %d proposal(s) clipped to the %dx%d feature map",
                        rid, int(np.any(clipped != props, axis=1).sum()), w, h)
        if not np.all(valid_boxes(clipped)):
            raise DatasetError(f"record {rid!r}: degenerate proposal after clipping")

        labels = np.zeros(num_classes)
        for c in obj["labels"]:
            if not isinstance(c, int) or not 0 <= c < num_classes:
                raise DatasetError(f"record {rid!r}: label {c!r} outside [0, {num_classes})")
            labels[c] = 1.0
        if require_labels and not labels.any():
            raise DatasetError(f"record {rid!r}: no positive label")

        variants = []
        for v in obj.get("variants", []):
            vpath = _resolve(base, v["feature"])
            try:
                vshape = read_feature_header(vpath)
            except (FileNotFoundError, DatasetError) as exc:
                raise DatasetError(f"record {rid!r}: variant {vpath}: {exc}") from exc
            if vshape[2] != shape[2]:
                raise DatasetError(f"record {rid!r}: variant depth {vshape[2]} != {shape[2]}")
            variants.append(Variant(FeatureRef(vpath, vshape), bool(v.get("flip", False))))

        if "gt" in obj:
            items = []
            for g in obj["gt"]:
                c = g.get("class")
                if not isinstance(c, int) or not 0 <= c < num_classes:
                    raise DatasetError(f"record {rid!r}: gt class {c!r} out of range")
                try:
                    items.append((c, Box.from_seq(g["box"])))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DatasetError(f"record {rid!r}: bad gt box: {exc}") from exc
            gts[rid] = tuple(items)

        records.append(ImageRecord(rid, FeatureRef(fpath, shape), clipped, labels, tuple(variants)))
    return Dataset(tuple(records), num_classes, class_names, gts)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write features and a manifest under ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w") as fh:
        meta = {"num_classes": dataset.num_classes, "class_names": list(dataset.class_names)}
        fh.write(json.dumps({"meta": meta}) + "\n")
        for r in dataset.records:
            rel = f"features/{r.id}.wsf"
            write_features(directory / rel, load_feature_source(r.feature))
            row = {
                "id": r.id,
                "feature": rel,
                "proposals": r.proposals.tolist(),
                "labels": r.positive_classes(),
            }
            if r.id in dataset.ground_truth:
                row["gt"] = [{"class": c, "box": b.as_list()} for c, b in dataset.ground_truth[r.id]]
            if r.variants:
                row["variants"] = []
                for k, v in enumerate(r.variants):
                    vrel = f"features/{r.id}_v{k}.wsf"
                    write_features(directory / vrel, load_feature_source(v.feature))
                    row["variants"].append({"feature": vrel, "flip": v.flip})
            fh.write(json.dumps(row) + "\n")
    return manifest


# --------------------------------------------------------------------------
# detections io

def write_detections(dets: Mapping[str, Sequence[Detection]], path) -> None:
    body = {
        image_id: [{"class": d.cls, "score": float(d.score), "box": d.box.as_list()} for d in items]
        for image_id, items in dets.items()
    }
    try:
        with open(path, "w") as fh:
            if body:
                json.dump(body, fh)
    except OSError as exc:
        raise OSError(f"cannot write detections to {path}: {exc}") from exc


def read_detections(path) -> dict[str, list[Detection]]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read detections from {path}: {exc}") from exc
    if not text.strip():
        return {}
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid detections JSON ({exc.msg})") from exc
    return {
        image_id: [Detection(image_id, int(d["class"]), float(d["score"]), Box.from_seq(d["box"]))
                   for d in items]
        for image_id, items in body.items()
    }


# --------------------------------------------------------------------------
# synthetic part-vs-whole data

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for ``gen_synthetic``.

    Each positive class contributes one object rectangle whose cells carry the
    class direction at gain ``g_whole``. Classes listed in ``part_classes``
    (all classes when None) additionally carry a nested part rectangle at gain
    ``g_part``, the discriminative region a MIL detector tends to lock onto.
    With ``part_direction="own"`` the part carries a separate per-class
    direction on top of the whole-object signal instead of a stronger copy
    of it.
    """

    n_images: int = 100
    height: int = 16
    width: int = 16
    depth: int = 8
    num_classes: int = 3
    g_whole: float = 1.0
    g_part: float = 1.5
    noise: float = 0.3
    part_classes: Optional[tuple[int, ...]] = (0,)
    max_objects: int = 2
    object_min: int = 6
    object_max: int = 11
    part_scale: float = 0.45
    n_jitter: int = 4
    jitter: float = 0.25
    n_random: int = 12
    n_distractors: int = 2
    distractor_gain: float = 1.0
    flip_variant: bool = True
    direction_seed: int = 0
    part_direction: str = "class"
    part_prob: float = 1.0

    def trap_classes(self) -> tuple[int, ...]:
        if self.part_classes is None:
            return tuple(range(self.num_classes))
        return tuple(self.part_classes)

    @classmethod
    def from_mapping(cls, m: Mapping) -> "SynthConfig":
        known = {k: v for k, v in m.items() if k in cls.__dataclass_fields__}
        if known.get("part_classes") is not None:
            known["part_classes"] = tuple(known["part_classes"])
        return cls(**known)


def class_directions(cfg: SynthConfig) -> np.ndarray:
    """Orthonormal rows: C class directions, then C part directions when parts
    have their own direction, then distractor directions."""
    rng = np.random.default_rng(cfg.direction_seed)
    q, _ = np.linalg.qr(rng.standard_normal((cfg.depth, cfg.depth)))
    return q.T


def _check_synth(cfg: SynthConfig) -> None:
    if cfg.n_images <= 0 or cfg.num_classes <= 0:
        raise ValueError("n_images and num_classes must be positive")
    if not cfg.g_part >= cfg.g_whole > cfg.noise:
        raise ValueError("need g_part >= g_whole > noise")
    if cfg.part_direction not in ("class", "own"):
        raise ValueError(f"unknown part_direction {cfg.part_direction!r}")
    if cfg.depth < cfg.num_classes * (2 if cfg.part_direction == "own" else 1):
        raise ValueError("depth too small for the class (and part) directions")
    if cfg.object_max > min(cfg.height, cfg.width) or cfg.object_min > cfg.object_max:
        raise ValueError(
            f"infeasible geometry: objects of size {cfg.object_min}..{cfg.object_max} "
            f"in a {cfg.height}x{cfg.width} map")
    if cfg.object_min < 4:
        raise ValueError("infeasible geometry: object_min must be >= 4 to nest a part")
    if not 0 <= cfg.part_prob <= 1:
        raise ValueError("part_prob must lie in [0, 1]")
    if not 0 < cfg.part_scale <= 0.5:
        raise ValueError("part_scale must lie in (0, 0.5]")


def _part_inside(rng, x1, y1, x2, y2, scale):
    w, h = x2 - x1, y2 - y1
    pw = min(max(1, int(round(w * scale))), w - 2)
    ph = min(max(1, int(round(h * scale))), h - 2)
    while pw * ph > 0.25 * w * h:
        if pw >= ph:
            pw -= 1
        else:
            ph -= 1
    px = int(rng.integers(x1 + 1, x2 - pw))
    py = int(rng.integers(y1 + 1, y2 - ph))
    return px, py, px + pw, py + ph


def _jitter(rng, box, n, frac, width, height):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    out = []
    while len(out) < n:
        d = rng.uniform(-frac, frac, size=4) * np.array([w, h, w, h])
        b = np.array([x1, y1, x2, y2], dtype=np.float64) + np.round(d)
        b = clip_boxes(b, width, height)[0]
        if b[2] - b[0] >= 1 and b[3] - b[1] >= 1:
            out.append(b)
    return out


def gen_synthetic(cfg: SynthConfig, seed: int, id_prefix: str = "syn") -> Dataset:
    """Generate a part-vs-whole dataset; a pure function of ``(cfg, seed)``."""
    return _generate(cfg, seed, id_prefix)[0]


def synthetic_parts(cfg: SynthConfig, seed: int, id_prefix: str = "syn") -> dict[str, list[tuple[int, Box]]]:
    """The part rectangles planted by ``gen_synthetic(cfg, seed)``, per image id."""
    return _generate(cfg, seed, id_prefix)[1]


def _generate(cfg: SynthConfig, seed: int, id_prefix: str):
    _check_synth(cfg)
    rng = np.random.default_rng(seed)
    dirs = class_directions(cfg)
    n_dirs = cfg.num_classes * (2 if cfg.part_direction == "own" else 1)
    distract = dirs[n_dirs:] if cfg.depth > n_dirs else None
    traps = set(cfg.trap_classes())
    H, W, D, C = cfg.height, cfg.width, cfg.depth, cfg.num_classes

    records, gts, parts = [], {}, {}
    for n in range(cfg.n_images):
        k = int(rng.integers(1, min(cfg.max_objects, C) + 1))
        classes = sorted(int(c) for c in rng.choice(C, size=k, replace=False))
        placed: list[tuple[int, tuple[int, int, int, int]]] = []
        for c in classes:
            for _ in range(100):
                w = int(rng.integers(cfg.object_min, cfg.object_max + 1))
                h = int(rng.integers(cfg.object_min, cfg.object_max + 1))
                x1 = int(rng.integers(0, W - w + 1))
                y1 = int(rng.integers(0, H - h + 1))
                box = (x1, y1, x1 + w, y1 + h)
                if not placed or iou_matrix(np.array([box]), np.array([b for _, b in placed])).max() == 0:
                    placed.append((c, box))
                    break
        feat = cfg.noise * rng.standard_normal((H, W, D))
        if distract is not None:
            for _ in range(cfg.n_distractors):
                dw, dh = (int(v) for v in rng.integers(2, 6, size=2))
                dx, dy = int(rng.integers(0, W - dw + 1)), int(rng.integers(0, H - dh + 1))
                feat[dy:dy + dh, dx:dx + dw] += cfg.distractor_gain * distract[rng.integers(len(distract))]

        props: list[np.ndarray] = []
        gt_items, part_items = [], []
        for c, (x1, y1, x2, y2) in placed:
            feat[y1:y2, x1:x2] += cfg.g_whole * dirs[c]
            obj = np.array([x1, y1, x2, y2], dtype=np.float64)
            props.append(obj)
            props.extend(_jitter(rng, obj, cfg.n_jitter, cfg.jitter, W, H))
            gt_items.append((c, Box(*obj)))
            if c in traps and rng.random() < cfg.part_prob:
                px1, py1, px2, py2 = _part_inside(rng, x1, y1, x2, y2, cfg.part_scale)
                if cfg.part_direction == "own":
                    feat[py1:py2, px1:px2] += cfg.g_part * dirs[C + c]
                else:
                    feat[py1:py2, px1:px2] += (cfg.g_part - cfg.g_whole) * dirs[c]
                part = np.array([px1, py1, px2, py2], dtype=np.float64)
                props.append(part)
                props.extend(_jitter(rng, part, cfg.n_jitter, cfg.jitter, W, H))
                part_items.append((c, Box(*part)))
        for _ in range(cfg.n_random):
            bw = int(rng.integers(2, W + 1))
            bh = int(rng.integers(2, H + 1))
            bx, by = int(rng.integers(0, W - bw + 1)), int(rng.integers(0, H - bh + 1))
            props.append(np.array([bx, by, bx + bw, by + bh], dtype=np.float64))
        proposals = np.stack(props)[rng.permutation(len(props))]

        feat = feat.astype(np.float32).astype(np.float64)
        labels = np.zeros(C)
        labels[[c for c, _ in placed]] = 1.0
        variants = (Variant(np.ascontiguousarray(feat[:, ::-1, :]), True),) if cfg.flip_variant else ()
        rid = f"{id_prefix}{seed}_{n:04d}"
        records.append(ImageRecord(rid, feat, proposals, labels, variants))
        gts[rid] = tuple(gt_items)
        parts[rid] = part_items
    names = tuple(f"{'trap' if c in traps else 'plain'}{c}" for c in range(C))
    return Dataset(tuple(records), C, names, gts), parts
