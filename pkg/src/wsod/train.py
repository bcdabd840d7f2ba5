"""Training, checkpointing and inference.

Training is single threaded and deterministic: the images and augmented
view used at iteration ``t`` depend only on ``(seed, t)``, so a run resumed
from a checkpoint replays exactly the same updates as an uninterrupted one.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import model as M
from .boxes import Box, Detection, clip_boxes, flip_boxes, valid_boxes
from .data import Dataset, ImageRecord, load_feature_source
from .detection import PseudoGT, mine_pseudo_gt
from .metrics import nms_indices

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_img_cls", "L_mil", "L_refine", "L_det", "L_total")
CKPT_MAGIC = b"WSODCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_drop_factor: float = 0.1
    drop_at_iter: int = 1200
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 2000
    batch_images: int = 2
    k_stages: int = 3
    iou_pos: float = 0.5
    fg_iou: float = 0.5
    lam: float = 1.0
    nms_thresh: float = 0.3
    seed: int = 0
    mode: str = "joint"
    # model shape
    backbone_layers: int = 0
    roi_grid: tuple[int, int] = (2, 2)
    hidden: tuple[int, ...] = (64,)
    init_std: float = 0.01
    new_layer_lr_mult: float = 10.0
    # two-phase baseline: detector iterations after the MIL phase (None = iterations)
    phase_b_iterations: Optional[int] = None

    def __post_init__(self):
        if self.mode not in M.MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {M.MODES}")
        for name in ("lr", "iterations", "batch_images", "lr_drop_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "lam", "k_stages", "drop_at_iter", "backbone_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("iou_pos", "fg_iou", "nms_thresh"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    def lr_at(self, it: int) -> float:
        return self.lr * (self.lr_drop_factor if it >= self.drop_at_iter else 1.0)

    def model_config(self, depth: int, num_classes: int) -> M.ModelConfig:
        return M.ModelConfig(depth, num_classes, self.backbone_layers, tuple(self.roi_grid),
                             tuple(self.hidden), self.k_stages, self.init_std, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi_grid"] = list(self.roi_grid)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "roi_grid" in d:
            d["roi_grid"] = tuple(d["roi_grid"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# optimiser

def lr_multipliers(params: M.ModelParams, new_layer_mult: float) -> dict[str, float]:
    """Backbone layers train at the base rate, everything added on top at ``new_layer_mult``."""
    return {k: (1.0 if k.startswith("backbone.") else new_layer_mult) for k in params}


def sgd_step(params: M.ModelParams, grads: M.ModelParams, cfg: TrainConfig, velocity: M.ModelParams,
             it: int = 0, lr_mult: Optional[Mapping[str, float]] = None):
    """One momentum SGD update; returns ``(new_params, new_velocity)``.

    ``v <- momentum * v + g + weight_decay * theta``; ``theta <- theta - lr * v``.
    """
    lr = cfg.lr_at(it)
    new_p, new_v = {}, {}
    for k, theta in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter tensor {k!r} at iteration {it}")
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {k!r}")
        v = cfg.momentum * velocity.get(k, 0.0) + g + cfg.weight_decay * theta
        new_v[k] = v
        new_p[k] = theta - lr * (lr_mult[k] if lr_mult else 1.0) * v
    return new_p, new_v


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: M.ModelParams
    config: TrainConfig
    iteration: int
    seed: int
    num_classes: int
    depth: int
    velocity: M.ModelParams = field(default_factory=dict)
    phase: str = "A"
    pseudo_gt: dict[str, PseudoGT] = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "phase": self.phase,
                "num_classes": self.num_classes, "depth": self.depth}
        tensors = [(f"param/{k}", v) for k, v in self.params.items()]
        tensors += [(f"velocity/{k}", v) for k, v in self.velocity.items()]
        for rid, pg in self.pseudo_gt.items():
            tensors.append((f"pgt/{rid}/classes", pg.classes.astype(np.float64)))
            tensors.append((f"pgt/{rid}/boxes", pg.boxes))
            tensors.append((f"pgt/{rid}/confidence", pg.confidence))
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<IQq", CKPT_VERSION, self.iteration, self.seed))
        blob = json.dumps(meta).encode()
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            arr = np.asarray(arr, dtype=np.float64)
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        off = len(CKPT_MAGIC)
        version, iteration, seed = struct.unpack_from("<IQq", data, off)
        off += struct.calcsize("<IQq")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off:off + n])
        off += n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params, velocity, pgt_parts = {}, {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
            off += 8 * size
            kind, _, rest = name.partition("/")
            if kind == "param":
                params[rest] = arr
            elif kind == "velocity":
                velocity[rest] = arr
            elif kind == "pgt":
                rid, _, part = rest.rpartition("/")
                pgt_parts.setdefault(rid, {})[part] = arr
        c = int(meta["num_classes"])
        pgts = {rid: PseudoGT(d["classes"].astype(np.int64), d["boxes"], d["confidence"], c)
                for rid, d in pgt_parts.items()}
        return cls(params, TrainConfig.from_dict(meta["config"]), int(iteration), int(seed), c,
                   int(meta["depth"]), velocity, meta.get("phase", "A"), pgts)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# views

@dataclass
class View:
    features: np.ndarray
    flip: bool
    sx: float
    sy: float

    def to_view(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64) * np.array([self.sx, self.sy, self.sx, self.sy])
        return flip_boxes(b, self.features.shape[1]) if self.flip else b

    def from_view(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64)
        shape = b.shape
        b = b.reshape(-1, 4)
        if self.flip:
            b = flip_boxes(b, self.features.shape[1])
        return (b / np.array([self.sx, self.sy, self.sx, self.sy])).reshape(shape)


def load_views(record: ImageRecord) -> list[View]:
    out = []
    for v in record.views():
        f = load_feature_source(v.feature)
        if f.shape[2] != record.depth:
            raise ValueError(f"record {record.id!r}: variant dimension mismatch "
                             f"(depth {f.shape[2]} != {record.depth})")
        out.append(View(f, v.flip, f.shape[1] / record.width, f.shape[0] / record.height))
    return out


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple]

    def write_log(self, path) -> None:
        write_loss_log(self.log, path)


def write_loss_log(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def read_loss_log(path) -> list[tuple]:
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected loss-log header {header}")
        return [(int(row[0]), *map(float, row[1:])) for row in r]


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


class _Runner:
    """Shared state for one training run."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        if not dataset.records:
            raise ValueError("empty dataset")
        for r in dataset.records:
            if not r.labels.any():
                raise ValueError(f"record {r.id!r}: training records need at least one positive label")
        self.records = dataset.records  # ground truth is never touched
        self.cfg = cfg
        self.num_classes = dataset.num_classes
        self.depth = dataset.records[0].depth
        self.views = {r.id: load_views(r) for r in self.records}
        self.view_props = {r.id: [v.to_view(r.proposals) for v in self.views[r.id]] for r in self.records}

    def batch(self, it: int):
        rng = np.random.default_rng([self.cfg.seed, it])
        n = min(self.cfg.batch_images, len(self.records))
        picks = rng.choice(len(self.records), size=n, replace=False)
        out = []
        for i in picks:
            rec = self.records[int(i)]
            vi = int(rng.integers(len(self.views[rec.id])))
            out.append((rec, vi))
        return out

    def step_grads(self, params, it: int, heads: M.Heads, pgts: Optional[dict] = None):
        cfg = self.cfg
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        acc = np.zeros(5)
        batch = self.batch(it)
        for rec, vi in batch:
            view = self.views[rec.id][vi]
            fixed = None
            if pgts is not None:
                pg = pgts[rec.id]
                fixed = PseudoGT(pg.classes, view.to_view(pg.boxes), pg.confidence, pg.num_classes)
            losses, cache = M.forward(params, view.features, self.view_props[rec.id][vi], rec.labels, heads,
                                      tuple(cfg.roi_grid), cfg.iou_pos, cfg.fg_iou, cfg.lam, fixed_pgt=fixed)
            g = M.backward(params, cache)
            for k in grads:
                grads[k] += g[k]
            acc += losses
        n = len(batch)
        return {k: v / n for k, v in grads.items()}, acc / n

    def run(self, ckpt: Checkpoint, start: int, stop: int, heads: M.Heads, rows: list,
            log_offset: int = 0, pgts: Optional[dict] = None,
            on_step: Optional[Callable] = None) -> Checkpoint:
        params, velocity = ckpt.params, ckpt.velocity
        mults = lr_multipliers(params, self.cfg.new_layer_lr_mult)
        for it in range(start, stop):
            grads, losses = self.step_grads(params, it, heads, pgts)
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(f"loss became non-finite at iteration {it}", ckpt)
            params, velocity = sgd_step(params, grads, self.cfg, velocity, it, mults)
            rows.append((log_offset + it, *losses))
            ckpt = replace(ckpt, params=params, velocity=velocity, iteration=it + 1)
            if on_step is not None:
                on_step(ckpt)
        return ckpt


def initial_checkpoint(dataset: Dataset, cfg: TrainConfig) -> Checkpoint:
    depth = dataset.records[0].depth
    params = M.init_params(cfg.model_config(depth, dataset.num_classes))
    return Checkpoint(params, cfg, 0, cfg.seed, dataset.num_classes, depth,
                      {k: np.zeros_like(v) for k, v in params.items()})


def mine_fixed_pseudo_gt(params: M.ModelParams, dataset: Dataset, cfg: TrainConfig) -> dict[str, PseudoGT]:
    """Pseudo-GT from a trained MIL model on each record's base view."""
    heads = M.Heads(det=False)
    out = {}
    for r in dataset.records:
        feats = load_feature_source(r.feature)
        _, cache = M.forward(params, feats, r.proposals, r.labels, heads, tuple(cfg.roi_grid),
                             cfg.iou_pos, cfg.fg_iou, cfg.lam)
        final = cache.stage_probs[-1] if cache.stage_probs else cache.mil.x_r.T
        out[r.id] = mine_pseudo_gt(final, r.labels, r.proposals)
    return out


def train(dataset: Dataset, cfg: TrainConfig, resume: Optional[Checkpoint] = None,
          on_step: Optional[Callable[[Checkpoint], None]] = None) -> TrainResult:
    """Train in ``cfg.mode``; returns the final checkpoint and the per-iteration loss log.

    ``two_phase`` first trains the MIL side (attention, MIL, refinement) for
    ``iterations`` steps, mines pseudo-GT once with that model, then trains a
    freshly initialised detection head on the frozen pseudo-GT for
    ``phase_b_iterations`` steps, with the shared layers still trainable.
    """
    dataset = dataset.without_ground_truth()
    runner = _Runner(dataset, cfg)
    ckpt = resume if resume is not None else initial_checkpoint(dataset, cfg)
    rows: list = []
    if cfg.mode != "two_phase":
        ckpt = runner.run(ckpt, ckpt.iteration, cfg.iterations, M.Heads.for_mode(cfg.mode), rows,
                          on_step=on_step)
        return TrainResult(ckpt, rows)

    if ckpt.phase == "A":
        ckpt = runner.run(ckpt, ckpt.iteration, cfg.iterations, M.Heads.for_mode("two_phase", "A"), rows,
                          on_step=on_step)
        pgts = mine_fixed_pseudo_gt(ckpt.params, dataset, cfg)
        params = dict(ckpt.params)
        rng = np.random.default_rng([cfg.seed, 1])
        params.update(M.init_det_params(cfg.model_config(runner.depth, runner.num_classes), rng))
        ckpt = replace(ckpt, params=params, velocity={k: np.zeros_like(v) for k, v in params.items()},
                       iteration=0, phase="B", pseudo_gt=pgts)
    n_b = cfg.phase_b_iterations if cfg.phase_b_iterations is not None else cfg.iterations
    ckpt = runner.run(ckpt, ckpt.iteration, n_b, M.Heads.for_mode("two_phase", "B"), rows,
                      log_offset=cfg.iterations, pgts=ckpt.pseudo_gt, on_step=on_step)
    return TrainResult(ckpt, rows)


# --------------------------------------------------------------------------
# inference

def inference_heads(mode: str) -> M.Heads:
    if mode in ("joint", "two_phase"):
        return M.Heads(img=False, mil=False, refine=False)
    return replace(M.Heads.for_mode(mode), img=False, mil=False)


def predict_record(params: M.ModelParams, record: ImageRecord, cfg: TrainConfig):
    """Scores ``(R, C)`` and boxes ``(R, C, 4)`` averaged over the record's views, in base coordinates."""
    heads = inference_heads(cfg.mode)
    score_sum = box_sum = None
    views = load_views(record)
    for view in views:
        pred = M.predict(params, view.features, view.to_view(record.proposals), heads, tuple(cfg.roi_grid))
        boxes = view.from_view(pred.boxes)
        score_sum = pred.scores if score_sum is None else score_sum + pred.scores
        box_sum = boxes if box_sum is None else box_sum + boxes
    return score_sum / len(views), box_sum / len(views)


def detect_record(params: M.ModelParams, record: ImageRecord, cfg: TrainConfig) -> list[Detection]:
    scores, boxes = predict_record(params, record, cfg)
    out = []
    for c in range(scores.shape[1]):
        b = clip_boxes(boxes[:, c], record.width, record.height)
        ok = np.flatnonzero(valid_boxes(b))
        if ok.size == 0:
            continue
        keep = nms_indices(b[ok], scores[ok, c], cfg.nms_thresh)
        for i in keep:
            j = ok[i]
            out.append(Detection(record.id, c, float(scores[j, c]), Box.from_seq(b[j])))
    return out


def infer(dataset: Dataset, checkpoint: Checkpoint, cfg: Optional[TrainConfig] = None) -> dict[str, list[Detection]]:
    cfg = cfg if cfg is not None else checkpoint.config
    if checkpoint.num_classes != dataset.num_classes:
        raise ValueError(f"checkpoint has {checkpoint.num_classes} classes, dataset has {dataset.num_classes}")
    if dataset.records and dataset.records[0].depth != checkpoint.depth:
        raise ValueError(f"checkpoint expects depth {checkpoint.depth}, dataset has {dataset.records[0].depth}")
    return {r.id: detect_record(checkpoint.params, r, cfg) for r in dataset.records}
