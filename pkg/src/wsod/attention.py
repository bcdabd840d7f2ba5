"""Feature provider, guided attention module and RoI pooling.

Feature maps are ``(H, W, D)`` arrays, channel last. Attention gate weights
act as a 1x1 convolution, i.e. a ``(D_in, D_out)`` matrix applied per cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numeric import (multilabel_bce, multilabel_bce_backward, relu, sigmoid,
                      swish_gate, swish_gate_backward)

ATTN_EPS = 1e-12


@dataclass(frozen=True)
class AttentionParams:
    gate_w: np.ndarray  # (D, D) guided, (D, 1) spatial
    gate_b: np.ndarray  # (D,) guided, (1,) spatial
    cls_w: np.ndarray  # (D, C)
    cls_b: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, depth: int, num_classes: int, spatial: bool = False) -> "AttentionParams":
        out = 1 if spatial else depth
        return cls(np.zeros((depth, out)), np.zeros(out),
                   np.zeros((depth, num_classes)), np.zeros(num_classes))


@dataclass
class AttentionOutput:
    z: np.ndarray  # pre-normalisation gate activations
    attention: np.ndarray  # (H, W) spatial, (H, W, D) guided
    enhanced: np.ndarray  # (H, W, D)
    class_scores: Optional[np.ndarray] = None  # (C,) guided only
    pre: Optional[np.ndarray] = None  # gate input before the ReLU


def _check_shapes(x: np.ndarray, p: AttentionParams, out_dim: int) -> None:
    if x.ndim != 3:
        raise ValueError(f"feature map must be H x W x D, got shape {x.shape}")
    if p.gate_w.shape != (x.shape[2], out_dim) or p.gate_b.shape != (out_dim,):
        raise ValueError(f"shape mismatch: gate {p.gate_w.shape}/{p.gate_b.shape} for depth {x.shape[2]}")


# --------------------------------------------------------------------------
# spatial attention: one normalised map shared by all channels

def spatial_attention(x: np.ndarray, p: AttentionParams) -> AttentionOutput:
    _check_shapes(x, p, 1)
    pre = (x @ p.gate_w)[..., 0] + p.gate_b[0]
    z = relu(pre)
    total = z.sum()
    a = z / (total + ATTN_EPS) if total > 0 else np.zeros_like(z)
    return AttentionOutput(z, a, (1.0 + a)[..., None] * x, pre=pre)


def spatial_attention_backward(g_enh: np.ndarray, x: np.ndarray, p: AttentionParams,
                               out: AttentionOutput):
    """Returns (dx, d_gate_w, d_gate_b)."""
    a, z = out.attention, out.z
    g_a = (g_enh * x).sum(axis=2)
    dx = g_enh * (1.0 + a)[..., None]
    total = z.sum()
    if total > 0:
        denom = total + ATTN_EPS
        g_z = g_a / denom - (g_a * z).sum() / denom ** 2
    else:
        g_z = np.zeros_like(z)
    g_pre = g_z * (out.pre > 0)
    dx = dx + g_pre[..., None] * p.gate_w[:, 0]
    dw = np.einsum("hwd,hw->d", x, g_pre)[:, None]
    db = np.array([g_pre.sum()])
    return dx, dw, db


# --------------------------------------------------------------------------
# guided (channel-spatial) attention with a GAP classification head

def guided_attention(x: np.ndarray, p: AttentionParams) -> AttentionOutput:
    d = x.shape[2] if x.ndim == 3 else -1
    _check_shapes(x, p, d)
    if p.cls_w.shape[0] != d or p.cls_b.shape != (p.cls_w.shape[1],):
        raise ValueError(f"shape mismatch: classifier {p.cls_w.shape}/{p.cls_b.shape} for depth {d}")
    pre = x @ p.gate_w + p.gate_b
    z = relu(pre)
    a = swish_gate(z)
    enhanced = (1.0 + a) * x
    scores = p.cls_b + a.mean(axis=(0, 1)) @ p.cls_w
    return AttentionOutput(z, a, enhanced, scores, pre)


def guided_attention_backward(g_enh: np.ndarray, g_scores: Optional[np.ndarray], x: np.ndarray,
                              p: AttentionParams, out: AttentionOutput):
    """Returns (dx, d_gate_w, d_gate_b, d_cls_w, d_cls_b)."""
    h, w, _ = x.shape
    a = out.attention
    g_a = g_enh * x
    if g_scores is None:
        g_scores = np.zeros_like(p.cls_b)
    g_a = g_a + (p.cls_w @ g_scores) / (h * w)
    g_pre = swish_gate_backward(g_a, out.z) * (out.pre > 0)
    dx = g_enh * (1.0 + a) + g_pre @ p.gate_w.T
    d_gate_w = x.reshape(-1, x.shape[2]).T @ g_pre.reshape(-1, g_pre.shape[2])
    d_gate_b = g_pre.sum(axis=(0, 1))
    d_cls_w = np.outer(a.mean(axis=(0, 1)), g_scores)
    return dx, d_gate_w, d_gate_b, d_cls_w, g_scores.copy()


def gam_loss(class_scores: np.ndarray, labels: np.ndarray) -> float:
    """Multi-label BCE on sigmoid(class_scores)."""
    class_scores = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if class_scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {class_scores.shape} vs {labels.shape}")
    return multilabel_bce(sigmoid(class_scores), labels)


def gam_loss_backward(class_scores: np.ndarray, labels: np.ndarray, grad: float = 1.0) -> np.ndarray:
    s = sigmoid(class_scores)
    return multilabel_bce_backward(s, labels, grad) * s * (1.0 - s)


# --------------------------------------------------------------------------
# RoI max pooling

def roi_bins(box: Sequence[float], grid: tuple[int, int], height: int, width: int):
    """Cell index ranges ``(r0, r1, c0, c1)`` (half open) for each of gh*gw bins.

    Bin edges are rounded outward to whole cells, so every bin of a box with
    positive area covers at least one cell.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = max(0.0, x1), min(float(width), x2)
    y1, y2 = max(0.0, y1), min(float(height), y2)
    if not (x2 > x1 and y2 > y1):
        raise ValueError("degenerate RoI")
    gh, gw = grid
    if gh <= 0 or gw <= 0:
        raise ValueError("RoI grid must be positive")
    ys = [y1 + (y2 - y1) * k / gh for k in range(gh + 1)]
    xs = [x1 + (x2 - x1) * k / gw for k in range(gw + 1)]
    bins = []
    for i in range(gh):
        r0 = min(int(np.floor(ys[i])), height - 1)
        r1 = max(int(np.ceil(ys[i + 1])), r0 + 1)
        for j in range(gw):
            c0 = min(int(np.floor(xs[j])), width - 1)
            c1 = max(int(np.ceil(xs[j + 1])), c0 + 1)
            bins.append((r0, min(r1, height), c0, min(c1, width)))
    return bins


def roi_pool(x: np.ndarray, box, grid: tuple[int, int] = (2, 2)):
    """Max-pool ``x`` over a gh x gw grid of bins inside ``box``.

    Returns ``(pooled, argmax)``: pooled is ``(gh, gw, D)``; argmax holds the
    flat cell index (``row * W + col``) that won each output, first index on ties.
    """
    h, w, d = x.shape
    bins = roi_bins(box, grid, h, w)
    pooled = np.empty((len(bins), d))
    arg = np.empty((len(bins), d), dtype=np.int64)
    for k, (r0, r1, c0, c1) in enumerate(bins):
        patch = x[r0:r1, c0:c1].reshape(-1, d)
        loc = patch.argmax(axis=0)
        pooled[k] = patch[loc, np.arange(d)]
        pw = c1 - c0
        arg[k] = (r0 + loc // pw) * w + (c0 + loc % pw)
    gh, gw = grid
    return pooled.reshape(gh, gw, d), arg.reshape(gh, gw, d)


def roi_pool_many(x: np.ndarray, boxes: np.ndarray, grid: tuple[int, int]):
    """Pool every box; returns ``(R, gh*gw*D)`` features and ``(R, gh*gw*D)`` argmax."""
    feats, args = [], []
    for b in boxes:
        f, a = roi_pool(x, b, grid)
        feats.append(f.reshape(-1))
        args.append(a.reshape(-1))
    return np.stack(feats), np.stack(args)


def roi_pool_backward(g: np.ndarray, argmax: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Route pooled gradients ``g`` (any shape matching ``argmax``) back to their winning cells."""
    h, w, d = shape
    g = np.asarray(g).reshape(-1, d)
    argmax = np.asarray(argmax).reshape(-1, d)
    out = np.zeros((h * w, d))
    chan = np.broadcast_to(np.arange(d), argmax.shape)
    np.add.at(out, (argmax.ravel(), chan.ravel()), g.ravel())
    return out.reshape(h, w, d)


# --------------------------------------------------------------------------
# small convolutional backbone (stand-in for a pretrained network)

@dataclass(frozen=True)
class BackboneParams:
    """Stack of 3x3, stride-1, same-padded conv layers; ReLU between layers."""

    weights: tuple[np.ndarray, ...] = ()  # each (3, 3, D_in, D_out)
    biases: tuple[np.ndarray, ...] = ()  # each (D_out,)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @classmethod
    def identity(cls, depth: int, num_layers: int = 1) -> "BackboneParams":
        k = np.zeros((3, 3, depth, depth))
        k[1, 1] = np.eye(depth)
        return cls(tuple(k.copy() for _ in range(num_layers)),
                   tuple(np.zeros(depth) for _ in range(num_layers)))


def _im2col(x: np.ndarray) -> np.ndarray:
    h, w, d = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((h, w, 3, 3, d))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[dy:dy + h, dx:dx + w]
    return cols.reshape(h * w, 9 * d)


def _col2im(cols: np.ndarray, h: int, w: int, d: int) -> np.ndarray:
    cols = cols.reshape(h, w, 3, 3, d)
    xp = np.zeros((h + 2, w + 2, d))
    for dy in range(3):
        for dx in range(3):
            xp[dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return xp[1:-1, 1:-1]


def conv3x3(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, w, d = x.shape
    if k.shape[:3] != (3, 3, d):
        raise ValueError(f"shape mismatch: kernel {k.shape} for input depth {d}")
    return (_im2col(x) @ k.reshape(9 * d, -1) + b).reshape(h, w, -1)


def backbone_forward(raw: np.ndarray, p: BackboneParams):
    """Returns ``(features, cache)``; the cache feeds ``backbone_backward``."""
    x = np.asarray(raw, dtype=np.float64)
    cache = []
    for i, (k, b) in enumerate(zip(p.weights, p.biases)):
        if i > 0:
            x_in = relu(x)
        else:
            x_in = x
        out = conv3x3(x_in, k, b)
        cache.append((x, x_in))
        x = out
    return x, cache


def backbone_backward(g: np.ndarray, p: BackboneParams, cache):
    """Returns ``(d_raw, d_weights, d_biases)``."""
    dws, dbs = [None] * p.num_layers, [None] * p.num_layers
    for i in reversed(range(p.num_layers)):
        pre, x_in = cache[i]
        k = p.weights[i]
        h, w, d = x_in.shape
        g2 = g.reshape(h * w, -1)
        cols = _im2col(x_in)
        dws[i] = (cols.T @ g2).reshape(k.shape)
        dbs[i] = g2.sum(axis=0)
        g = _col2im(g2 @ k.reshape(9 * d, -1).T, h, w, d)
        if i > 0:
            g = g * (pre > 0)
    return g, tuple(dws), tuple(dbs)
