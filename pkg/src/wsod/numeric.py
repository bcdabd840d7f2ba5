"""Dense float64 primitives with analytic gradients, plus a finite-difference checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here returns fresh arrays and never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-8


def as_tensor(x) -> np.ndarray:
    return np.array(x, dtype=np.float64, copy=True)


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")
    return x


# --------------------------------------------------------------------------
# softmax

def axis_softmax(m: np.ndarray, axis: int | str) -> np.ndarray:
    """Softmax of a matrix along ``axis``.

    ``axis`` may be an integer or one of ``"rows"`` (normalise each row,
    i.e. across columns) and ``"columns"`` (normalise each column).
    """
    ax = _resolve_axis(axis)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 0 or m.shape[ax] == 0:
        raise ValueError("degenerate softmax axis")
    shifted = m - m.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=ax, keepdims=True)


def axis_softmax_backward(grad: np.ndarray, out: np.ndarray, axis: int | str) -> np.ndarray:
    ax = _resolve_axis(axis)
    return out * (grad - (grad * out).sum(axis=ax, keepdims=True))


def _resolve_axis(axis: int | str) -> int:
    if axis == "rows":
        return -1
    if axis == "columns":
        return 0
    return int(axis)


# --------------------------------------------------------------------------
# elementwise activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish_gate(z: np.ndarray) -> np.ndarray:
    """Elementwise ``z / (1 + exp(-z))``."""
    z = np.asarray(z, dtype=np.float64)
    return z * sigmoid(z)


def swish_gate_backward(grad: np.ndarray, z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return grad * (s + z * s * (1.0 - s))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


# --------------------------------------------------------------------------
# losses

def smooth_l1(x):
    """Fast R-CNN smooth L1: quadratic inside |x| < 1, linear outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def smooth_l1_backward(grad, x):
    x = np.asarray(x, dtype=np.float64)
    return grad * np.where(np.abs(x) < 1.0, x, np.sign(x))


def multilabel_bce(p: np.ndarray, y: np.ndarray) -> float:
    """Summed binary cross-entropy over classes, with probabilities clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p has shape {p.shape}, y has shape {y.shape}")
    pc = np.clip(p, LOG_EPS, 1.0 - LOG_EPS)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum())


def multilabel_bce_backward(p: np.ndarray, y: np.ndarray, grad: float = 1.0) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > LOG_EPS) & (p < 1.0 - LOG_EPS)
    pc = np.clip(p, LOG_EPS, 1.0 - LOG_EPS)
    return grad * inside * (-y / pc + (1.0 - y) / (1.0 - pc))


def weighted_ce(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """``-(1/R) sum_r w_r log probs[r, labels[r]]`` with the log clamp."""
    r = probs.shape[0]
    picked = np.clip(probs[np.arange(r), labels], LOG_EPS, None)
    return float(-(weights * np.log(picked)).sum() / r)


def weighted_ce_backward(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                         grad: float = 1.0) -> np.ndarray:
    r = probs.shape[0]
    out = np.zeros_like(probs)
    picked = probs[np.arange(r), labels]
    live = picked > LOG_EPS
    out[np.arange(r), labels] = np.where(live, -weights / np.where(live, picked, 1.0), 0.0) / r
    return grad * out


# --------------------------------------------------------------------------
# linear map

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db)."""
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


# --------------------------------------------------------------------------
# gradient checking

@dataclass(frozen=True)
class DiffOp:
    """A differentiable operation.

    ``forward(*inputs)`` returns one array. ``backward(upstream, *inputs)``
    returns one gradient array per input. ``signature(*inputs)``, when given,
    returns a hashable summary of the discrete choices made by the forward
    pass (ReLU masks, argmax cells, branch of a piecewise function); a change
    in signature inside the finite-difference stencil marks a kink.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Sequence[np.ndarray]]
    signature: Optional[Callable[..., Hashable]] = None


class NondifferentiablePoint(Exception):
    pass


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: list[float]
    tolerance: float
    redraws: int = 0
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude.

    ``floor`` bounds the scale from below so that gradients which are zero
    by symmetry are not judged on finite-difference round-off alone.
    """
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float,
                       probe: Optional[Callable[[], bool]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place, then restored).

    ``probe`` is called at every perturbed point; returning False raises
    NondifferentiablePoint.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        ok = probe is None or probe()
        flat[i] = orig - eps
        fm = f()
        ok = ok and (probe is None or probe())
        flat[i] = orig
        if not ok:
            raise NondifferentiablePoint(f"kink within {eps} of coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(op: DiffOp, inputs, tolerance: float = 1e-4, eps: float = 1e-5,
               redraw: Optional[Callable[[np.random.Generator], Sequence[np.ndarray]]] = None,
               rng: Optional[np.random.Generator] = None, max_redraws: int = 50) -> GradCheckReport:
    """Compare ``op.backward`` against central finite differences.

    The scalar probed is ``sum(u * forward(inputs))`` for a fixed random
    upstream ``u``. If the stencil straddles a kink and ``redraw`` is given,
    a fresh sample is drawn from it (counted in ``redraws``); otherwise
    NondifferentiablePoint propagates.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    redraws = 0
    while True:
        xs = [as_tensor(x) for x in inputs]
        for i, x in enumerate(xs):
            check_finite(x, f"input {i}")
        try:
            errors = _grad_check_once(op, xs, eps, rng)
            break
        except NondifferentiablePoint:
            if redraw is None or redraws >= max_redraws:
                raise
            redraws += 1
            inputs = redraw(rng)
    failures = [i for i, e in enumerate(errors) if e > tolerance]
    return GradCheckReport(op.name, errors, tolerance, redraws, failures)


def _grad_check_once(op: DiffOp, xs: list[np.ndarray], eps: float,
                     rng: np.random.Generator) -> list[float]:
    out = np.asarray(op.forward(*xs), dtype=np.float64)
    upstream = rng.standard_normal(out.shape)
    analytic = op.backward(upstream, *xs)
    base_sig = op.signature(*xs) if op.signature is not None else None

    def f():
        return float((upstream * op.forward(*xs)).sum())

    probe = None
    if op.signature is not None:
        def probe():
            return op.signature(*xs) == base_sig

    errors = []
    for x, a in zip(xs, analytic):
        num = numerical_gradient(f, x, eps, probe)
        errors.append(relative_error(np.asarray(a, dtype=np.float64).reshape(x.shape), num))
    return errors
