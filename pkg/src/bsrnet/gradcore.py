"""Dense float64 layers with explicit forward/backward rules and an SGD update.

Every layer comes as a ``*_forward`` function returning ``(out, cache)`` and a
``*_backward`` function mapping the upstream gradient plus cache to input
gradients.  Arrays are plain ``numpy.ndarray`` values in ``C x H x W`` layout.
Batches keep channels first: ``C x N x H x W``, so one im2col matmul covers
the whole batch without transposes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`sgd_update` when a gradient holds NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def _check_spatial(x: np.ndarray) -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected C x H x W or C x N x H x W, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 cross-correlation with zero "same" padding.

    ``w`` has shape ``C_out x C_in x k x k`` with odd ``k``.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_spatial(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be C_out x C_in x k x k with odd k, got {w.shape}")
    c_in = x.shape[0]
    c_out, kc_in, k, _ = w.shape
    if kc_in != c_in:
        raise ShapeError(f"input has {c_in} channels but kernel expects {kc_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")
    inner = x.shape[1:]
    h, wd = inner[-2:]
    m = int(np.prod(inner))

    if k == 1:
        cols = x.reshape(c_in, m)
    else:
        p = k // 2
        pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
        xp = np.pad(x, pad)
        cols = np.empty((c_in, k, k) + inner, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[..., i:i + h, j:j + wd]
        cols = cols.reshape(c_in * k * k, m)
    y = w.reshape(c_out, -1) @ cols
    y += b[:, None]
    return y.reshape((c_out,) + inner), (cols, w, x.shape)


def conv2d_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    """Return ``(dx, dw, db)``; ``dx`` is ``None`` when not requested."""
    cols, w, xshape = cache
    c_out, c_in, k, _ = w.shape
    inner = xshape[1:]
    h, wd = inner[-2:]
    dy = dout.reshape(c_out, -1)
    dw = (dy @ cols.T).reshape(w.shape)
    db = dy.sum(axis=1)
    dx = None
    if need_input_grad:
        dcols = w.reshape(c_out, -1).T @ dy
        if k == 1:
            dx = dcols.reshape(xshape)
        else:
            p = k // 2
            dcols = dcols.reshape((c_in, k, k) + inner)
            dxp = np.zeros((c_in,) + inner[:-2] + (h + 2 * p, wd + 2 * p), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[..., i:i + h, j:j + wd] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxp[..., p:p + h, p:p + wd])
    return dx, dw, db


# ---------------------------------------------------------------------------
# pointwise and resampling


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dout, 0.0)


def maxpool2_forward(x: np.ndarray):
    """2x2 non-overlapping max pool over the last two axes.

    Ties route the gradient to the first window cell in row-major order.
    """
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    nl = len(lead)
    win = x.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, nl + 2, nl + 1).reshape(*lead, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, xshape = cache
    *lead, h, w = xshape
    nl = len(lead)
    dwin = np.zeros(idx.shape + (4,), dtype=DTYPE)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.moveaxis(dwin.reshape(*lead, h // 2, w // 2, 2, 2), nl + 2, nl + 1)
    return dx.reshape(xshape)


def upsample2_forward(x: np.ndarray):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return x.repeat(2, axis=-2).repeat(2, axis=-1), x.shape


def upsample2_backward(dout: np.ndarray, xshape) -> np.ndarray:
    *lead, h, w = xshape
    return dout.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1))


def concat_channels_forward(a: np.ndarray, b: np.ndarray):
    """Stack along the channel axis (axis 0), ``a`` first."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot stack {a.shape} with {b.shape}: spatial dims differ")
    return np.concatenate([a, b], axis=0), a.shape[0]


def concat_channels_backward(dout: np.ndarray, c1: int):
    return dout[:c1], dout[c1:]


def softmax_c_forward(logits: np.ndarray):
    """Softmax over the channel axis (axis 0), max-shifted for stability."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    return p, p


def softmax_c_backward(dout: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dout - (p * dout).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class GradPair:
    """A named parameter and its gradient accumulator (same shape)."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")


@dataclass
class OptimizerState:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_update(params: Sequence[GradPair], state: OptimizerState) -> None:
    """In-place momentum SGD: ``v <- mu*v + g``, ``theta <- theta - lr*v``.

    All gradients are validated before any parameter moves, so a rejected
    step leaves parameters and velocities untouched.  Gradients are zeroed
    after a successful step.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name)
    for p in params:
        v = state.velocity.get(p.name)
        if v is None:
            v = state.velocity[p.name] = np.zeros_like(p.value)
        elif v.shape != p.value.shape:
            raise ShapeError(f"velocity for {p.name} has shape {v.shape}, expected {p.value.shape}")
        v *= state.momentum
        v += p.grad
        p.value -= state.learning_rate * v
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[[np.ndarray], Sequence[np.ndarray]],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    projection: np.ndarray | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic input gradients against central differences.

    ``forward(*inputs)`` returns the op output; ``backward(dout)`` returns one
    gradient per input for the most recent forward call.  The scalar loss is
    ``sum(projection * out)``; with no projection a fixed random one is drawn,
    since a plain sum is constant for normalising ops such as softmax.
    """
    inputs = [np.array(x, dtype=DTYPE) for x in inputs]
    out = forward(*inputs)
    if projection is None:
        projection = np.random.default_rng(seed).standard_normal(np.shape(out))
    analytic = backward(projection)

    errors = []
    for i, x in enumerate(inputs):
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(np.sum(projection * forward(*inputs)))
            flat[j] = orig - step
            down = float(np.sum(projection * forward(*inputs)))
            flat[j] = orig
            nflat[j] = (up - down) / (2 * step)
        errors.append(relative_error(np.asarray(analytic[i]), num))
    report = GradCheckReport(errors, tolerance)
    logger.debug("finite_diff_check errors=%s", errors)
    return report
