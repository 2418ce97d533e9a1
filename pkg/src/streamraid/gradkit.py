"""Float64 forward/backward kernels for small recurrent models.

Every forward op returns its result plus a cache; the paired backward op
consumes that cache and upstream gradients and returns exact analytic
gradients. There is no tape: callers thread caches through their own loops,
which keeps the accumulation order fixed and every rerun bit-identical.

Arrays are numpy float64 throughout. The trailing axis is the feature axis;
any leading axes are batch and pass through untouched. Gradients with
respect to parameters are summed over all batch elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StreamraidError

# sigmoid saturates far before |x| reaches this; the clamp only exists to
# keep exp() from overflowing on adversarially scaled pre-activations.
SIGMOID_CLAMP = 500.0

GATE_ORDER = ("i", "f", "g", "o")


class GradkitError(StreamraidError):
    """Kernel contract violation."""


class DimensionError(GradkitError):
    """Operand shapes disagree; the message names the offending operand."""


def as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GradkitError("non-finite entries in input array")
    return arr


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, input clamped to avoid exp overflow."""
    z = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def _check_last_axis(name: str, arr: np.ndarray, want: int) -> None:
    if arr.ndim < 1 or arr.shape[-1] != want:
        raise DimensionError(f"{name}: expected trailing axis {want}, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearCache:
    x: np.ndarray
    w: np.ndarray


def linear_forward(x, w, b):
    """y = x @ w.T + b for w of shape (k, n), b of shape (k,)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"w: expected 2-d weight matrix, got shape {w.shape}")
    k, n = w.shape
    if b.shape != (k,):
        raise DimensionError(f"b: expected shape ({k},), got {b.shape}")
    _check_last_axis("x", x, n)
    y = x @ w.T + b
    return y, LinearCache(x, w)


def linear_backward(cache, dy):
    """Returns (dx, dw, db); dw and db are summed over batch axes."""
    if not isinstance(cache, LinearCache):
        raise GradkitError("linear_backward: cache is not from linear_forward")
    k, n = cache.w.shape
    dy = np.asarray(dy, dtype=np.float64)
    _check_last_axis("dy", dy, k)
    if dy.shape[:-1] != cache.x.shape[:-1]:
        raise DimensionError(
            f"dy: batch shape {dy.shape[:-1]} does not match cached x {cache.x.shape[:-1]}"
        )
    dx = dy @ cache.w
    x2 = cache.x.reshape(-1, n)
    dy2 = dy.reshape(-1, k)
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# relu / dropout


@dataclass
class ReluCache:
    mask: np.ndarray


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0.0
    return np.where(mask, x, 0.0), ReluCache(mask)


def relu_backward(cache, dy):
    if not isinstance(cache, ReluCache):
        raise GradkitError("relu_backward: cache is not from relu_forward")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.mask.shape:
        raise DimensionError(f"dy: shape {dy.shape} does not match cached mask {cache.mask.shape}")
    return np.where(cache.mask, dy, 0.0)


@dataclass
class DropoutCache:
    scale: np.ndarray


def dropout_forward(x, rate, rng=None):
    """Inverted dropout: zero with probability `rate`, survivors scaled by 1/(1-rate).

    rate == 0 (or rng is None) is the identity, consuming no randomness.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise GradkitError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        scale = np.ones_like(x)
    else:
        keep = rng.random(x.shape) >= rate
        scale = keep.astype(np.float64) / (1.0 - rate)
    return x * scale, DropoutCache(scale)


def dropout_backward(cache, dy):
    if not isinstance(cache, DropoutCache):
        raise GradkitError("dropout_backward: cache is not from dropout_forward")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.scale.shape:
        raise DimensionError(f"dy: shape {dy.shape} does not match dropout cache {cache.scale.shape}")
    return dy * cache.scale


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """One LSTM cell's parameters, gates packed row-wise in (i, f, g, o) order.

    w_x is (4m, n), w_h is (4m, m), b is (4m,). The per-gate attributes
    (w_ii, w_hf, b_o, ...) are views into the packed arrays, so in-place
    optimizer updates on the packed storage stay visible everywhere.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w_x = np.asarray(self.w_x, dtype=np.float64)
        self.w_h = np.asarray(self.w_h, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w_x.ndim != 2 or self.w_x.shape[0] % 4 != 0:
            raise DimensionError(f"w_x: expected (4m, n), got {self.w_x.shape}")
        m = self.w_x.shape[0] // 4
        if self.w_h.shape != (4 * m, m):
            raise DimensionError(f"w_h: expected ({4 * m}, {m}), got {self.w_h.shape}")
        if self.b.shape != (4 * m,):
            raise DimensionError(f"b: expected ({4 * m},), got {self.b.shape}")

    @property
    def n(self) -> int:
        return self.w_x.shape[1]

    @property
    def m(self) -> int:
        return self.w_x.shape[0] // 4

    def _gate(self, packed, idx):
        m = self.m
        return packed[idx * m : (idx + 1) * m]

    # per-gate views, named input/forget/cell(g)/output
    @property
    def w_ii(self):
        return self._gate(self.w_x, 0)

    @property
    def w_if(self):
        return self._gate(self.w_x, 1)

    @property
    def w_ig(self):
        return self._gate(self.w_x, 2)

    @property
    def w_io(self):
        return self._gate(self.w_x, 3)

    @property
    def w_hi(self):
        return self._gate(self.w_h, 0)

    @property
    def w_hf(self):
        return self._gate(self.w_h, 1)

    @property
    def w_hg(self):
        return self._gate(self.w_h, 2)

    @property
    def w_ho(self):
        return self._gate(self.w_h, 3)

    @property
    def b_i(self):
        return self._gate(self.b, 0)

    @property
    def b_f(self):
        return self._gate(self.b, 1)

    @property
    def b_g(self):
        return self._gate(self.b, 2)

    @property
    def b_o(self):
        return self._gate(self.b, 3)

    @classmethod
    def init(cls, n: int, m: int, rng) -> "LstmParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init per weight block."""
        kx = 1.0 / np.sqrt(n)
        kh = 1.0 / np.sqrt(m)
        return cls(
            w_x=rng.uniform(-kx, kx, size=(4 * m, n)),
            w_h=rng.uniform(-kh, kh, size=(4 * m, m)),
            b=np.zeros(4 * m),
        )

    def copy(self) -> "LstmParams":
        return LstmParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


@dataclass
class LstmCache:
    x: np.ndarray
    h: np.ndarray
    c: np.ndarray
    gates: np.ndarray  # (..., 4m) post-activation, packed i|f|g|o
    c_new: np.ndarray
    tanh_c_new: np.ndarray
    params: LstmParams


def lstm_cell_forward(x, h, c, params: LstmParams):
    """One LSTM step. Returns (h_new, c_new, cache).

    i, f, o use the clamped sigmoid, g uses tanh, and
    c_new = f*c + i*g, h_new = o*tanh(c_new).
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    m = params.m
    _check_last_axis("x", x, params.n)
    _check_last_axis("h", h, m)
    _check_last_axis("c", c, m)
    if h.shape != c.shape or x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"state: x {x.shape}, h {h.shape}, c {c.shape} disagree on batch")
    z = x @ params.w_x.T + h @ params.w_h.T + params.b
    i = sigmoid(z[..., 0 * m : 1 * m])
    f = sigmoid(z[..., 1 * m : 2 * m])
    g = np.tanh(z[..., 2 * m : 3 * m])
    o = sigmoid(z[..., 3 * m : 4 * m])
    gates = np.concatenate([i, f, g, o], axis=-1)
    c_new = f * c + i * g
    tanh_c_new = np.tanh(c_new)
    h_new = o * tanh_c_new
    return h_new, c_new, LstmCache(x, h, c, gates, c_new, tanh_c_new, params)


def lstm_cell_backward(cache, dh_new, dc_new):
    """Backward through one LSTM step.

    Returns (dx, dh, dc, grads) with grads = {"w_x": ..., "w_h": ..., "b": ...}
    summed over batch axes. Pass dc_new = zeros when the cell state has no
    direct downstream consumer.
    """
    if not isinstance(cache, LstmCache):
        raise GradkitError("lstm_cell_backward: cache is not from lstm_cell_forward")
    p = cache.params
    m = p.m
    dh_new = np.asarray(dh_new, dtype=np.float64)
    dc_new = np.asarray(dc_new, dtype=np.float64)
    if dh_new.shape != cache.tanh_c_new.shape:
        raise DimensionError(
            f"dh_new: shape {dh_new.shape} does not match cached step {cache.tanh_c_new.shape}"
        )
    if dc_new.shape != dh_new.shape:
        raise DimensionError(f"dc_new: shape {dc_new.shape} does not match dh_new {dh_new.shape}")
    i = cache.gates[..., 0 * m : 1 * m]
    f = cache.gates[..., 1 * m : 2 * m]
    g = cache.gates[..., 2 * m : 3 * m]
    o = cache.gates[..., 3 * m : 4 * m]

    do = dh_new * cache.tanh_c_new
    dc_total = dc_new + dh_new * o * (1.0 - cache.tanh_c_new**2)
    df = dc_total * cache.c
    dc = dc_total * f
    di = dc_total * g
    dg = dc_total * i

    dz_i = di * i * (1.0 - i)
    dz_f = df * f * (1.0 - f)
    dz_g = dg * (1.0 - g**2)
    dz_o = do * o * (1.0 - o)
    dz = np.concatenate([dz_i, dz_f, dz_g, dz_o], axis=-1)

    dx = dz @ p.w_x
    dh = dz @ p.w_h
    dz2 = dz.reshape(-1, 4 * m)
    grads = {
        "w_x": dz2.T @ cache.x.reshape(-1, p.n),
        "w_h": dz2.T @ cache.h.reshape(-1, m),
        "b": dz2.sum(axis=0),
    }
    return dx, dh, dc, grads


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossCache:
    kind: str
    pred: np.ndarray
    target: np.ndarray
    softmax: np.ndarray | None


def loss_forward(kind, pred, target):
    """Per-example loss. kind is "cross_entropy" or "mse".

    cross_entropy: pred (..., C) raw logits, target (...,) integer labels;
    numerically stable log-sum-exp. mse: pred (..., D), target broadcastable
    to pred; mean over the trailing axis. Returns (loss with batch shape,
    cache); a single vector input yields a scalar loss.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim < 1:
        raise DimensionError(f"pred: expected at least 1-d, got shape {pred.shape}")
    if kind == "cross_entropy":
        target = np.asarray(target)
        if not np.issubdtype(target.dtype, np.integer):
            raise GradkitError("cross_entropy target must be integer class labels")
        c = pred.shape[-1]
        if target.shape != pred.shape[:-1]:
            raise DimensionError(
                f"target: shape {target.shape} does not match pred batch {pred.shape[:-1]}"
            )
        if target.size and (target.min() < 0 or target.max() >= c):
            raise GradkitError(f"cross_entropy target out of range [0, {c})")
        z = pred - pred.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(z).sum(axis=-1))
        picked = np.take_along_axis(z, target[..., None].astype(np.int64), axis=-1)[..., 0]
        loss = log_z - picked
        sm = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        return loss, LossCache(kind, pred, target, sm)
    if kind == "mse":
        target = np.asarray(target, dtype=np.float64)
        tb = np.broadcast_to(target, pred.shape)
        diff = pred - tb
        loss = (diff**2).mean(axis=-1)
        return loss, LossCache(kind, pred, tb.copy(), None)
    raise GradkitError(f"unknown loss kind {kind!r}")


def loss_backward(cache, upstream=1.0):
    """Gradient of loss w.r.t. pred, scaled by the per-example upstream weight."""
    if not isinstance(cache, LossCache):
        raise GradkitError("loss_backward: cache is not from loss_forward")
    up = np.asarray(upstream, dtype=np.float64)
    batch_shape = cache.pred.shape[:-1]
    up = np.broadcast_to(up, batch_shape)
    if cache.kind == "cross_entropy":
        onehot = np.zeros_like(cache.pred)
        np.put_along_axis(onehot, cache.target[..., None].astype(np.int64), 1.0, axis=-1)
        return (cache.softmax - onehot) * up[..., None]
    d = cache.pred.shape[-1]
    return (2.0 / d) * (cache.pred - cache.target) * up[..., None]


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, point, step=1e-5):
    """Compare f's analytic gradient to central differences.

    Args:
        f: callable taking a flat float64 vector, returning (value, grad)
           where grad has the same shape as the input.
        point: flat vector at which to check.
        step: central difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise DimensionError(f"point: expected flat vector, got shape {point.shape}")
    value, grad = f(point)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise GradkitError("grad_check: non-finite value or gradient at the base point")
    if grad.shape != point.shape:
        raise DimensionError(f"grad: shape {grad.shape} does not match point {point.shape}")
    numeric = np.empty_like(point)
    for idx in range(point.size):
        bumped = point.copy()
        bumped[idx] = point[idx] + step
        hi, _ = f(bumped)
        bumped[idx] = point[idx] - step
        lo, _ = f(bumped)
        numeric[idx] = (hi - lo) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(numeric)))
    return float(np.max(np.abs(grad - numeric) / denom)) if point.size else 0.0
