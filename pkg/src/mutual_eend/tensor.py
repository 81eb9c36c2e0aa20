"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the diarization network are provided.  Shapes
follow a column convention: a feature matrix is ``(D, T)`` with frames as
columns, and any number of leading batch axes may precede the last two.

Broadcasting is deliberately narrow.  The only implicit cases are

* a 2-D weight matrix applied to a batch of matrices in :func:`matmul`, and
* a length-``D`` vector added to every column (:func:`add_bias`,
  :func:`layer_norm`).

Everything else must agree in shape exactly or a :class:`DimensionError` is
raised.

Example::

    w = Tensor.param(np.random.randn(3, 4))
    with Tape() as tape:
        loss = tsum(matmul(w, x))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "precision",
    "set_precision",
    "get_dtype",
    "matmul",
    "add",
    "subtract",
    "scale",
    "add_bias",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_columns",
    "layer_norm",
    "concat_rows",
    "mean_over_axis",
    "transpose",
    "swapaxes",
    "reshape",
    "take",
    "tsum",
    "frobenius_sq",
    "bce_elementwise",
    "lstm_step",
    "lstm_scan",
    "numeric_gradient",
    "check_gradients",
]

LAYER_NORM_EPS = 1e-5
BCE_EPS = 1e-7

_state = threading.local()


def _dtypes() -> list:
    if not hasattr(_state, "dtype"):
        _state.dtype = [np.float32]
    return _state.dtype


def get_dtype() -> type:
    return _dtypes()[-1]


def set_precision(name: str) -> None:
    """Set the element precision for newly created tensors ("float32"/"float64")."""
    _dtypes()[-1] = _parse_dtype(name)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    stack = _dtypes()
    stack.append(_parse_dtype(name))
    try:
        yield
    finally:
        stack.pop()


def _parse_dtype(name) -> type:
    dt = np.dtype(name)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}")
    return dt.type


class DimensionError(ValueError):
    pass


class Tensor:
    """An array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def param(cls, data, name: str | None = None) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_active_tapes: list = []


class Tape:
    """Ordered record of executed operations.

    Operations are only recorded while the tape is active (inside its
    ``with`` block) and at least one operand requires a gradient.  Outside any
    tape the ops run in inference mode and build no graph.
    """

    def __init__(self):
        self.records: list = []
        self._done = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise RuntimeError("tape was already consumed by backward()")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for outputs, inputs, backward_fn in reversed(self.records):
            out_grads = [o.grad for o in outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g
                         for o, g in zip(outputs, out_grads)]
            in_grads = backward_fn(*out_grads)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"internal: gradient shape {g.shape} != operand shape {t.data.shape}")
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g


def _record(outputs: Sequence[Tensor], inputs: Sequence[Tensor],
            backward_fn: Callable) -> None:
    if not _active_tapes or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    _active_tapes[-1].records.append((tuple(outputs), tuple(inputs), backward_fn))


def _result(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands carry the same leading batch axes, or ``a`` is a
    plain 2-D matrix applied to every matrix of a batched ``b``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    weight_over_batch = a.ndim == 2 and b.ndim > 2
    if not weight_over_batch and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    out = _result(np.matmul(a.data, b.data))

    def backward(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        ga = None
        if a.requires_grad:
            if weight_over_batch:
                m, k = a.shape
                g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
                b2 = np.moveaxis(b.data, -2, 0).reshape(k, -1)
                ga = g2 @ b2.T
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return ga, gb

    _record([out], [a, b], backward)
    return out


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    out = _result(a.data + b.data)
    _record([out], [a, b], lambda g: (g, g))
    return out


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("subtract", a, b)
    out = _result(a.data - b.data)
    _record([out], [a, b], lambda g: (g, -g))
    return out


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data * a.data.dtype.type(factor))
    _record([out], [a], lambda g: (g * a.data.dtype.type(factor),))
    return out


def add_bias(a, bias) -> Tensor:
    """Add a length-D vector to every column of ``a[..., D, T]``."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.ndim < 2 or bias.shape != (a.shape[-2],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {a.shape}")
    out = _result(a.data + bias.data[:, None])

    def backward(g):
        gb = g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)) if bias.requires_grad else None
        return g, gb

    _record([out], [a, bias], backward)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    out = _result(y)
    _record([out], [a], lambda g: (g * y * (1 - y),))
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = _result(y)
    _record([out], [a], lambda g: (g * (1 - y * y),))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = _result(a.data * mask)
    _record([out], [a], lambda g: (g * mask,))
    return out


def softmax_columns(a) -> Tensor:
    """Softmax down each column (over axis -2)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"softmax_columns: need a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-2, keepdims=True)
    out = _result(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-2, keepdims=True)),)

    _record([out], [a], backward)
    return out


def layer_norm(a, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each column of ``a[..., D, T]`` over D, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if a.ndim < 2 or gain.shape != (a.shape[-2],) or bias.shape != gain.shape:
        raise DimensionError(
            f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {a.shape}")
    x = a.data
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = _result(xhat * gain.data[:, None] + bias.data[:, None])

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        ga = None
        if a.requires_grad:
            gx = g * gain.data[:, None]
            ga = inv * (gx - gx.mean(axis=-2, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-2, keepdims=True))
        return ga, ggain, gbias

    _record([out], [a, gain, bias], backward)
    return out


# --------------------------------------------------------------------------
# shape manipulation and reductions


def concat_rows(parts: Sequence) -> Tensor:
    """Stack matrices vertically (along axis -2)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise DimensionError(f"concat_rows: shapes {ref} and {p.shape} do not stack")
    out = _result(np.concatenate([p.data for p in parts], axis=-2))
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward(g):
        return tuple(g[..., lo:hi, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    _record([out], parts, backward)
    return out


def mean_over_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    out = _result(a.data.mean(axis=axis))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    _record([out], [a], backward)
    return out


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.swapaxes(a.data, i, j))
    _record([out], [a], lambda g: (np.swapaxes(g, i, j),))
    return out


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    out = _result(data)
    _record([out], [a], lambda g: (g.reshape(a.shape),))
    return out


def take(a, indices, axis: int) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (e.g. a frame reordering)."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = _result(np.take(a.data, indices, axis=axis))

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (ga,)

    _record([out], [a], backward)
    return out


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.asarray(a.data.sum(), dtype=a.data.dtype))
    _record([out], [a], lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))
    return out


def frobenius_sq(a) -> Tensor:
    """Sum of squared entries."""
    a = _as_tensor(a)
    out = _result(np.asarray((a.data * a.data).sum(), dtype=a.data.dtype))
    _record([out], [a], lambda g: (2 * g * a.data,))
    return out


def bce_elementwise(p, y, eps: float = BCE_EPS) -> Tensor:
    """Elementwise binary cross entropy of probabilities ``p`` against targets ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]``; the clamped entries pass no
    gradient.  ``y`` is treated as a constant.
    """
    p = _as_tensor(p)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.data.dtype)
    if y.shape != p.shape:
        raise DimensionError(f"bce_elementwise: shapes {p.shape} and {y.shape} differ")
    pc = np.clip(p.data, eps, 1 - eps)
    out = _result(-(y * np.log(pc) + (1 - y) * np.log1p(-pc)))
    inside = (p.data > eps) & (p.data < 1 - eps)

    def backward(g):
        return (g * inside * (pc - y) / (pc * (1 - pc)),)

    _record([out], [p], backward)
    return out


# --------------------------------------------------------------------------
# LSTM cell, gate order (input, forget, cell, output)


def _lstm_forward(x_proj, h, c, w_hh):
    gates = x_proj + h @ w_hh.T
    d = h.shape[-1]
    i = _sigmoid(gates[..., :d])
    f = _sigmoid(gates[..., d:2 * d])
    g = np.tanh(gates[..., 2 * d:3 * d])
    o = _sigmoid(gates[..., 3 * d:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (i, f, g, o, tc)


def _lstm_backward(dh, dc, c_prev, cache):
    """Gradient of one cell step with respect to its pre-activation gates."""
    i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dgates = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1)
    return dgates, dc_prev


def _check_lstm_shapes(d_in, h, c, w_ih, w_hh, b):
    d = h[-1]
    if c != h or w_ih != (4 * d, d_in) or w_hh != (4 * d, d) or b != (4 * d,):
        raise DimensionError(
            f"lstm: inconsistent shapes x_dim={d_in} h={h} c={c} "
            f"w_ih={w_ih} w_hh={w_hh} b={b}")


def lstm_step(x, h, c, w_ih, w_hh, b) -> tuple[Tensor, Tensor]:
    """One LSTM cell step on row vectors ``x[..., D_in]``, ``h[..., D]``, ``c[..., D]``."""
    x, h, c, w_ih, w_hh, b = map(_as_tensor, (x, h, c, w_ih, w_hh, b))
    _check_lstm_shapes(x.shape[-1], h.shape, c.shape, w_ih.shape, w_hh.shape, b.shape)
    x_proj = x.data @ w_ih.data.T + b.data
    h_new, c_new, cache = _lstm_forward(x_proj, h.data, c.data, w_hh.data)
    out_h, out_c = _result(h_new), _result(c_new)

    def backward(dh, dc):
        dgates, dc_prev = _lstm_backward(dh, dc, c.data, cache)
        lead = tuple(range(dgates.ndim - 1))
        flat = dgates.reshape(-1, dgates.shape[-1])
        return (dgates @ w_ih.data,
                dgates @ w_hh.data,
                dc_prev,
                flat.T @ x.data.reshape(-1, x.shape[-1]),
                flat.T @ h.data.reshape(-1, h.shape[-1]),
                dgates.sum(axis=lead))

    _record([out_h, out_c], [x, h, c, w_ih, w_hh, b], backward)
    return out_h, out_c


def lstm_scan(xs, h0, c0, w_ih, w_hh, b) -> tuple[Tensor, Tensor, Tensor]:
    """Run the LSTM over ``xs[B, T, D_in]`` from state ``(h0, c0)``, each ``[B, D]``.

    Returns ``(H, h_last, c_last)`` where ``H[B, T, D]`` holds every hidden
    state.  Equivalent to ``T`` chained :func:`lstm_step` calls, but records a
    single fused operation with hand-written backpropagation through time.
    """
    xs, h0, c0, w_ih, w_hh, b = map(_as_tensor, (xs, h0, c0, w_ih, w_hh, b))
    if xs.ndim != 3 or h0.ndim != 2 or xs.shape[0] != h0.shape[0]:
        raise DimensionError(f"lstm_scan: xs {xs.shape} vs state {h0.shape}")
    _check_lstm_shapes(xs.shape[-1], h0.shape, c0.shape, w_ih.shape, w_hh.shape, b.shape)
    n_steps = xs.shape[1]
    x_proj = xs.data @ w_ih.data.T + b.data
    hs = np.empty(xs.shape[:2] + (h0.shape[-1],), dtype=h0.data.dtype)
    cs = []
    caches = []
    h, c = h0.data, c0.data
    for t in range(n_steps):
        cs.append(c)
        h, c, cache = _lstm_forward(x_proj[:, t], h, c, w_hh.data)
        hs[:, t] = h
        caches.append(cache)
    out_hs, out_h, out_c = _result(hs), _result(h.copy()), _result(c)

    def backward(g_hs, g_h, g_c):
        dgates_all = np.empty(x_proj.shape, dtype=x_proj.dtype)
        dh = g_h.copy()
        dc = g_c.copy()
        for t in range(n_steps - 1, -1, -1):
            dh = dh + g_hs[:, t]
            dgates, dc = _lstm_backward(dh, dc, cs[t], caches[t])
            dgates_all[:, t] = dgates
            dh = dgates @ w_hh.data
        h_prev = np.concatenate([h0.data[:, None], hs[:, :-1]], axis=1)
        flat = dgates_all.reshape(-1, dgates_all.shape[-1])
        return (dgates_all @ w_ih.data,
                dh,
                dc,
                flat.T @ xs.data.reshape(-1, xs.shape[-1]),
                flat.T @ h_prev.reshape(-1, h_prev.shape[-1]),
                flat.sum(axis=0))

    _record([out_hs, out_h, out_c], [xs, h0, c0, w_ih, w_hh, b], backward)
    return out_hs, out_h, out_c


# --------------------------------------------------------------------------
# finite-difference self-check


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the scalar ``fn()`` w.r.t. ``t``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = float(fn().data)
        flat[k] = orig - step
        down = float(fn().data)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale_)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5) -> dict:
    """Compare tape gradients of ``fn()`` against central differences.

    Returns ``{name_or_index: relative_error}`` using the norm-wise relative
    error per tensor.  Run under ``precision("float64")``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    errors = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_gradient(fn, p, step)
        errors[p.name or k] = relative_error(analytic, numeric)
    return errors
