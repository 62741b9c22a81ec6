"""Dense float tensors with reverse-mode automatic differentiation.

Ops run as plain numpy when no tape is active. Inside a ``GradientTape``
block every op whose inputs require gradients records a backward rule;
``tape.backward(loss)`` replays the records in reverse creation order,
which is a valid topological order, so each tensor's gradient is complete
before it is propagated to its producers. A tensor consumed twice simply
accumulates both contributions. One tape covers one training step.

Broadcasting is deliberately restricted to exact-shape and scalar
operands; anything else goes through explicit ``reshape``/``expand``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype):
    """Temporarily switch the default float width for newly created tensors.

    Training and inference run in float32; gradient checking switches the
    whole core to float64 with ``precision("float64")``.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def active_tape() -> "GradientTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense row-major float array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        dtype = default_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class GradientTape:
    """Ordered record of forward ops for one step; replayed once in reverse."""

    def __init__(self):
        self._records: list = []
        self._used = False

    def __enter__(self) -> "GradientTape":
        if active_tape() is not None:
            raise RuntimeError("a GradientTape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if self._used:
            raise RuntimeError("backward() already ran on this tape; build a new tape")
        self._used = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        for out, inputs, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for tensor, gi in zip(inputs, grads):
                if gi is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += gi


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap an op result, registering its backward rule on the active tape.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per entry of ``inputs``. Non-tensor arguments belong in the
    closure, not in ``inputs``.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._records.append((out, tuple(inputs), backward))
    return out


# ---------------------------------------------------------------------------
# core ops


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return record_op(ad @ bd, (a, b), backward)


def conv1d_time(x, w, mask) -> Tensor:
    """Causal convolution over the time axis.

    ``x`` is [T, C_in] or [batch, T, C_in], ``w`` is [k, C_in, C_out] and
    ``mask`` marks valid timesteps. The input is left-padded with k-1 zero
    frames so the output keeps length T; masked positions emit zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise ShapeError(f"conv1d_time: weight must be [k, C_in, C_out], got {w.shape}")
    k = w.shape[0]
    if k < 1:
        raise ConfigError(f"conv1d_time: kernel width must be >= 1, got {k}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d_time: input {x.shape} does not match weight {w.shape}")
    md = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    md = (md[None] if squeeze else md).astype(xd.dtype)
    if md.shape != xd.shape[:2]:
        raise ShapeError(f"conv1d_time: mask {md.shape} does not cover timesteps {xd.shape[:2]}")

    batch, T, c_in = xd.shape
    wd = w.data
    c_out = wd.shape[2]
    xp = np.concatenate([np.zeros((batch, k - 1, c_in), dtype=xd.dtype), xd], axis=1)
    # gather the k taps into one [B*T, k*C_in] window matrix so both the
    # forward product and the backward contractions are single BLAS calls
    windows = np.empty((batch, T, k * c_in), dtype=xd.dtype)
    for j in range(k):
        windows[:, :, j * c_in : (j + 1) * c_in] = xp[:, j : j + T]
    flat_w = wd.reshape(k * c_in, c_out)
    flat_windows = windows.reshape(batch * T, k * c_in)
    out = (flat_windows @ flat_w).reshape(batch, T, c_out)
    out *= md[..., None]

    def backward(g):
        gm = (g * md[..., None]).reshape(batch * T, c_out)
        dw = (flat_windows.T @ gm).reshape(k, c_in, c_out)
        dwin = (gm @ flat_w.T).reshape(batch, T, k, c_in)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j : j + T] += dwin[:, :, j]
        dx = dxp[:, k - 1 :]
        return (dx[0] if squeeze else dx), dw

    return record_op(out[0] if squeeze else out, (x, w), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(
            f"elementwise: shapes {a.shape} and {b.shape} are neither equal nor scalar"
        )
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(bwd_a(g, ad, bd), a.shape),
            _unbroadcast(bwd_b(g, ad, bd), b.shape),
        )

    return record_op(fwd(ad, bd), (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # evaluate on the negative half-line to avoid exp overflow
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = out.astype(xd.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return record_op(out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0)

    def backward(g):
        return (g * (xd > 0),)

    return record_op(out, (x,), backward)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "mul": mul,
    "add": add,
    "sub": sub,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (sigmoid/tanh/relu/mul/add/sub)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(x, axis: int = -1) -> Tensor:
    """Exp-normalization along ``axis`` with max-subtraction for stability."""
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op(out, (x,), backward)


def log_softmax_data(xd: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = xd - xd.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target, mask=None) -> Tensor:
    """Mean cross-entropy of softmax(logits) against hard or soft targets.

    ``target`` is either an integer array of class indices with shape
    logits.shape[:-1], or a distribution of the same shape as ``logits``
    (rows summing to 1), which is what distillation feeds in. ``mask``
    (shape logits.shape[:-1]) excludes padded positions from the mean.
    Targets are constants: no gradient flows into them.
    """
    logits = as_tensor(logits)
    ld = logits.data
    C = ld.shape[-1]
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.dtype.kind in "iu":
        if tgt.shape != ld.shape[:-1]:
            raise ShapeError(f"class-index target {tgt.shape} does not match logits {ld.shape}")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= C):
            raise InputError(f"class index out of range for {C} classes")
        dist = np.zeros_like(ld)
        np.put_along_axis(dist, tgt[..., None], 1.0, axis=-1)
    else:
        if tgt.shape != ld.shape:
            raise ShapeError(
                f"target length {tgt.shape[-1] if tgt.ndim else 0} != class count {C}"
                f" (target shape {tgt.shape}, logits shape {ld.shape})"
            )
        sums = tgt.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-3):
            raise InputError("soft targets must sum to 1 along the class axis")
        dist = tgt.astype(ld.dtype)

    if mask is None:
        m = np.ones(ld.shape[:-1], dtype=ld.dtype)
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(ld.dtype)
        if m.shape != ld.shape[:-1]:
            raise ShapeError(f"mask {m.shape} does not match positions {ld.shape[:-1]}")
    n_valid = m.sum()
    if n_valid == 0:
        raise InputError("cross_entropy: no unmasked positions")

    logp = log_softmax_data(ld, axis=-1)
    per_pos = -(dist * logp).sum(axis=-1)
    loss = (per_pos * m).sum() / n_valid
    probs = np.exp(logp)

    def backward(g):
        return (g * (probs - dist) * m[..., None] / n_valid,)

    return record_op(np.asarray(loss, dtype=ld.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return record_op(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return record_op(x.data.transpose(axes), (x,), backward)


def expand(x, shape) -> Tensor:
    """Explicit broadcast to ``shape`` (the only non-scalar broadcast allowed)."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from exc
    orig = x.shape
    # axes that were added or stretched get summed out on the way back
    added = len(shape) - len(orig)
    stretched = tuple(range(added)) + tuple(
        added + i for i, (a, b) in enumerate(zip(orig, shape[added:])) if a == 1 and b != 1
    )

    def backward(g):
        gi = g.sum(axis=stretched, keepdims=False) if stretched else g
        return (gi.reshape(orig),)

    return record_op(np.array(out), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return record_op(np.asarray(xd.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    count = xd.size if axis is None else xd.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy() / count,)

    return record_op(np.asarray(xd.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def reverse_sequence(x, lengths, time_axis: int = 1) -> Tensor:
    """Reverse each sequence within its valid length, leaving padding in place.

    ``x`` is [batch, T, ...] (time_axis=1) or [T, ...] (time_axis=0);
    ``lengths`` gives the valid length per sequence. Self-inverse.
    """
    x = as_tensor(x)
    lengths = np.asarray(lengths, dtype=np.int64)
    if time_axis == 0:
        T = x.shape[0]
        idx = np.arange(T)
        n = int(lengths.reshape(()))
        perm = np.concatenate([idx[:n][::-1], idx[n:]])

        def backward(g):
            return (g[perm],)

        return record_op(x.data[perm], (x,), backward)

    batch, T = x.shape[0], x.shape[1]
    if lengths.shape != (batch,):
        raise ShapeError(f"reverse_sequence: lengths {lengths.shape} does not match batch {batch}")
    idx = np.arange(T)[None, :].repeat(batch, axis=0)
    for b in range(batch):
        n = lengths[b]
        idx[b, :n] = idx[b, :n][::-1]
    rows = np.arange(batch)[:, None]

    def backward(g):
        return (g[rows, idx],)

    return record_op(x.data[rows, idx], (x,), backward)


def assert_finite(x: Tensor, what: str = "tensor") -> Tensor:
    """Raise if the forward invariant (all values finite) is broken."""
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x
