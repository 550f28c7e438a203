"""Dense numpy tensors with reverse-mode differentiation over a fixed primitive set.

Operations record themselves on the innermost active ``Tape``; with no tape active
they only compute values. ``Tape.backward`` walks the records once, newest first.
"""

import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional

import numpy as np

from src.errors import EmptyMaskSet, EmptyMatrix, NonFiniteDetected, ShapeMismatch

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype=np.float64):
    """Switch the dtype new tensors are created with (float64 shadow mode for gradient checks)."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 stream derived from integer keys; identical keys give identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; backward visits each record exactly once, in reverse."""

    def __init__(self, strict: bool = False):
        self.strict = strict
        self.entries = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def record(self, inputs: tuple, output: Tensor, backward: Callable):
        self.entries.append((inputs, output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        if self._consumed:
            raise RuntimeError("Tape.backward may only run once")
        self._consumed = True
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
        for inputs, output, backward in reversed(self.entries):
            if output.grad is None:
                continue
            for tensor, g in zip(inputs, backward(output.grad)):
                if g is None or not tensor.requires_grad:
                    continue
                g = _unbroadcast(g, tensor.shape)
                tensor.grad = g if tensor.grad is None else tensor.grad + g
        self.entries.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(data: np.ndarray, inputs: tuple, backward: Callable, op: str) -> Tensor:
    tapes = _tapes()
    tape = tapes[-1] if tapes else None
    if tape is not None and tape.strict and not np.all(np.isfinite(data)):
        raise NonFiniteDetected(f"{op} produced a non-finite value")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires and tape is not None:
        tape.record(inputs, out, backward)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def matmul(a, b) -> Tensor:
    """a[..., m, k] @ b[k, n] or batched b[..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    original = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = GELU_C * (x + GELU_K * x**3)
    th = np.tanh(inner)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_K * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _emit(0.5 * x * (1.0 + th), (a,), backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalizes over the last axis, then applies gain and bias."""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeMismatch(f"layer_norm of {x.shape} with gain {gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * rstd

    def backward(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g * xhat, g

    return _emit(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def masked_softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; rows with no finite entry become all zeros."""
    m = z.max(axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    e = np.exp(z - np.where(dead, 0.0, m))
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s == 0.0, 1.0, s)
    return np.where(dead, 0.0, p).astype(z.dtype)


def softmax_lastdim(x: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    z = x.data if additive_mask is None else x.data + additive_mask
    p = masked_softmax(z)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), backward, "softmax")


def mean_pool(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean of x[B, T, N, d] over the (t, i) positions whose packet row is valid."""
    if x.ndim != 4 or valid.shape != x.shape[:2]:
        raise ShapeMismatch(f"mean_pool of {x.shape} with valid mask {valid.shape}")
    weight = valid.astype(x.data.dtype)[:, :, None, None]
    count = weight.sum(axis=(1, 2)) * x.shape[2]
    if np.any(count == 0):
        raise EmptyMatrix("mean_pool over a flow with no valid packet")

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] * weight / count[:, None, None, :], x.shape).copy(),)

    return _emit((x.data * weight).sum(axis=(1, 2)) / count, (x,), backward, "mean_pool")


def mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the cells where mask is true."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeMismatch(f"mse of {pred.shape} vs {target.shape} under mask {mask.shape}")
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise EmptyMaskSet("No target cell to reconstruct")
    m = mask.astype(pred.data.dtype)
    diff = (pred.data - target) * m

    def backward(g):
        return (g * 2.0 * diff / n,)

    return _emit(np.asarray((diff**2).sum() / n, dtype=pred.data.dtype), (pred,), backward, "mse")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits[B, C] against integer labels[B]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy of {logits.shape} with labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(labels))

    def backward(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return (g * grad / len(labels),)

    return _emit(np.asarray(-log_p[rows, labels].mean(), dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def multihead_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, heads: int, params: dict,
                        mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Scaled dot-product attention over [B, S, d] inputs.

    params holds Wq, bq, Wk, bk, Wv, bv, Wo, bo. mask is additive, broadcastable to
    [B, heads, S, S], with -inf at disallowed keys; a query with every key disallowed
    gets a zero context vector.
    """
    b, s, d = q_in.shape
    if d % heads:
        raise ShapeMismatch(f"model width {d} is not divisible by {heads} heads")
    if mask is not None and (mask.ndim != 4 or mask.shape[0] not in (1, b) or mask.shape[-2:] != (s, s)):
        raise ShapeMismatch(f"attention mask of shape {mask.shape} for B={b}, S={s}")
    q = _split_heads(linear(q_in, params["Wq"], params["bq"]), heads)
    k = _split_heads(linear(k_in, params["Wk"], params["bk"]), heads)
    v = _split_heads(linear(v_in, params["Wv"], params["bv"]), heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    weights = softmax_lastdim(scores, mask)
    context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, s, d))
    return linear(context, params["Wo"], params["bo"])


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar fn() with respect to tensor.data."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = float(fn())
        flat[i] = original - eps
        minus = float(fn())
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad
