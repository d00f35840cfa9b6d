"""Dense float64 tensors with a small reverse-mode tape.

Every op returns a new Tensor; when gradients are enabled and an input
requires grad, the output remembers its parents and a closure mapping the
output gradient to one gradient per parent. The tape lives on the tensors a
call creates, so independent evaluations never share state.
"""
import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import InvalidParam, NonFinite, ShapeMismatch

logger = logging.getLogger(__name__)

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (per thread / task)"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """float64 array plus optional gradient bookkeeping"""

    # ndarray (op) Tensor dispatches to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFinite(f"non-finite values in tensor{' ' + name if name else ''}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(out.data)):
            raise NonFinite(f"{op} produced non-finite values")
        out.grad = None
        out.name = None
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    # --- autograd core ---
    def _topological_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise InvalidParam("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("grad must be provided for non-scalar outputs")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- element-wise ops ---
    def __add__(self, other) -> "Tensor":
        a, b = self, as_tensor(other)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._from_op(a.data + b.data, (a, b), backward, "add")

    def __radd__(self, other) -> "Tensor":
        return as_tensor(other) + self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        a, b = self, as_tensor(other)

        def backward(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
        return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        a, b = self, as_tensor(other)

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")

    def __rmul__(self, other) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other) -> "Tensor":
        a, b = self, as_tensor(other)

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return Tensor._from_op(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise InvalidParam("only scalar exponents are supported")
        a = self
        exponent = float(exponent)

        def backward(g):
            return (g * exponent * a.data ** (exponent - 1.0),)
        return Tensor._from_op(a.data ** exponent, (a,), backward, "pow")

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._from_op(out_data, (self,), lambda g: (g * out_data,), "exp")

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(a.data)
        return Tensor._from_op(out_data, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self) -> "Tensor":
        # zero-safe: the subgradient at 0 is taken as 0
        out_data = np.sqrt(np.maximum(self.data, 0.0))

        def backward(g):
            safe = np.where(out_data > 0, out_data, 1.0)
            return (np.where(out_data > 0, 0.5 * g / safe, 0.0),)
        return Tensor._from_op(out_data, (self,), backward, "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._from_op(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def clip_min(self, lower: float) -> "Tensor":
        mask = self.data > lower
        return Tensor._from_op(np.maximum(self.data, lower), (self,), lambda g: (g * mask,), "clip_min")

    # --- reductions and shape ---
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def __getitem__(self, index) -> "Tensor":
        original = self.shape

        def backward(g):
            full = np.zeros(original)
            np.add.at(full, index, g)
            return (full,)
        return Tensor._from_op(self.data[index], (self,), backward, "index")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class ActivationParams:
    """K (growth factor) and T (exponent) of the attention activation"""
    K: float = 0.5
    T: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.K < 1.0:
            raise InvalidParam(f"activation K must lie in (0, 1), got {self.K}")
        if not self.T > 0.0:
            raise InvalidParam(f"activation T must be > 0, got {self.T}")


def delta_activation(x, params: ActivationParams) -> Tensor:
    """K*(x+1)^T for x > 0, K*e^x for x <= 0 (left derivative used at 0).

    Outputs never drop below the smallest normal double, so very negative
    inputs still give strictly positive maps.
    """
    x = as_tensor(x)
    positive = x.data > 0
    xp = np.where(positive, x.data, 0.0)
    xn = np.where(positive, 0.0, x.data)
    K, T = params.K, params.T
    out = np.maximum(np.where(positive, K * (xp + 1.0) ** T, K * np.exp(xn)), np.finfo(np.float64).tiny)
    slope = np.where(positive, K * T * (xp + 1.0) ** (T - 1.0), K * np.exp(xn))
    return Tensor._from_op(out, (x,), lambda g: (g * slope,), "delta_activation")


def gem_pool(x, p: float = 3.0, eps: float = 1e-6) -> Tensor:
    """Generalized-mean pooling over the two trailing (spatial) axes.

    Values below eps are clamped to eps first so fractional powers stay real.
    """
    if p < 1.0:
        raise InvalidParam(f"GeM exponent must be >= 1, got {p}")
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"GeM needs at least two spatial axes, got shape {x.shape}")
    return (x.clip_min(eps) ** p).mean(axis=(-2, -1)) ** (1.0 / p)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of C×H×W (or N×C×H×W) input with O×C×k×k kernels"""
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise InvalidParam(f"invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c or kh != kw:
        raise ShapeMismatch(f"kernel {weight.shape} incompatible with {c} input channels")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {k}×{k} larger than padded input {h}×{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        return grad_xp[:, :, padding:padding + h, padding:padding + w], grad_w

    result = Tensor._from_op(np.ascontiguousarray(out), (x, weight), backward, "conv2d")
    if bias is not None:
        result = result + as_tensor(bias).reshape(1, o, 1, 1)
    if single:
        result = result.reshape(result.shape[1:])
    return result


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T (+ bias) for N×D input and O×D weight"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")

    def backward(g):
        return g @ weight.data, g.T @ x.data
    out = Tensor._from_op(x.data @ weight.data.T, (x, weight), backward, "linear")
    return out if bias is None else out + bias


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of N×K logits against integer labels"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeMismatch("cross_entropy: label outside the logit range")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (g * probs / n,)
    return Tensor._from_op(np.array(loss), (logits,), backward, "cross_entropy")


def l2_norm(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    return (x * x).sum(axis=axis).sqrt()


def _scalar(value, what: str) -> float:
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if data.size != 1:
        raise ShapeMismatch(f"{what} must be scalar-valued, got shape {data.shape}")
    result = float(data.reshape(-1)[0])
    if not np.isfinite(result):
        raise NonFinite(f"{what} returned {result}")
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               skip: Optional[np.ndarray] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Coordinates flagged in `skip` (same shape as x) are left out, which is how
    callers exclude neighbourhoods of kinks.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    value = f(leaf)
    _scalar(value, "grad_check target")
    if isinstance(value, Tensor) and value.requires_grad:
        value.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    with no_grad():
        for idx in np.ndindex(base.shape):
            if skip is not None and skip[idx]:
                continue
            shifted = base.copy()
            shifted[idx] = base[idx] + step
            upper = _scalar(f(Tensor(shifted)), "grad_check target")
            shifted[idx] = base[idx] - step
            lower = _scalar(f(Tensor(shifted)), "grad_check target")
            numeric = (upper - lower) / (2.0 * step)
            error = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, error)
    logger.debug(f"grad_check over {base.size} coordinates: max relative error {worst:.3e}")
    return worst
