"""
Dense float64 tensors with a scoped reverse-mode tape.

Operations record themselves only while a Tape is active and at least one input
requires a gradient, so forward-only inference allocates no graph. Records are
appended in creation order, which is always a valid topological order; backward()
simply walks them in reverse.
"""

import logging
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from app.util import ConfigError, DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


#
# Tape
#


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


class Tape:
    """Scoped gradient tape; use as a context manager around a forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")
    tape = current_tape()
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.wrap(data, requires_grad=tracked)
    if tracked:
        tape.records.append(_Record(out, tuple(parents), backward, op))
    return out


def backward(loss: Tensor, params: Sequence[Tensor] | None = None, tape: Tape | None = None):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf tensor."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or current_tape()
    if tape is None:
        raise UsageError("backward needs the tape the loss was recorded on")

    produced = {id(record.out) for record in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad and id(loss) not in produced:
        _accumulate_leaf(loss, grads.pop(id(loss)))

    for record in reversed(tape.records):
        grad = grads.pop(id(record.out), None)
        if grad is None:
            continue
        for parent, parent_grad in zip(record.parents, record.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NumericError(f"{record.op}: produced non-finite gradients")
            if id(parent) in produced:
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
            else:
                _accumulate_leaf(parent, parent_grad)

    for param in params or ():
        if param.grad is None:
            param.grad = np.zeros_like(param.data)


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray):
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
    leaf.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


#
# Elementwise arithmetic
#


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def pow_(x: Tensor, exponent: float) -> Tensor:
    return _result(
        np.power(x.data, exponent),
        (x,),
        lambda g: (g * _pow_slope(x.data, exponent),),
        "pow",
    )


def _pow_slope(x: np.ndarray, exponent: float) -> np.ndarray:
    # the one-sided slope at 0 is taken as 0 for exponents below 1
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = exponent * np.power(x, exponent - 1)
    return np.where(x == 0, 0.0, slope) if exponent < 1 else slope


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -x.data)
    return _result(
        out, (x,), lambda g: (g * 0.5 * (1.0 - np.tanh(0.5 * x.data)),), "log_sigmoid"
    )


def smooth_l1(pred: Tensor, target, beta: float) -> Tensor:
    """Elementwise smooth-L1 of (pred - target)."""
    target = as_tensor(target)
    diff = pred.data - target.data
    small = np.abs(diff) < beta
    out = np.where(small, 0.5 * diff * diff / beta, np.abs(diff) - 0.5 * beta)
    slope = np.where(small, diff / beta, np.sign(diff))
    return _result(out, (pred, target), lambda g: (g * slope, -g * slope), "smooth_l1")


#
# Reductions and shape
#


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out, dtype=np.float64), (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, int | slice) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(x.data[index]), (x,), _backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise DimensionError(
                f"concat on axis {axis}: shapes {ref} and {t.shape} differ off-axis"
            )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
        "stack",
    )


#
# Contractions
#


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract {a.shape} with {b.shape}")

    def _backward(g):
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return _result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every operand index must survive in the output or the
    other operand so both gradients are plain einsums."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or any(c not in out and c not in other for c in own):
            raise UsageError(f"einsum: unsupported subscripts {subscripts}")
    try:
        data = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as e:
        raise DimensionError(f"einsum {subscripts}: {a.shape} with {b.shape}") from e

    def _backward(g):
        grad_a = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True)
        grad_b = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True)
        return grad_a, grad_b

    return _result(np.asarray(data, dtype=np.float64), (a, b), _backward, "einsum")


#
# Normalised exponentials
#


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over entries where mask is true; masked entries get weight exactly 0
    and never influence the others. Rows with nothing valid are all zero."""
    mask = np.broadcast_to(mask, x.shape)
    masked = np.where(mask, x.data, -np.inf)
    peak = np.max(masked, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.where(mask, np.exp(np.where(mask, x.data - peak, 0.0)), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward, "masked_softmax")


#
# Layer primitives
#


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding: int | str = "same",
    stride: int = 1,
) -> Tensor:
    """Cross-correlation on NHWC input with a [K, K, Cin, Cout] kernel."""
    k = weight.shape[0]
    if weight.ndim != 4 or weight.shape[1] != k or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be odd and square, got {weight.shape}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")
    if padding == "same":
        padding = (k - 1) // 2
    if x.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")

    batch, height, width, _ = x.shape
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than input {x.shape}")
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))

    def window(i, j):
        return (
            slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride),
            slice(None),
        )

    out = np.zeros((batch, out_h, out_w, weight.shape[3]))
    for i in range(k):
        for j in range(k):
            out += padded[window(i, j)] @ weight.data[i, j]
    if bias is not None:
        out += bias.data

    def _backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(weight.data)
        cin, cout = weight.shape[2], weight.shape[3]
        flat_g = g.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                patch = padded[window(i, j)]
                grad_w[i, j] = patch.reshape(-1, cin).T @ flat_g
                grad_padded[window(i, j)] += g @ weight.data[i, j].T
        grad_x = grad_padded[:, padding : padding + height, padding : padding + width, :]
        grad_b = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (B, H, W). Training mode updates the running
    statistics in place; eval mode reads them frozen."""
    axes = tuple(range(x.ndim - 1))
    if training:
        count = int(np.prod([x.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        count = 0
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = gamma.data * x_hat + beta.data

    def _backward(g):
        grad_gamma = np.sum(g * x_hat, axis=axes)
        grad_beta = np.sum(g, axis=axes)
        d_hat = g * gamma.data
        if training:
            grad_x = (inv_std / count) * (
                count * d_hat
                - np.sum(d_hat, axis=axes)
                - x_hat * np.sum(d_hat * x_hat, axis=axes)
            )
        else:
            grad_x = d_hat * inv_std
        return grad_x, grad_gamma, grad_beta

    return _result(out, (x, gamma, beta), _backward, "batchnorm2d")


def bilinear_sample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Sample x[H, W, C] at fractional pixel coordinates (pixel centres are integer).

    Neighbours outside the map contribute zero; the returned mask is the total
    weight that landed on in-bounds pixels, so it is 1 inside, 0 fully outside and
    fractional on the border.
    """
    height, width = x.shape[0], x.shape[1]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    taps = []
    mask = np.zeros(rows.shape)
    for dr, dc, w in (
        (0, 0, (1.0 - fr) * (1.0 - fc)),
        (0, 1, (1.0 - fr) * fc),
        (1, 0, fr * (1.0 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        weight = np.where(inside, w, 0.0)
        mask += weight
        taps.append((np.clip(rr, 0, height - 1), np.clip(cc, 0, width - 1), weight))

    out = np.zeros(rows.shape + (x.shape[2],))
    for rr, cc, weight in taps:
        out += weight[..., None] * x.data[rr, cc]

    def _backward(g):
        grad = np.zeros_like(x.data)
        for rr, cc, weight in taps:
            np.add.at(grad, (rr, cc), weight[..., None] * g)
        return (grad,)

    return _result(out, (x,), _backward, "bilinear_sample"), mask
