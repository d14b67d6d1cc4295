import contextlib
import contextvars
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.errors import (
    ContractError,
    DimensionError,
    LabelRangeError,
    MissingNodeError,
    NumericError,
)

logger = logging.getLogger(__name__)

_dtype = contextvars.ContextVar('catf_dtype', default=np.float32)
_active_tape = contextvars.ContextVar('catf_active_tape', default=None)
_relaxed = contextvars.ContextVar('catf_relaxed_spikes', default=False)


@contextlib.contextmanager
def default_dtype(dtype):
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


@contextlib.contextmanager
def relaxed_spikes():
    """Replace the Heaviside forward by sigmoid(x / width). Gradient checks only."""
    token = _relaxed.set(True)
    try:
        yield
    finally:
        _relaxed.reset(token)


class Tensor:
    def __init__(self, data, requires_grad=False, name=''):
        self.data = np.array(data, dtype=_dtype.get())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, array, requires_grad):
        out = cls.__new__(cls)
        out.data = array
        out.grad = None
        out.requires_grad = requires_grad
        out.name = ''
        return out

    @classmethod
    def zeros(cls, shape, requires_grad=False, name=''):
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @classmethod
    def full(cls, shape, value, requires_grad=False, name=''):
        return cls(np.full(shape, value), requires_grad=requires_grad, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f'item() needs a single-element tensor, got shape {self.shape}')
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        label = f' {self.name!r}' if self.name else ''
        return f'<Tensor{label} shape={self.shape}{flag}>'


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    node_id: int
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    # execution order is a topological order

    def __init__(self):
        self.nodes = []
        self.next_id = 0
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(self.next_id, op, tuple(inputs), output, backward_fn))
        self.next_id += 1

    def __len__(self):
        return len(self.nodes)


def _check_finite(array, op):
    if not np.isfinite(array).all():
        raise NumericError(f'{op} produced non-finite values')


def _record(op, out_data, inputs, backward_fn):
    _check_finite(out_data, op)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad)
    tape = _active_tape.get()
    if requires_grad and tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} do not broadcast') from None


# Elementwise arithmetic

def add(a, b):
    _require_broadcast(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record('add', a.data + b.data, (a, b), backward)


def sub(a, b):
    _require_broadcast(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record('sub', a.data - b.data, (a, b), backward)


def mul(a, b):
    _require_broadcast(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record('mul', a.data * b.data, (a, b), backward)


def scale(a, factor):
    def backward(g):
        return (g * factor,)

    return _record('scale', a.data * factor, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record('relu', np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul: cannot multiply {a.shape} by {b.shape}')
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.data.ndim == 2:
            k, n = b.shape
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record('matmul', out, (a, b), backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# Shape manipulation

def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return _record('reshape', a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record('transpose', np.transpose(a.data, axes), (a,), backward)


def index(a, i):
    def backward(g):
        grad = np.zeros_like(a.data)
        grad[i] = g
        return (grad,)

    return _record('index', a.data[i], (a,), backward)


def take_slice(a, start, stop):
    """Contiguous slice of a 1-D tensor."""
    if a.data.ndim != 1 or not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f'take_slice: [{start}:{stop}] out of range for shape {a.shape}')

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[start:stop] = g
        return (grad,)

    return _record('slice', a.data[start:stop], (a,), backward)


def stack(tensors):
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f'stack: mismatched shapes {sorted(shapes)}')

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record('stack', np.stack([t.data for t in tensors]), tuple(tensors), backward)


# Reductions

def sum_(a, axis=None):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record('sum', np.asarray(a.data.sum(axis=axis), dtype=a.data.dtype), (a,), backward)


def mean(a, axis=None):
    axes = tuple(range(a.data.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis), 1.0 / count)


# Spiking nonlinearity

class SurrogateKind(str, Enum):
    RECTANGULAR = 'rectangular'
    SIGMOID_DERIVATIVE = 'sigmoid_derivative'
    TRIANGULAR = 'triangular'


@dataclass(frozen=True)
class SurrogateSpec:
    kind: SurrogateKind = SurrogateKind.RECTANGULAR
    width: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'kind', SurrogateKind(self.kind))
        if not self.width > 0:
            raise ContractError(f'surrogate width must be positive, got {self.width}')

    def derivative(self, x):
        x = np.asarray(x)
        if self.kind is SurrogateKind.RECTANGULAR:
            return (np.abs(x) <= self.width).astype(x.dtype)
        if self.kind is SurrogateKind.TRIANGULAR:
            return np.maximum(0.0, 1.0 - np.abs(x) / self.width).astype(x.dtype)
        return _sigmoid_slope(x, self.width).astype(x.dtype)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_slope(x, width):
    s = _sigmoid(-np.abs(x) / width)
    return s * (1.0 - s) / width


DEFAULT_SURROGATE = SurrogateSpec()


def heaviside_surrogate(x, spec=DEFAULT_SURROGATE):
    """Exact step forward (fires at x >= 0), surrogate derivative backward."""
    if not np.isfinite(x.data).all():
        raise NumericError('heaviside_surrogate received non-finite input')

    if _relaxed.get():
        s = _sigmoid(x.data / spec.width)

        slope = _sigmoid_slope(x.data, spec.width)

        def relaxed_backward(g):
            return (g * slope,)

        return _record('sigmoid_relaxed', s, (x,), relaxed_backward)

    out = (x.data >= 0).astype(x.data.dtype)

    def backward(g):
        return (g * spec.derivative(x.data),)

    return _record('heaviside', out, (x,), backward)


# Normalization

def batch_norm(x, weight, bias, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel affine normalization over every axis except the last.

    In training mode batch statistics normalize ``x`` and ``running_mean`` /
    ``running_var`` (plain Tensors, never on the tape) are updated in place.
    """
    channels = x.shape[-1]
    if weight.shape != (channels,) or bias.shape != (channels,):
        raise DimensionError(f'batch_norm: affine shapes {weight.shape}/{bias.shape} vs input {x.shape}')
    axes = tuple(range(x.data.ndim - 1))
    count = int(np.prod(x.shape[:-1]))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (count / max(count - 1, 1))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data
        var = running_var.data

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        grad_w = (g * xhat).sum(axis=axes)
        grad_b = g.sum(axis=axes)
        dxhat = g * weight.data
        if training:
            grad_x = inv / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            grad_x = dxhat * inv
        return grad_x, grad_w, grad_b

    return _record('batch_norm', out.astype(x.data.dtype), (x, weight, bias), backward)


# Loss

def cross_entropy(logits, labels):
    if logits.data.ndim != 2:
        raise DimensionError(f'cross_entropy expects [B, C] logits, got {logits.shape}')
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if batch < 1 or labels.shape != (batch,):
        raise DimensionError(f'cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {batch}')
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelRangeError(f'labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]')

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = np.asarray(-log_probs[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _record('cross_entropy', loss, (logits,), backward)


# Gradient propagation

def backward(loss, tape):
    """Fill ``.grad`` of every leaf that requires a gradient with d(loss)/d(leaf)."""
    if loss.data.size != 1:
        raise ContractError(f'backward needs a scalar loss, got shape {loss.shape}')

    end = None
    for position in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[position].output is loss:
            end = position
            break
    if end is None:
        raise MissingNodeError('loss was not produced by an operation recorded on this tape')

    produced = set()
    for node in tape.nodes[: end + 1]:
        produced.add(id(node.output))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if key not in produced:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        grad = np.asarray(grads[key], dtype=tensor.data.dtype).reshape(tensor.shape)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def sgd_step(params, lr):
    for p in params:
        if p.grad is None:
            raise ContractError(f'parameter {p.name or p.shape} has no gradient')
    for p in params:
        p.data -= (lr * p.grad).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)


class SGD:
    def __init__(self, groups, post_step=None):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.post_step = post_step

    @property
    def parameters(self):
        return [p for params, _ in self.groups for p in params]

    def step(self):
        for params, lr in self.groups:
            if params:
                sgd_step(params, lr)
        if self.post_step is not None:
            self.post_step()

    def zero_grad(self):
        for p in self.parameters:
            p.grad = None
