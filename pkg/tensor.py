"""
Dense float64 tensors with reverse-mode automatic differentiation.

Images use the channels x height x width layout; a batch axis may be
prepended (N x C x H x W) and every op below accepts either form.

Conventions:
  - conv2d is a cross-correlation (the kernel is not flipped) with zero
    padding, in both the forward and the backward pass.
  - Elementwise ops require equal shapes; the only broadcasting allowed is
    against a scalar (a Python number or a 0-d tensor).
  - relu has subgradient 0 at exactly 0.
  - backward() accumulates into ``.grad`` of every leaf that requires
    gradients; call zero_grad() between steps to reset.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import Config
from errors import DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = np.float64
EPS_RECIP = Config.EPS_RECIP

Scalar = Union[int, float]

# Relu masks recorded while grad_check evaluates f, to spot finite differences that straddle a kink
_relu_masks = threading.local()


class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives the input arrays and returns the output array;
    ``backward`` receives dLoss/dOutput and returns one gradient (or None)
    per input, in input order.
    """

    name = 'function'

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors
        self.needs_input_grad = tuple(t.requires_grad for t in tensors)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            raise DomainError(f"{cls.name}: produced non-finite values")
        requires_grad = any(func.needs_input_grad)
        return Tensor._wrap(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """A float64 array that can take part in an autodiff graph."""

    __slots__ = ('data', 'requires_grad', 'grad', 'creator')

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=DTYPE)
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatchError('tensor', 'shape', 'positive extents', array.shape)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False,
              creator: Optional[Function] = None) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(array, dtype=DTYPE)
        # ascontiguousarray would promote 0-d results to shape (1,)
        if not data.flags.c_contiguous:
            data = data.copy(order='C')
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.creator = creator
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=DTYPE), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=DTYPE), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, requires_grad: bool = False) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=DTYPE), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError('item', 'size', 1, self.data.size)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)

    def __add__(self, other):
        return elementwise('add', self, other)

    def __radd__(self, other):
        return elementwise('add', _as_tensor(other), self)

    def __sub__(self, other):
        return elementwise('sub', self, other)

    def __rsub__(self, other):
        return elementwise('sub', _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise('mul', self, other)

    def __rmul__(self, other):
        return elementwise('mul', _as_tensor(other), self)

    def __neg__(self):
        return elementwise('mul', self, -1.0)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(value: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPE), requires_grad=False)


def _is_scalar(array: np.ndarray) -> bool:
    return array.ndim == 0


def _raise_mismatch(op: str, shape_a: Tuple[int, ...], shape_b: Tuple[int, ...]) -> None:
    if len(shape_a) != len(shape_b):
        raise ShapeMismatchError(op, 'rank', len(shape_a), len(shape_b))
    for axis, (ea, eb) in enumerate(zip(shape_a, shape_b)):
        if ea != eb:
            raise ShapeMismatchError(op, f"axis {axis}", ea, eb)


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    _raise_mismatch(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Collapse a gradient onto a scalar operand when it was broadcast."""
    if _is_scalar(like) and grad.ndim != 0:
        return np.asarray(grad.sum(), dtype=DTYPE)
    return grad


class Add(Function):
    name = 'add'

    def forward(self, a, b):
        _check_elementwise(self.name, a, b)
        self.shapes = (a, b)
        return a + b

    def backward(self, grad):
        a, b = self.shapes
        return _reduce_to(grad, a), _reduce_to(grad, b)


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        _check_elementwise(self.name, a, b)
        self.shapes = (a, b)
        return a - b

    def backward(self, grad):
        a, b = self.shapes
        return _reduce_to(grad, a), _reduce_to(-grad, b)


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        _check_elementwise(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _reduce_to(grad * self.b, self.a) if self.needs_input_grad[0] else None
        gb = _reduce_to(grad * self.a, self.b) if self.needs_input_grad[1] else None
        return ga, gb


class Reciprocal(Function):
    name = 'reciprocal'

    def forward(self, a):
        if np.any(np.abs(a) < EPS_RECIP):
            worst = float(np.min(np.abs(a)))
            raise DomainError(f"reciprocal: |input| must be >= {EPS_RECIP} (min |input| = {worst:g})")
        self.out = 1.0 / a
        return self.out

    def backward(self, grad):
        return (-grad * self.out * self.out,)


class Relu(Function):
    name = 'relu'

    def forward(self, a):
        self.mask = a > 0
        masks = getattr(_relu_masks, 'masks', None)
        if masks is not None:
            masks.append(self.mask)
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    name = 'sum'

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=DTYPE)

    def backward(self, grad):
        return (np.full(self.shape, float(grad), dtype=DTYPE),)


class Mean(Function):
    name = 'mean'

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=DTYPE)

    def backward(self, grad):
        return (np.full(self.shape, float(grad) / np.prod(self.shape), dtype=DTYPE),)


class MeanSquaredError(Function):
    name = 'reduce_mse'

    def forward(self, pred, target):
        if pred.shape != target.shape:
            _raise_mismatch(self.name, pred.shape, target.shape)
        self.diff = pred - target
        return np.asarray(np.mean(self.diff * self.diff), dtype=DTYPE)

    def backward(self, grad):
        g = (2.0 * float(grad) / self.diff.size) * self.diff
        return g, -g


class ConcatChannels(Function):
    name = 'concat_channels'

    def forward(self, *parts):
        first = parts[0]
        for index, part in enumerate(parts[1:], start=1):
            if part.ndim != first.ndim:
                raise ShapeMismatchError(self.name, f"rank of part {index}", first.ndim, part.ndim)
            if part.shape[:-3] != first.shape[:-3]:
                raise ShapeMismatchError(self.name, f"batch of part {index}", first.shape[0], part.shape[0])
            if part.shape[-2] != first.shape[-2]:
                raise ShapeMismatchError(self.name, f"height of part {index}", first.shape[-2], part.shape[-2])
            if part.shape[-1] != first.shape[-1]:
                raise ShapeMismatchError(self.name, f"width of part {index}", first.shape[-1], part.shape[-1])
        self.bounds = np.cumsum([0] + [p.shape[-3] for p in parts])
        return np.concatenate(parts, axis=-3)

    def backward(self, grad):
        return tuple(
            grad[..., lo:hi, :, :] if needed else None
            for lo, hi, needed in zip(self.bounds[:-1], self.bounds[1:], self.needs_input_grad)
        )


class RepeatChannels(Function):
    name = 'repeat_channels'

    def forward(self, a, count=3):
        if a.shape[-3] != 1:
            raise ShapeMismatchError(self.name, 'channels', 1, a.shape[-3])
        return np.repeat(a, count, axis=-3)

    def backward(self, grad):
        return (grad.sum(axis=-3, keepdims=True),)


class Conv2d(Function):
    name = 'conv2d'

    def forward(self, x, kernel, bias, stride=1, padding=0):
        if x.ndim not in (3, 4):
            raise ShapeMismatchError(self.name, 'input rank', '3 or 4', x.ndim)
        if kernel.ndim != 4:
            raise ShapeMismatchError(self.name, 'kernel rank', 4, kernel.ndim)
        c_out, c_in, kh, kw = kernel.shape
        if kh != kw:
            raise ShapeMismatchError(self.name, 'kernel width', kh, kw)
        if x.shape[-3] != c_in:
            raise ShapeMismatchError(self.name, 'input channels', c_in, x.shape[-3])
        if bias.shape != (c_out,):
            raise ShapeMismatchError(self.name, 'bias length', c_out, bias.shape)
        if stride < 1 or padding < 0:
            raise ShapeMismatchError(self.name, 'stride/padding', 'stride >= 1, padding >= 0',
                                     (stride, padding))
        height, width = x.shape[-2:]
        if kh > height + 2 * padding:
            raise ShapeMismatchError(self.name, 'height', f">= {kh - 2 * padding}", height)
        if kw > width + 2 * padding:
            raise ShapeMismatchError(self.name, 'width', f">= {kw - 2 * padding}", width)

        self.batched = x.ndim == 4
        xb = x if self.batched else x[None]
        if padding:
            xb = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.padded = xb
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.input_hw = (height, width)
        windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
        return out if self.batched else out[0]

    def backward(self, grad):
        g = grad if self.batched else grad[None]
        k = self.kernel.shape[-1]
        s = self.stride
        out_h, out_w = g.shape[-2:]
        gx = gk = gb = None
        if self.needs_input_grad[1]:
            windows = sliding_window_view(self.padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if self.needs_input_grad[2]:
            gb = g.sum(axis=(0, 2, 3))
        if self.needs_input_grad[0]:
            gpad = np.zeros_like(self.padded)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(g, self.kernel[:, :, i, j], axes=([1], [0]))
                    gpad[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += contrib.transpose(0, 3, 1, 2)
            p = self.padding
            height, width = self.input_hw
            gx = gpad[:, :, p:p + height, p:p + width]
            gx = gx if self.batched else gx[0]
        return gx, gk, gb


_ELEMENTWISE = {'add': Add, 'sub': Sub, 'mul': Mul}


def elementwise(kind: str, a: Union[Tensor, Scalar], b: Union[Tensor, Scalar, None] = None) -> Tensor:
    """Apply ``kind`` in {add, sub, mul, reciprocal}; reciprocal is unary."""
    if kind == 'reciprocal':
        if b is not None:
            raise ShapeMismatchError('reciprocal', 'operand count', 1, 2)
        return Reciprocal.apply(_as_tensor(a))
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind: {kind}")
    if b is None:
        raise ShapeMismatchError(kind, 'operand count', 2, 1)
    return _ELEMENTWISE[kind].apply(_as_tensor(a), _as_tensor(b))


def reciprocal(a: Tensor) -> Tensor:
    return elementwise('reciprocal', a)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeMismatchError('concat_channels', 'part count', '>= 1', 0)
    if len(parts) == 1:
        return parts[0]
    return ConcatChannels.apply(*parts)


def repeat_channels(x: Tensor, count: int = 3) -> Tensor:
    return RepeatChannels.apply(x, count=count)


def reduce_mse(pred: Tensor, target: Tensor) -> Tensor:
    return MeanSquaredError.apply(pred, target)


@dataclass
class Node:
    """One record of a graph: the op that produced ``output`` and its input node ids."""

    op: str
    inputs: List[int]
    output: Tensor
    function: Optional[Function] = None


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        index: Dict[int, int] = {}
        stack = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if id(tensor) in index:
                continue
            if expanded or tensor.creator is None:
                index[id(tensor)] = len(order)
                order.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor.creator.tensors):
                if parent.requires_grad and id(parent) not in index:
                    stack.append((parent, False))
        nodes = []
        for tensor in order:
            func = tensor.creator
            if func is None:
                nodes.append(Node('leaf', [], tensor))
            else:
                inputs = [index[id(t)] for t in func.tensors if t.requires_grad]
                nodes.append(Node(func.name, inputs, tensor, func))
        return cls(nodes)

    def backward(self, seed: np.ndarray) -> None:
        grads: Dict[int, np.ndarray] = {len(self.nodes) - 1: seed}
        position = {id(node.output): i for i, node in enumerate(self.nodes)}
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            grad = grads.pop(i, None)
            if grad is None:
                continue
            if node.function is None:
                node.output.grad = grad.copy() if node.output.grad is None else node.output.grad + grad
                continue
            input_grads = node.function.backward(grad)
            for tensor, g in zip(node.function.tensors, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                j = position[id(tensor)]
                grads[j] = g if j not in grads else grads[j] + g


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeMismatchError('backward', 'loss shape', '()', loss.shape)
    if not loss.requires_grad:
        raise DomainError("backward: loss is not attached to a graph")
    Graph.from_output(loss).backward(np.asarray(1.0, dtype=DTYPE))


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for tensor in tensors:
        tensor.zero_grad()


@dataclass
class GradCheckEntry:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float
    kinked: bool = False


@dataclass
class GradCheckReport:
    name: str
    tol: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def checked(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.kinked]

    @property
    def skipped(self) -> int:
        return len(self.entries) - len(self.checked)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.checked), default=0.0)

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.checked if e.rel_err >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        text = (f"{status} {self.name}: {len(self.checked)} entries, "
                f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e})")
        if self.skipped:
            text += f", {self.skipped} skipped at relu kinks"
        return text


def _evaluate_recording_masks(f: Callable[..., Tensor],
                              inputs: Sequence[Tensor]) -> Tuple[Tensor, List[np.ndarray]]:
    _relu_masks.masks = []
    try:
        value = f(*inputs)
        return value, _relu_masks.masks
    finally:
        _relu_masks.masks = None


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
               tol: float = 1e-4, floor: float = 1e-2, max_entries: Optional[int] = None,
               seed: int = 0, name: str = 'grad_check', skip_kinks: bool = True) -> GradCheckReport:
    """
    Compare reverse-mode gradients of ``f(*inputs)`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Inputs are perturbed
    in place and restored. With ``max_entries`` only that many entries per
    input are checked, chosen deterministically from ``seed``.

    A central difference whose +step or -step evaluation flips any relu
    mask straddles a kink and does not estimate the derivative; with
    ``skip_kinks`` such entries are reported but not judged.
    """
    report = GradCheckReport(name=name, tol=tol)
    inputs = list(inputs)
    for tensor in inputs:
        tensor.zero_grad()
    loss, base_masks = _evaluate_recording_masks(f, inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    for k, tensor in enumerate(inputs):
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for idx in indices:
            saved = flat[idx]
            flat[idx] = saved + step
            plus, plus_masks = _evaluate_recording_masks(f, inputs)
            flat[idx] = saved - step
            minus, minus_masks = _evaluate_recording_masks(f, inputs)
            flat[idx] = saved
            numeric = (plus.item() - minus.item()) / (2.0 * step)
            a = float(analytic[k].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            kinked = skip_kinks and not (_same_masks(base_masks, plus_masks)
                                         and _same_masks(base_masks, minus_masks))
            report.entries.append(GradCheckEntry(k, int(idx), a, numeric, err, kinked))
    for tensor in inputs:
        tensor.zero_grad()
    logger.debug(report.summary())
    return report
