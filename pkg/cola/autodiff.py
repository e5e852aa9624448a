"""
Dense-tensor reverse-mode automatic differentiation.

A Tape records every operation applied to Tensors during one forward pass and
replays the records in reverse to produce gradients. Any intermediate value can be
tapped: the resulting TapPoint keeps detached copies of the value, of the hidden
input that produced it, and (after backward) of its gradient.
"""

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .helpers.errors import DimensionError, LabelError, NonFiniteError, TapeError

DEFAULT_DTYPE = np.float64

_tensor_ids = itertools.count()


class Tensor:
    """An immutable dense array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        """
        Initialize a Tensor from array-like data.

        Args:
            data: Array-like values. Floating arrays keep their precision unless dtype is given.
            requires_grad (bool): Whether backward fills `grad` for this tensor when it is a leaf.
            dtype: Optional numpy float dtype (float32 or float64).

        Raises:
            NonFiniteError: If the data contains NaN or Inf.
        """
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == 'f' else DEFAULT_DTYPE
        self._init(np.array(data, dtype=dtype, copy=True), requires_grad)

    def _init(self, array: np.ndarray, requires_grad: bool) -> None:
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("Tensor data contains NaN or Inf.")
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_tensor_ids)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._init(array, requires_grad)
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the data."""
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation: kind, input value ids, output value id and the values backward needs."""

    op: str
    inputs: Tuple[int, ...]
    output: int
    saved: tuple


@dataclass
class TapPoint:
    """Forward value, hidden input and gradient captured at one layer."""

    layer: int
    value_id: int
    output: np.ndarray
    hidden_input: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None


TensorRef = Union[Tensor, int]


def _matmul_backward(g, node, needs):
    a, b = node.saved
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _transpose_backward(g, node, needs):
    return (g.T,)


def _add_backward(g, node, needs):
    alpha, bias_shape = node.saved
    grad_b = None
    if needs[1]:
        grad_b = g if alpha == 1.0 else alpha * g
        if bias_shape is not None:
            grad_b = grad_b.sum(axis=0).reshape(bias_shape)
    return (g if needs[0] else None, grad_b)


def _scale_backward(g, node, needs):
    (factor,) = node.saved
    return (factor * g,)


def _relu_backward(g, node, needs):
    (a,) = node.saved
    return (g * (a > 0),)


def _softmax_cross_entropy_backward(g, node, needs):
    probs, labels = node.saved
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return (g * grad / n,)


def _mse_backward(g, node, needs):
    diff, n_records = node.saved
    grad = g * diff / n_records
    return (grad if needs[0] else None, -grad if needs[1] else None)


def _sum_backward(g, node, needs):
    (shape,) = node.saved
    return (np.broadcast_to(g, shape).copy(),)


def _gather_rows_backward(g, node, needs):
    rows, n = node.saved
    grad = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    grad[rows] = g
    return (grad,)


def _scatter_rows_backward(g, node, needs):
    (rows,) = node.saved
    return (g[rows],)


_BACKWARD: Dict[str, Callable] = {
    'matmul': _matmul_backward,
    'transpose': _transpose_backward,
    'add': _add_backward,
    'scale': _scale_backward,
    'relu': _relu_backward,
    'softmax_cross_entropy': _softmax_cross_entropy_backward,
    'mse': _mse_backward,
    'sum': _sum_backward,
    'gather_rows': _gather_rows_backward,
    'scatter_rows': _scatter_rows_backward,
}


class Tape:
    """
    Single-use record of one forward pass.

    Values enter the tape either as leaves (`watch`, or implicitly when first used by an
    operation) or as operation outputs. A value is tracked when it is a leaf that requires
    a gradient, an output of an operation with a tracked input, or a tapped value. Backward
    only computes gradients along tracked values, so frozen parameters never receive one.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.values: Dict[int, Tensor] = {}
        self.taps: List[TapPoint] = []
        self._tracked: set = set()
        self._consumed = False

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a tensor as a leaf of this tape and return it."""
        if tensor.id not in self.values:
            self.values[tensor.id] = tensor
            if tensor.requires_grad:
                self._tracked.add(tensor.id)
        return tensor

    def constant(self, data) -> Tensor:
        """Register array-like data as a leaf that never receives a gradient."""
        return self.watch(Tensor(data))

    def parameter(self, data: np.ndarray) -> Tensor:
        """Register array data as a leaf that requires a gradient."""
        return self.watch(Tensor(data, requires_grad=True))

    def _resolve(self, ref: TensorRef) -> Tensor:
        if isinstance(ref, Tensor):
            return ref
        if ref not in self.values:
            raise TapeError(f"Value {ref} is not on this tape.")
        return self.values[ref]

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, saved: tuple) -> Tensor:
        if self._consumed:
            raise TapeError("Tape has already been used for backward; start a new tape.")
        for tensor in inputs:
            self.watch(tensor)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"Operation '{op}' produced NaN or Inf.")
        result = Tensor._wrap(out)
        self.values[result.id] = result
        if any(tensor.id in self._tracked for tensor in inputs):
            self._tracked.add(result.id)
        self.nodes.append(Node(op, tuple(t.id for t in inputs), result.id, saved))
        return result

    def is_tracked(self, ref: TensorRef) -> bool:
        return self._resolve(ref).id in self._tracked

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """
        Matrix product of a [n x k] and b [k x p].

        Raises:
            DimensionError: If either operand is not 2-D or the inner dimensions differ.
        """
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"Cannot multiply {a.shape} by {b.shape}.")
        return self._record('matmul', (a, b), a.data @ b.data, (a.data, b.data))

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise DimensionError(f"Transpose expects a 2-D tensor, got {a.shape}.")
        return self._record('transpose', (a,), a.data.T.copy(), ())

    def add(self, a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
        """
        Compute a + alpha * b.

        Only identical shapes and a bias row broadcast over the batch axis of a 2-D `a` are
        supported; the bias gradient sums over the batch axis.

        Raises:
            DimensionError: If the shapes are not compatible.
        """
        bias_shape = None
        if a.shape != b.shape:
            is_bias = (
                a.data.ndim == 2
                and b.data.ndim in (1, 2)
                and b.shape[-1] == a.shape[1]
                and (b.data.ndim == 1 or b.shape[0] == 1)
            )
            if not is_bias:
                raise DimensionError(f"Cannot add {b.shape} to {a.shape}.")
            bias_shape = b.shape
        out = a.data + b.data if alpha == 1.0 else a.data + alpha * b.data
        return self._record('add', (a, b), out, (alpha, bias_shape))

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._record('scale', (a,), factor * a.data, (factor,))

    def relu(self, a: Tensor) -> Tensor:
        # subgradient at exactly 0 is 0
        return self._record('relu', (a,), np.maximum(a.data, 0.0), (a.data,))

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """
        Mean over the batch of -log softmax(logits)[label].

        Args:
            logits (Tensor): Scores of shape [n x C], n >= 1.
            labels: Integer class indices of length n.

        Returns:
            Tensor: Scalar loss.

        Raises:
            DimensionError: If logits is not [n x C] with n matching the label count.
            LabelError: If a label is outside [0, C).
        """
        labels = np.asarray(labels, dtype=np.int64)
        if logits.data.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0] or labels.size == 0:
            raise DimensionError(f"Logits {logits.shape} do not match {labels.shape[0]} labels.")
        n_classes = logits.shape[1]
        if labels.min() < 0 or labels.max() >= n_classes:
            raise LabelError(f"Labels must lie in [0, {n_classes}).")
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        log_normalizer = np.log(np.exp(shifted).sum(axis=1))
        n = labels.shape[0]
        loss = np.mean(log_normalizer - shifted[np.arange(n), labels])
        probs = np.exp(shifted - log_normalizer[:, None])
        return self._record('softmax_cross_entropy', (logits,), np.asarray(loss), (probs, labels))

    def mse(self, pred: Tensor, target: Tensor) -> Tensor:
        """
        Half squared error with mean reduction over records (rows).

        A 1-D tensor counts as a single record.

        Raises:
            DimensionError: If the shapes differ.
        """
        if pred.shape != target.shape:
            raise DimensionError(f"Prediction {pred.shape} and target {target.shape} differ.")
        n_records = pred.shape[0] if pred.data.ndim >= 2 else 1
        diff = pred.data - target.data
        loss = np.sum(diff * diff) / (2 * n_records)
        return self._record('mse', (pred, target), np.asarray(loss), (diff, n_records))

    def sum(self, a: Tensor) -> Tensor:
        return self._record('sum', (a,), np.asarray(a.data.sum()), (a.shape,))

    def gather_rows(self, a: Tensor, rows) -> Tensor:
        """Select rows of `a`; the gradient is scattered back into the selected rows."""
        rows = np.asarray(rows, dtype=np.int64)
        return self._record('gather_rows', (a,), a.data[rows], (rows, a.shape[0]))

    def scatter_rows(self, a: Tensor, rows, n: int) -> Tensor:
        """Place the rows of `a` at positions `rows` of an otherwise zero [n x ...] tensor."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.shape[0] != a.shape[0]:
            raise DimensionError(f"{rows.shape[0]} row positions for a tensor with {a.shape[0]} rows.")
        out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
        out[rows] = a.data
        return self._record('scatter_rows', (a,), out, (rows,))

    def detach(self, a: Tensor) -> Tensor:
        """Return a constant copy of `a`; gradients stop here."""
        return self.watch(Tensor._wrap(a.data.copy()))

    def tap(self, value: TensorRef, layer: int, hidden_input: Optional[Tensor] = None) -> TapPoint:
        """
        Capture a value (and optionally the hidden input that produced it) for harvesting.

        Tapping marks the value as tracked, so its gradient is computed even when nothing
        upstream of it requires one. Forward values and every other gradient are unchanged.

        Args:
            value (Tensor | int): Tensor on this tape, or its id.
            layer (int): Layer index the tap belongs to.
            hidden_input (Tensor, optional): Input of the layer, copied alongside.

        Returns:
            TapPoint: Filled with the gradient once backward has run.

        Raises:
            TapeError: If the value is not on this tape.
        """
        tensor = self._resolve(value)
        if tensor.id not in self.values:
            raise TapeError(f"Value {tensor.id} is not on this tape.")
        self._tracked.add(tensor.id)
        point = TapPoint(
            layer=layer,
            value_id=tensor.id,
            output=tensor.data.copy(),
            hidden_input=None if hidden_input is None else hidden_input.data.copy(),
        )
        self.taps.append(point)
        return point

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate gradients from a scalar loss through the recorded operations.

        Fills `grad` on every leaf that requires a gradient and on every TapPoint.

        Args:
            loss (Tensor): Scalar produced by this tape. The seed gradient is 1.

        Returns:
            Dict[int, np.ndarray]: Gradient of every tracked value, keyed by tensor id.

        Raises:
            TapeError: If the tape was already used, the loss is not scalar or not on this tape.
        """
        if self._consumed:
            raise TapeError("Backward has already run on this tape.")
        if loss.id not in self.values:
            raise TapeError("Loss was not produced by this tape.")
        if loss.data.ndim != 0:
            raise TapeError(f"Loss must be a scalar, got shape {loss.shape}.")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            needs = tuple(i in self._tracked for i in node.inputs)
            if not any(needs):
                continue
            for input_id, input_grad, need in zip(node.inputs, _BACKWARD[node.op](g, node, needs), needs):
                if not need or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        for tensor_id, tensor in self.values.items():
            if tensor.requires_grad:
                tensor.grad = grads.get(tensor_id, np.zeros_like(tensor.data))
        for point in self.taps:
            grad = grads.get(point.value_id)
            point.grad = np.zeros_like(point.output) if grad is None else np.array(grad, copy=True)
        return grads
