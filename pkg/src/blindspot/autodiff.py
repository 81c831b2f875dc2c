"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy float64 arrays wrapped in :class:`Tensor`. Operations
record themselves onto the innermost active :class:`Tape`; calling
:func:`backward` replays the tape in reverse and populates ``.grad`` on
every leaf tensor that asked for gradients.

Design notes that matter for correctness:

* everything is float64, which keeps finite-difference checks clean;
* max-pool breaks ties by the first window position in row-major order;
* relu and absolute use subgradient 0 at 0;
* the only broadcasting is the bias add over the batch axis, every other
  elementwise op demands identical shapes so backward rules stay simple.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ValidationError

Array = np.ndarray

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "relu",
    "absolute",
    "reshape",
    "sum_all",
    "class_margin",
    "conv2d",
    "maxpool2d",
    "softmax_cross_entropy",
    "finite_difference_gradient",
]


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``requires_grad`` marks leaves whose gradient the caller wants; it
    propagates to derived tensors so the tape knows what to record.
    ``grad`` is filled in by :func:`backward` and matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = "grad" if self.requires_grad else "no grad"
        return f"Tensor(shape={self.shape}, {grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(
        self,
        output: Tensor,
        inputs: tuple[Tensor, ...],
        backward: Callable[[Array], tuple[Array | None, ...]],
    ):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    """Per-thread stack of active tapes; workers never share a tape."""
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


class Tape:
    """Ordered record of operations, used as a context manager.

    Entering pushes the tape onto the current thread's stack; ops
    record onto the innermost active tape whenever their output needs
    gradients. Each worker thread owns its own stack, so data-parallel
    attack workers never see each other's tapes.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted by mismatched enter/exit")
        return False

    def __len__(self) -> int:
        return len(self._nodes)


def _record(
    out: Tensor,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[Array], tuple[Array | None, ...]],
) -> Tensor:
    stack = _tape_stack()
    if out.requires_grad and stack:
        tape = stack[-1]
        tape._nodes.append(_Node(out, inputs, backward_fn))
        tape._output_ids.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from loss.

    Leaves that did not ask for gradients are left untouched. Raises if
    the loss is not a scalar produced on the given tape.
    """
    if id(loss) not in tape._output_ids:
        raise ValidationError("loss tensor was not produced on this tape")
    if loss.data.size != 1:
        raise ValidationError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = tape._output_ids
    for node in reversed(tape._nodes):
        out_grad = grads.pop(id(node.output), None)
        if out_grad is None:
            continue
        input_grads = node.backward(out_grad)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                if key not in produced:
                    leaves[key] = tensor
    for key, tensor in leaves.items():
        tensor.grad = np.asarray(grads[key], dtype=np.float64)


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` (m, k) with a 2-D ``b`` (k, n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs(a, b))

    def bw(g: Array):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} expects identical shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_needs(a, b))

    def bw(g: Array):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of two same-shape tensors."""
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_needs(a, b))

    def bw(g: Array):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_needs(a, b))

    def bw(g: Array):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply every entry by the python scalar ``s``."""
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def bw(g: Array):
        return (g * s if a.requires_grad else None,)

    return _record(out, (a,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias, broadcast over the batch axis only.

    Supports a (N, f) activation with an (f,) bias and an (N, C, H, W)
    activation with a per-channel (C,) bias.
    """
    if x.ndim == 2 and b.ndim == 1 and x.shape[1] == b.shape[0]:
        out_data = x.data + b.data
        axes: tuple[int, ...] = (0,)
    elif x.ndim == 4 and b.ndim == 1 and x.shape[1] == b.shape[0]:
        out_data = x.data + b.data[:, None, None]
        axes = (0, 2, 3)
    else:
        raise DimensionError(f"cannot bias-add {b.shape} onto {x.shape}")
    out = Tensor(out_data, requires_grad=_needs(x, b))

    def bw(g: Array):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=axes) if b.requires_grad else None
        return gx, gb

    return _record(out, (x, b), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)

    def bw(g: Array):
        return (g * (x.data > 0) if x.requires_grad else None,)

    return _record(out, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out = Tensor(np.abs(x.data), requires_grad=x.requires_grad)

    def bw(g: Array):
        return (g * np.sign(x.data) if x.requires_grad else None,)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without changing the number of entries."""
    try:
        out_data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    out = Tensor(out_data, requires_grad=x.requires_grad)

    def bw(g: Array):
        return (g.reshape(x.shape) if x.requires_grad else None,)

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry down to a scalar tensor."""
    out = Tensor(np.sum(x.data), requires_grad=x.requires_grad)

    def bw(g: Array):
        return (np.full(x.shape, float(g)) if x.requires_grad else None,)

    return _record(out, (x,), bw)


def _validated_labels(labels, num_classes: int) -> Array:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValidationError(f"labels must be a 1-D sequence, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def class_margin(logits: Tensor, labels) -> Tensor:
    """Per-example margin Z[label] - max of Z over the other classes.

    Positive while the model still predicts the true class; driving it
    below zero flips the prediction. The runner-up class is resolved by
    first occurrence, so the backward rule is deterministic.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ValidationError("margin needs at least two classes")
    y = _validated_labels(labels, k)
    if y.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {y.shape[0]} labels")

    rows = np.arange(n)
    z_true = logits.data[rows, y]
    masked = logits.data.copy()
    masked[rows, y] = -np.inf
    other = masked.argmax(axis=1)
    out = Tensor(z_true - masked[rows, other], requires_grad=logits.requires_grad)

    def bw(g: Array):
        if not logits.requires_grad:
            return (None,)
        gl = np.zeros_like(logits.data)
        gl[rows, y] += g
        gl[rows, other] -= g
        return (gl,)

    return _record(out, (logits,), bw)


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (F, C, kh, kw) kernel.

    Zero padding, floor division for the output extent. Implemented as an
    im2col matrix product so the hot path is a single dgemm.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValidationError("stride must be a positive integer")
    if padding < 0:
        raise ValidationError("padding must be non-negative")
    if input.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {input.shape} and {kernel.shape}"
        )
    n, c, h, w = input.shape
    f, c2, kh, kw = kernel.shape
    if c2 != c:
        raise DimensionError(f"kernel expects {c2} channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = input.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C*kh*kw, N*ho*wo) so the filter bank multiplies from the left
    cols = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c * kh * kw, n * ho * wo
    )
    w_mat = kernel.data.reshape(f, c * kh * kw)
    out_data = np.ascontiguousarray(
        (w_mat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    )
    out = Tensor(out_data, requires_grad=_needs(input, kernel))

    # keep the unfolded input alive only when the kernel gradient is needed
    cols_saved = cols if kernel.requires_grad else None

    def bw(g: Array):
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = (g_mat @ cols_saved.T).reshape(kernel.shape)
        gx = None
        if input.requires_grad:
            dcols = (w_mat.T @ g_mat).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = dxp[:, :, padding : hp - padding, padding : wp - padding] if padding else dxp
        return gx, gk

    return _record(out, (input, kernel), bw)


def maxpool2d(input: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum over (N, C, H, W); gradient goes to the argmax.

    Ties route to the first position of the window in row-major order.
    """
    window = int(window)
    stride = int(stride)
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be positive integers")
    if input.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {input.shape}")
    n, c, h, w = input.shape
    if window > h or window > w:
        raise DimensionError(f"window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    if stride >= window:
        # windows never overlap: track the running max and its first
        # row-major position with strided views, no unfolded copy
        out_data = None
        idx = np.zeros((n, c, ho, wo), dtype=np.int64)
        for m in range(window * window):
            i, j = divmod(m, window)
            v = input.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            if m == 0:
                out_data = v.copy()
            else:
                better = v > out_data
                out_data[better] = v[better]
                idx[better] = m
    else:
        views = sliding_window_view(input.data, (window, window), axis=(2, 3))
        flat = np.ascontiguousarray(views[:, :, ::stride, ::stride]).reshape(
            n, c, ho, wo, window * window
        )
        idx = flat.argmax(axis=4)
        out_data = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    out = Tensor(out_data, requires_grad=input.requires_grad)

    def bw(g: Array):
        if not input.requires_grad:
            return (None,)
        dx = np.zeros((n, c, h, w))
        if stride >= window:
            for m in range(window * window):
                i, j = divmod(m, window)
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] = (
                    np.where(idx == m, g, 0.0)
                )
            return (dx,)
        dflat = np.zeros((n, c, ho, wo, window * window))
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=4)
        for m in range(window * window):
            i, j = divmod(m, window)
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dflat[..., m]
        return (dx,)

    return _record(out, (input,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by subtracting the per-row max, so logits with magnitude
    up to about 1e6 stay finite. Backward is (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    y = _validated_labels(labels, k)
    if y.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {y.shape[0]} labels")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(n)
    out = Tensor(-log_probs[rows, y].mean(), requires_grad=logits.requires_grad)
    softmax = np.exp(log_probs)

    def bw(g: Array):
        if not logits.requires_grad:
            return (None,)
        gl = softmax.copy()
        gl[rows, y] -= 1.0
        gl *= float(g) / n
        return (gl,)

    return _record(out, (logits,), bw)


def finite_difference_gradient(f, x: Tensor, step: float) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` receives a fresh Tensor and may return a Tensor or a float.
    Intended as a test oracle; cost is two evaluations per coordinate.
    """
    step = float(step)
    if step <= 0:
        raise ValidationError("step must be positive")

    def evaluate(arr: Array) -> float:
        value = f(Tensor(arr.copy()))
        return float(value.data) if isinstance(value, Tensor) else float(value)

    work = np.array(x.data, dtype=np.float64, copy=True)
    flat = work.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        f_plus = evaluate(work)
        flat[i] = original - step
        f_minus = evaluate(work)
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return Tensor(grad.reshape(x.shape))
