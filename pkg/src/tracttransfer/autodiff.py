"""Minimal reverse-mode differentiation over dense float64 tensors.

Operations executed inside a ``with ComputationGraph():`` block are recorded
on a tape in execution order; :func:`backward` replays the tape in exact
reverse order and accumulates gradients into the leaf tensors that require
them.  Outside a graph the same functions run forward-only, which is how
evaluation-mode inference works.

Convolution is cross-correlation with zero same-padding and stride 1.  The
loss accepts logits and fuses the sigmoid for numerical stability.  All
image operations accept either a single ``[C, H, W]`` tensor or a batched
``[B, C, H, W]`` tensor.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import GraphError, ParameterError, ShapeError
from .rng import RngState

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = []
        _local.graphs = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Node:
    """One recorded operation: tag, input tensors, output tensor, pullback."""

    __slots__ = ("tag", "inputs", "output", "pullback")

    def __init__(self, tag, inputs, output, pullback):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.pullback = pullback


class ComputationGraph:
    """Tape of operations in insertion order; also a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "ComputationGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _graph_stack().pop()


def _record(tag, inputs, out_data, pullback) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    graph = _active_graph()
    if graph is not None:
        graph.nodes.append(Node(tag, tuple(inputs), out, pullback))
    return out


def backward(graph: ComputationGraph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the graph.

    Gradients add across multiple uses of a tensor; calling backward twice
    without zeroing doubles leaf gradients.
    """
    if loss.size != 1:
        raise GraphError(f"backward target must be scalar, got shape {loss.shape}")
    produced = {id(node.output) for node in graph.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        out_grad = grads.pop(id(node.output), None)
        if out_grad is None or not node.output.requires_grad:
            continue
        for tensor, grad in zip(node.inputs, node.pullback(out_grad)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            held = grads.get(key)
            grads[key] = grad if held is None else held + grad
            if key not in produced:
                leaves[key] = tensor
    for key, tensor in leaves.items():
        grad = grads[key]
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function on a plain array."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def pullback(g):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _record("matmul", (a, b), ad @ bd, pullback)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias[r]`` to every column of row ``r`` of a 2-D tensor."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[0] != bias.shape[0]:
        raise ShapeError(f"add_row_bias: shapes {x.shape} and {bias.shape}")
    out = x.data + bias.data[:, None]
    return _record("add_row_bias", (x, bias), out, lambda g: (g, g.sum(axis=1)))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()),
                   lambda g: (np.full(shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes),
                   lambda g: (g.transpose(inverse),))


def _as_batched(data: np.ndarray):
    if data.ndim == 3:
        return data[None], True
    if data.ndim == 4:
        return data, False
    raise ShapeError(f"expected a [C,H,W] or [B,C,H,W] tensor, got shape {data.shape}")


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> same-padded patch matrix [B, C*k*k, H*W]."""
    b, c, h, w = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * k * k, h * w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation with a per-channel bias.

    The input gradient is itself a same-padded cross-correlation of the
    output gradient with the spatially flipped, channel-transposed kernel,
    which avoids an explicit scatter back to image space.
    """
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise ParameterError(f"conv2d: kernel size must be odd, got {k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    xd, squeezed = _as_batched(x.data)
    b, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")

    cols = _im2col(xd, k)
    w_mat = kernel.data.reshape(c_out, c_in * k * k)
    out = (np.matmul(w_mat, cols) + bias.data[None, :, None]).reshape(b, c_out, h, w)
    need_x, need_kernel, need_bias = (x.requires_grad, kernel.requires_grad,
                                      bias.requires_grad)

    def pullback(g):
        gb = (g[None] if squeezed else g).reshape(b, c_out, h * w)
        grad_bias = gb.sum(axis=(0, 2)) if need_bias else None
        grad_kernel = None
        if need_kernel:
            grad_kernel = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0)
            grad_kernel = grad_kernel.reshape(kernel.shape)
        grad_x = None
        if need_x:
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            flip_mat = np.ascontiguousarray(flipped).reshape(c_in, c_out * k * k)
            gcols = _im2col(gb.reshape(b, c_out, h, w), k)
            grad_x = np.matmul(flip_mat, gcols).reshape(b, c_in, h, w)
            if squeezed:
                grad_x = grad_x[0]
        return (grad_x, grad_kernel, grad_bias)

    return _record("conv2d", (x, kernel, bias), out[0] if squeezed else out, pullback)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling; spatial dims must be even."""
    xd, squeezed = _as_batched(x.data)
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = xd.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def pullback(g):
        gb = g[None] if squeezed else g
        gx = np.repeat(np.repeat(gb, 2, axis=2), 2, axis=3) * 0.25
        return (gx[0] if squeezed else gx,)

    return _record("avg_pool2", (x,), out[0] if squeezed else out, pullback)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    xd, squeezed = _as_batched(x.data)
    b, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def pullback(g):
        gb = g[None] if squeezed else g
        gx = gb.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if squeezed else gx,)

    return _record("upsample2", (x,), out[0] if squeezed else out, pullback)


def dropout(x: Tensor, rate: float, rng: RngState, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.generator.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _record("dropout", (x,), x.data * scale, lambda g: (g * scale,))


def bce_loss(logits: Tensor, targets: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean binary cross-entropy over unmasked elements, computed from logits.

    The sigmoid is fused into the loss so large-magnitude logits neither
    overflow nor lose the gradient signal sigma(z) - y.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_loss: logits {logits.shape} vs targets {targets.shape}")
    if mask is not None and mask.shape != logits.shape:
        raise ShapeError(f"bce_loss: mask {mask.shape} vs logits {logits.shape}")
    z, y = logits.data, targets.data
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    if mask is None:
        count = z.size
        loss = elem.sum() / count
        weight = 1.0 / count
    else:
        m = mask.data
        count = m.sum()
        if count == 0:
            raise ParameterError("bce_loss: mask selects no elements")
        loss = (elem * m).sum() / count
        weight = m / count

    def pullback(g):
        dz = (sigmoid_np(z) - y) * weight * float(g)
        return (dz, None) if mask is None else (dz, None, None)

    inputs = (logits, targets) if mask is None else (logits, targets, mask)
    return _record("bce_loss", inputs, np.asarray(loss), pullback)
