"""Dense tensor arithmetic with reverse-mode differentiation.

The engine is tape-style: every operation eagerly computes its forward value
(a numpy array) and records a backward closure on the output node. Calling
:func:`backward` on a scalar loss sweeps the graph in reverse topological
order and accumulates gradients for every node reachable from the loss.

Any node kind may be given a *surrogate* backward rule at runtime (see
:func:`register_surrogate`). Surrogates change gradients only; forward
values are always exact. This is the mechanism used to attack pipelines
containing non-differentiable stages: the stage keeps its true forward
while its backward is replaced by a differentiable stand-in.
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeMismatchError",
    "backward",
    "register_surrogate",
    "clear_surrogates",
    "active_surrogate",
    "surrogate_rules",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "add",
    "multiply",
    "matmul",
    "conv2d",
    "transposed_conv2d",
    "relu",
    "softmax",
    "cross_entropy",
    "reshape",
    "take_slice",
    "reduce_sum",
    "reduce_max",
    "conv2d_output_size",
    "transposed_conv2d_output_size",
]


class ShapeMismatchError(ValueError):
    """Raised when an operation receives shape-incompatible inputs."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.shapes = shapes


# ---------------------------------------------------------------------------
# Precision and grad-mode state (build-wide settings)
# ---------------------------------------------------------------------------

_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def set_default_dtype(dtype) -> None:
    """Set the build-wide float mode (numpy float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float mode (used by 64-bit oracle tests)."""
    prev = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; forward values only."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


# ---------------------------------------------------------------------------
# Surrogate backward-rule registry
# ---------------------------------------------------------------------------

# kind -> (rule_name, param). Consulted lazily at backward() time, so rules
# registered after graph construction still apply.
_SURROGATES: dict[str, tuple[str, float | int | None]] = {}

_RULE_GRAMMAR = re.compile(
    r"^(identity|smooth-activation\(\s*([0-9.eE+-]+)\s*\)|top-u-routing\(\s*(\d+)\s*\))$",
    re.IGNORECASE,
)


def _parse_rule(rule: str) -> tuple[str, float | int | None]:
    m = _RULE_GRAMMAR.match(rule.strip())
    if m is None:
        raise ValueError(
            f"unknown surrogate rule {rule!r}; expected 'identity', "
            "'smooth-activation(<steepness>)' or 'top-u-routing(<width>)'"
        )
    text = m.group(1).lower()
    if text == "identity":
        return ("identity", None)
    if text.startswith("smooth-activation"):
        k = float(m.group(2))
        if not k > 0:
            raise ValueError(f"smooth-activation steepness must be > 0, got {k}")
        return ("smooth-activation", k)
    width = int(m.group(3))
    if width < 1:
        raise ValueError(f"top-u-routing width must be >= 1, got {width}")
    return ("top-u-routing", width)


def register_surrogate(kind: str, rule: str) -> None:
    """Route backward passes of all ``kind`` nodes through a named rule.

    Valid rules: ``identity``, ``smooth-activation(k)``, ``top-u-routing(U)``.
    Registration affects subsequent ``backward()`` calls only; forward values
    never change.
    """
    _SURROGATES[kind] = _parse_rule(rule)


def clear_surrogates(kind: str | None = None) -> None:
    if kind is None:
        _SURROGATES.clear()
    else:
        _SURROGATES.pop(kind, None)


def active_surrogate(kind: str) -> tuple[str, float | int | None] | None:
    return _SURROGATES.get(kind)


@contextmanager
def surrogate_rules(rules: dict[str, str]) -> Iterator[None]:
    """Scoped surrogate registration; restores the previous rules on exit."""
    saved = dict(_SURROGATES)
    try:
        for kind, rule in rules.items():
            register_surrogate(kind, rule)
        yield
    finally:
        _SURROGATES.clear()
        _SURROGATES.update(saved)


# ---------------------------------------------------------------------------
# Tensor / node
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus its position in the eagerly-built graph.

    ``data`` is always a numpy array in the build-wide float mode. Nodes
    created by operations carry their op kind, parent references and a
    backward closure mapping the upstream gradient to per-parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: BackwardFn | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar used by the network code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def make_node(
    value: np.ndarray,
    op: str,
    parents: tuple[Tensor, ...],
    backward: BackwardFn,
) -> Tensor:
    """Create an op node, or a detached constant when grad mode is off.

    This is the extension point for custom ops (the defense frontend adds
    its selection and quantization stages through it).
    """
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Result of one backward sweep: nodes in topological order + gradients."""

    def __init__(self, nodes: list[Tensor], grads: dict[int, np.ndarray]) -> None:
        self.nodes = nodes
        self._grads = grads

    def grad(self, node: Tensor) -> np.ndarray | None:
        return self._grads.get(id(node))

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._grads


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> GradientTape:
    """Reverse-mode sweep from a scalar loss.

    Gradients are accumulated for every node reachable from the loss; nodes
    with ``requires_grad`` additionally get the result summed into ``.grad``.
    The graph is freed afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    for node in order:
        if node.requires_grad and id(node) in grads:
            g = grads[id(node)]
            node.grad = g.copy() if node.grad is None else node.grad + g
    tape = GradientTape(order, grads)
    if not retain_graph:
        for node in order:
            node.parents = ()
            node._backward = None
    return tape


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None

    def bwd(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(value, "add", (a, b), bwd)


def multiply(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("multiply", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data

    def bwd(g: np.ndarray):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return make_node(value, "multiply", (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    value = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g: np.ndarray):
        return g @ b_data.T, a_data.T @ g

    return make_node(value, "matmul", (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    value = np.where(mask, x.data, 0)

    def bwd(g: np.ndarray):
        return (g * mask,)

    return make_node(value, "relu", (x,), bwd)


def _softmax_value(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    value = _softmax_value(x.data, axis)

    def bwd(g: np.ndarray):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - dot),)

    return make_node(value, "softmax", (x,), bwd)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class labels.

    Accepts a single logit vector with a scalar label, or a ``(batch, classes)``
    matrix with a label vector. ``reduction`` is ``mean`` or ``sum`` over the
    batch (attacks use ``sum`` so per-example gradients are batch-size free).
    """
    logits = _as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeMismatchError("cross_entropy", logits.shape)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ShapeMismatchError("cross_entropy", logits.shape, y.shape)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    per_example = logsumexp - z[np.arange(z.shape[0]), y]
    value = per_example.mean() if reduction == "mean" else per_example.sum()
    probs = _softmax_value(z, axis=1)
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0

    def bwd(g: np.ndarray):
        grad = probs.copy()
        grad[np.arange(z.shape[0]), y] -= 1.0
        grad *= float(g) * scale
        return (grad[0] if single else grad,)

    return make_node(np.asarray(value), "cross_entropy", (logits,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from None
    old_shape = x.data.shape

    def bwd(g: np.ndarray):
        return (g.reshape(old_shape),)

    return make_node(value, "reshape", (x,), bwd)


def take_slice(x: Tensor, key) -> Tensor:
    """Basic indexing; backward scatters the gradient into a zero array."""
    x = _as_tensor(x)
    value = x.data[key]
    full_shape = x.data.shape

    def bwd(g: np.ndarray):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return make_node(np.ascontiguousarray(value), "slice", (x,), bwd)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.data.shape

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=True),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, in_shape).astype(g.dtype, copy=True),)

    return make_node(np.asarray(value), "reduce_sum", (x,), bwd)


def reduce_max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction over all entries or one axis; ties route to the first max."""
    x = _as_tensor(x)
    data = x.data
    value = data.max(axis=axis, keepdims=keepdims)

    if axis is None:
        flat_idx = int(data.argmax())

        def bwd(g: np.ndarray):
            out = np.zeros(data.shape, dtype=g.dtype)
            out.reshape(-1)[flat_idx] = g
            return (out,)

    else:
        idx = data.argmax(axis=axis)

        def bwd(g: np.ndarray):
            out = np.zeros(data.shape, dtype=g.dtype)
            ge = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(out, np.expand_dims(idx, axis), ge, axis=axis)
            return (out,)

    return make_node(np.asarray(value), "reduce_max", (x,), bwd)


# ---------------------------------------------------------------------------
# Convolutions (NHWC layout, explicit zero padding)
#
# conv2d: input (B, H, W, Cin), weight (kh, kw, Cin, Cout), output
#   OH = (H + 2*padding - kh) // stride + 1 (same for width).
# transposed_conv2d: input (B, H, W, Cin), weight (kh, kw, Cin, Cout), output
#   OH = (H - 1) * stride - 2*padding + kh.
# ---------------------------------------------------------------------------


def conv2d_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatchError("conv2d", (size,), (kernel, stride, padding))
    return out


def transposed_conv2d_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise ShapeMismatchError("transposed_conv2d", (size,), (kernel, stride, padding))
    return out


def _gather_cols(xpad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, _, _, c = xpad.shape
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xpad[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols


def _scatter_cols(cols: np.ndarray, hpad: int, wpad: int, stride: int) -> np.ndarray:
    b, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((b, hpad, wpad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += cols[:, :, :, i, j, :]
    return out


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    b, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = conv2d_output_size(h, kh, stride, padding)
    ow = conv2d_output_size(wid, kw, stride, padding)
    xpad = _pad_hw(x.data, padding)
    cols = _gather_cols(xpad, kh, kw, stride, oh, ow)
    cols2d = cols.reshape(b * oh * ow, kh * kw * cin)
    value = (cols2d @ w.data.reshape(kh * kw * cin, cout)).reshape(b, oh, ow, cout)
    w_data = w.data

    def bwd(g: np.ndarray):
        g2d = g.reshape(b * oh * ow, cout)
        grad_w = (cols2d.T @ g2d).reshape(kh, kw, cin, cout)
        gcols = (g2d @ w_data.reshape(kh * kw * cin, cout).T).reshape(b, oh, ow, kh, kw, cin)
        gxpad = _scatter_cols(gcols, h + 2 * padding, wid + 2 * padding, stride)
        grad_x = gxpad if padding == 0 else gxpad[:, padding : padding + h, padding : padding + wid, :]
        return grad_x, grad_w

    return make_node(value, "conv2d", (x, w), bwd)


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatchError("transposed_conv2d", x.shape, w.shape)
    b, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = transposed_conv2d_output_size(h, kh, stride, padding)
    ow = transposed_conv2d_output_size(wid, kw, stride, padding)
    hfull, wfull = (h - 1) * stride + kh, (wid - 1) * stride + kw
    # every input pixel stamps a weighted kernel into the (strided) output
    tmp = (x.data.reshape(b * h * wid, cin) @ w.data.reshape(kh, kw, cin, cout).transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout))
    cols = tmp.reshape(b, h, wid, kh, kw, cout)
    full = _scatter_cols(cols, hfull, wfull, stride)
    value = full if padding == 0 else full[:, padding : padding + oh, padding : padding + ow, :]
    x_data, w_data = x.data, w.data

    def bwd(g: np.ndarray):
        gfull = g
        if padding != 0:
            gfull = np.zeros((b, hfull, wfull, cout), dtype=g.dtype)
            gfull[:, padding : padding + oh, padding : padding + ow, :] = g
        gcols = _gather_cols(gfull, kh, kw, stride, h, wid)  # (b,h,w,kh,kw,cout)
        gcols2d = gcols.reshape(b * h * wid, kh * kw * cout)
        wmat = w_data.reshape(kh, kw, cin, cout).transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
        grad_x = (gcols2d @ wmat.T).reshape(b, h, wid, cin)
        grad_w_mat = x_data.reshape(b * h * wid, cin).T @ gcols2d  # (cin, kh*kw*cout)
        grad_w = grad_w_mat.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        return grad_x, grad_w

    return make_node(value, "transposed_conv2d", (x, w), bwd)
