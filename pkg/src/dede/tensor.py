"""Dense tensors and a tape-based reverse-mode differentiation engine.

Tensors wrap numpy arrays. Primitive applications are recorded on the active
:class:`Graph` (entered with ``with Graph() as g:``) whenever at least one input
requires a gradient; outside a graph every primitive is a plain forward
computation, which is how inference runs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class ContractError(ValueError):
    """Raised when a primitive's shape or arity contract is violated."""


class DomainError(ValueError):
    """Raised when a primitive is applied outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar over the primitive set
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE: list["Graph"] = []


class Graph:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so every node's inputs precede it
    and a single reversed sweep is a valid reverse pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        node = Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        graph.nodes.append(node)
    return out


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``graph``; accumulate into leaf ``.grad``.

    Returns the mapping from each reached requires-grad leaf to the gradient
    contributed by this pass.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise ContractError("loss is not reachable from any recorded primitive")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, getattr(b, "dtype", None)), _as_tensor(b, getattr(a, "dtype", None))
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, getattr(b, "dtype", None)), _as_tensor(b, getattr(a, "dtype", None))
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * x.data.dtype.type(c)
    return _record("scale", (x,), out, lambda g: (g * c,))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _record("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def _has_advanced(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in items)


def slice_(x: Tensor, key) -> Tensor:
    """Basic or advanced (integer-array) indexing; gathers scatter-add on the way back."""
    try:
        out = x.data[key]
    except IndexError as err:
        raise ContractError(f"slice: {err} for shape {x.shape}") from None
    advanced = _has_advanced(key)
    out = np.array(out, copy=True) if not advanced else out

    def bw(g):
        z = np.zeros_like(x.data)
        if advanced:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return (z,)

    return _record("slice", (x,), out, bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ContractError(f"concat: shapes {[t.shape for t in xs]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(xs), out, bw)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _record("sum", (x,), out, lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1) if x.data.size else 1

    def bw(g):
        return (_expand_reduced(g / count, x.shape, axis, keepdims).astype(x.dtype),)

    return _record("mean", (x,), out, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _record("relu", (x,), out, lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = (0.5 * v * (1.0 + t)).astype(x.dtype)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
        return ((g * d).astype(x.dtype),)

    return _record("gelu", (x,), out, bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_lastdim", (x,), y, bw)


def layernorm_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; no affine terms."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record("layernorm_lastdim", (x,), xhat.astype(x.dtype), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = _as_tensor(a, getattr(b, "dtype", None)), _as_tensor(b, getattr(a, "dtype", None))
    if a.shape != b.shape:
        raise ContractError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=diff.dtype)

    def bw(g):
        d = diff * (2.0 * g / n)
        return (d if a.requires_grad else None), (-d if b.requires_grad else None)

    return _record("mse", (a, b), out, bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis (broadcasting leading axes)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"cosine_similarity: last-axis mismatch {a.shape} vs {b.shape}")
    _check_broadcast("cosine_similarity", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = cos[..., 0]

    def bw(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (b.data / (na * nb) - cos * a.data / (na * na)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (a.data / (na * nb) - cos * b.data / (nb * nb)), b.shape)
        return ga, gb

    return _record("cosine_similarity", (a, b), out, bw)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy_with_logits: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("cross_entropy_with_logits: label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record("cross_entropy_with_logits", (logits,), out, bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")
    out = np.log(x.data)
    return _record("log", (x,), out, lambda g: (g / x.data,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "mean": mean,
    "sum": sum_,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layernorm_lastdim": layernorm_lastdim,
    "mse": mse,
    "cosine_similarity": cosine_similarity,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "exp": exp,
    "log": log,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------- composite helpers


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    if eps:
        x = add(x, Tensor(np.asarray(eps, dtype=x.dtype)))
    return exp(scale(log(x), 0.5))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    sq = sum_(mul(x, x), axis=-1, keepdims=True)
    sq = add(sq, Tensor(np.asarray(eps, dtype=x.dtype)))
    return mul(x, exp(scale(log(sq), -0.5)))


def clamp01(x: Tensor) -> Tensor:
    # relu(x) - relu(x - 1) == min(max(x, 0), 1)
    return add(relu(x), scale(relu(add(x, Tensor(np.asarray(-1.0, dtype=x.dtype)))), -1.0))
