"""Small dense-tensor autodiff engine (reverse mode, float64).

Tensors record the primitive that produced them; ``Tensor.backward`` walks the
recorded nodes in exact reverse creation order, which is a valid reverse
topological order because every node is created after its inputs.

``Graph`` wraps a python function built from these primitives so it can be
evaluated on named inputs, differentiated, and gradient-checked.
"""
from __future__ import annotations

import builtins
import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError, FormatError, GraphStateError, NumericError, ShapeError

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(seed, dtype=np.float64)}
        for node in sorted(nodes, key=lambda n: n._id, reverse=True):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return list(seen.values())


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in node '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.name = None
    out._id = next(_counter)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"node '{op}': cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D, or batched over matching leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"node 'matmul': incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), "sigmoid", backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(y, (x,), "log", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _make(y, (x,), "exp", backward)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = x.data ** p

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make(y, (x,), "power", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    """log(softmax(x)) fused as x - logsumexp(x)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    y = x.data - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), "log_softmax", backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(y), (x,), "mean", backward)


def max(x, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        y = np.squeeze(y, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _make(y, (x,), "max", backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"node 'transpose': needs rank >= 2, got {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), "transpose", backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"node 'reshape': cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(y, (x,), "reshape", backward)


def gather_rows(x, index) -> Tensor:
    """Select rows ``x[index]``; backward scatter-adds into the source rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"node 'gather_rows': index out of range for {x.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index.ravel(), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _make(x.data[index], (x,), "gather_rows", backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"node 'concat': incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, tuple(tensors), "concat", backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * mask,)

    return _make(np.clip(x.data, lo, hi), (x,), "clip", backward)


# ---------------------------------------------------------------- layers

def init_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def linear_params(rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": Tensor(init_uniform(rng, fan_in, fan_out), requires_grad=True, name=f"{prefix}.w"),
        f"{prefix}.b": Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b"),
    }


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def mlp_params(rng: np.random.Generator, prefix: str, widths: list[int]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for k, (i, o) in enumerate(zip(widths[:-1], widths[1:])):
        out.update(linear_params(rng, f"{prefix}.{k}", i, o))
    return out


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str, layers: int, final_relu: bool = False) -> Tensor:
    for k in range(layers):
        x = linear(x, params, f"{prefix}.{k}")
        if k < layers - 1 or final_relu:
            x = relu(x)
    return x


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    centred = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(mul(centred, centred), axis=-1, keepdims=True)
    return mul(centred, power(add(var, eps), -0.5))


# ---------------------------------------------------------------- graphs

class Graph:
    """A differentiable function of named inputs plus a set of parameters.

    ``fn`` receives the bound inputs (as Tensors) and the parameter mapping and
    returns either one Tensor or a dict of named Tensors.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]],
                 params: Mapping[str, Tensor] | None = None,
                 input_names: Iterable[str] | None = None):
        self.fn = fn
        self.params = dict(params or {})
        self.input_names = tuple(input_names) if input_names is not None else None
        self.outputs: dict[str, Tensor] | None = None
        self.inputs: dict[str, Tensor] | None = None

    def leaves(self) -> dict[str, Tensor]:
        found = {k: t for k, t in self.params.items() if t.requires_grad}
        for k, t in (self.inputs or {}).items():
            if t.requires_grad:
                found[f"input:{k}"] = t
        return found


def evaluate(graph: Graph, inputs: Mapping[str, object] | None = None) -> dict[str, Tensor]:
    inputs = dict(inputs or {})
    if graph.input_names is not None:
        missing = [n for n in graph.input_names if n not in inputs]
        if missing:
            raise ContractError(f"unbound graph inputs: {missing}")
    bound = {k: as_tensor(v) for k, v in inputs.items()}
    result = graph.fn(params=graph.params, **bound)
    outputs = {"output": result} if isinstance(result, Tensor) else dict(result)
    graph.inputs = bound
    graph.outputs = outputs
    return outputs


def backpropagate(graph: Graph, output: str | Tensor = "output") -> dict[str, np.ndarray]:
    if graph.outputs is None:
        raise GraphStateError("backpropagate called before evaluate")
    out = graph.outputs[output] if isinstance(output, str) else output
    if out.data.size != 1:
        raise ContractError(f"backpropagate needs a scalar output, got shape {out.shape}")
    leaves = graph.leaves()
    for t in leaves.values():
        t.grad = None
    out.backward()
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return {k: t.grad for k, t in leaves.items()}


def check_gradients(graph: Graph, inputs: Mapping[str, object] | None = None, step: float = 1e-5,
                    output: str = "output", max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per entry is ``|a - n| / max(1, |a|, |n|)``. With ``max_entries`` set,
    each tensor is checked on a random subset of that many entries.
    """
    if not 0.0 < step <= 1e-3:
        raise ContractError("step must lie in (0, 1e-3]")
    outs = evaluate(graph, inputs)
    if outs[output].data.size != 1:
        raise ContractError(f"check_gradients needs a scalar output, got shape {outs[output].shape}")
    analytic = {k: g.copy() for k, g in backpropagate(graph, output).items()}
    leaves = graph.leaves()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for key, t in leaves.items():
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            fp = _rerun(graph, output)
            flat[e] = orig - step
            fm = _rerun(graph, output)
            flat[e] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[key].reshape(-1)[e]
            err = abs(a - numeric) / builtins.max(1.0, abs(a), abs(numeric))
            worst = builtins.max(worst, err)
    return worst


def _rerun(graph: Graph, output: str) -> float:
    result = graph.fn(params=graph.params, **graph.inputs)
    if isinstance(result, Tensor):
        return float(result.data)
    return float(result[output].data)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ERNW1"


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named float64 arrays as ERNW1 records, sorted by name."""
    chunks = [MAGIC]
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: missing ERNW1 magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"{path}: truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise FormatError(f"{path}: truncated data for '{name}'")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record ({exc})") from None
    return out
