# app/tensor.py
"""
Reverse-mode automatic differentiation over numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records the parents plus a closure that maps the output gradient to one
gradient per parent. `Tensor.backward()` walks the recorded graph once in
reverse topological order. The graph is rebuilt on every forward pass.
"""
import logging
import zlib
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from app.errors import ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_state = {
    "dtype": np.float32,
    "grad_enabled": True,
    "detect_anomaly": False,
}


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with (float64 for gradient checks)."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad():
    """Run ops without recording a graph; used for inference and evaluation."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def set_detect_anomaly(enabled: bool) -> None:
    _state["detect_anomaly"] = bool(enabled)


def default_dtype():
    return _state["dtype"]


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # --- operator sugar ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take(self, index)

    def backward(self) -> None:
        """Populate `.grad` on every reachable leaf that requires a gradient."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not connected to any parameter")

        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _guard(*inputs: Tensor) -> None:
    if not _state["detect_anomaly"]:
        return
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in op input {t!r}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


# --- elementwise ---

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _guard(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _guard(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _guard(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    _guard(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _lift(a)
    _guard(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _result(data, (a,), lambda g: (g / a.data,))


def abs(a) -> Tensor:  # noqa: A001
    a = _lift(a)
    _guard(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = _lift(a)
    _guard(a)
    mask = (a.data > 0).astype(a.data.dtype)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    _guard(a)
    data = special.expit(a.data).astype(a.data.dtype)
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def log_sigmoid(a) -> Tensor:
    a = _lift(a)
    _guard(a)
    data = special.log_expit(a.data).astype(a.data.dtype)
    return _result(data, (a,), lambda g: (g * special.expit(-a.data).astype(a.data.dtype),))


def detach(a) -> Tensor:
    a = _lift(a)
    return Tensor(a.data.copy())


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward emits `hard` exactly; the gradient flows to `soft` untouched."""
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if list(hard.shape) != soft.shape:
        raise ShapeError(f"straight_through: hard {list(hard.shape)} vs soft {soft.shape}")
    return _result(hard.copy(), (soft,), lambda g: (g,))


# --- linear algebra ---

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _guard(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims do not broadcast in {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(data, (a, b), backward)


def conv1d(x, weight, bias=None, stride: int = 1, padding: Tuple[int, int] = (0, 0)) -> Tensor:
    """
    Time-major 1-D convolution.
    x: (L, C_in); weight: (C_out, C_in, K); bias: (C_out,). Output: (L_out, C_out) with
    L_out = floor((L + pad_left + pad_right - K) / stride) + 1.
    """
    x, weight = _lift(x), _lift(weight)
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        parents.append(bias)
    _guard(*parents)
    if x.ndim != 2 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects x (L, C_in) and weight (C_out, C_in, K), got {x.shape} and {weight.shape}")
    c_out, c_in, k = weight.data.shape
    if x.data.shape[1] != c_in:
        raise ShapeError(f"conv1d: input has {x.data.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    pad_left, pad_right = padding
    xp = np.pad(x.data, ((pad_left, pad_right), (0, 0)))
    length = xp.shape[0]
    if length < k:
        raise ShapeError(f"conv1d: padded length {length} is shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    # windows: (L_out, C_in, K)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)[::stride][:l_out]
    data = np.einsum("lck,ock->lo", windows, weight.data, optimize=True)
    if bias is not None:
        data = data + bias.data

    def backward(g):
        gw = np.einsum("lo,lck->ock", g, windows, optimize=True)
        cols = np.einsum("lo,ock->lck", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gxp[j:j + span:stride] += cols[:, :, j]
        gx = gxp[pad_left:length - pad_right]
        grads = [gx, gw]
        if bias is not None:
            grads.append(_accumulate_sum(g, axis=0))
        return grads

    return _result(data, parents, backward)


# --- normalisation / probability ---

def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _guard(a)
    data = special.softmax(a.data, axis=axis).astype(a.data.dtype)

    def backward(g):
        inner = _accumulate_sum(g * data, axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _guard(a)
    data = special.log_softmax(a.data, axis=axis).astype(a.data.dtype)

    def backward(g):
        probs = np.exp(data)
        return (g - probs * _accumulate_sum(g, axis=axis, keepdims=True),)

    return _result(data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    _guard(x, gamma, beta)
    dim = x.data.shape[-1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({dim},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = _accumulate_sum(g * xhat, axis=lead)
        dbeta = _accumulate_sum(g, axis=lead)
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(data, (x, gamma, beta), backward)


# --- indexing / shape ---

def embedding(table, ids) -> Tensor:
    """Row lookup: out[...] = table[ids[...]]."""
    table = _lift(table)
    _guard(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding ids out of range [0, {rows}): min {ids.min()}, max {ids.max()}")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(data, (table,), backward)


def take(a, index) -> Tensor:
    """Basic or fancy indexing (the `slice` op)."""
    a = _lift(a)
    try:
        data = a.data[index]
    except IndexError as e:
        raise ShapeError(f"slice {index!r} out of bounds for shape {a.shape}") from e

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(np.array(data, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    _guard(*tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result(data, tensors, backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {list(shape)}") from e
    return _result(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


# --- reductions (accumulated in float64) ---

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    _guard(a)
    data = _accumulate_sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _result(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else int(np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of {a.shape}")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- op-kind dispatch ---

def _conv1d_op(inputs, attrs):
    return conv1d(*inputs, stride=attrs.get("stride", 1), padding=tuple(attrs.get("padding", (0, 0))))


OPS: Dict[str, Callable] = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv1d": _conv1d_op,
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "log": lambda inputs, attrs: log(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "layer-norm": lambda inputs, attrs: layer_norm(*inputs, eps=attrs.get("eps", 1e-5)),
    "embedding-lookup": lambda inputs, attrs: embedding(inputs[0], attrs["ids"]),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 0)),
    "slice": lambda inputs, attrs: take(inputs[0], attrs["index"]),
    "sum": lambda inputs, attrs: sum(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "mean": lambda inputs, attrs: mean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "relu": lambda inputs, attrs: relu(inputs[0]),
}


def forward_op(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Apply an op by name; the graph edge is recorded when any input requires a gradient."""
    op = OPS.get(kind)
    if op is None:
        raise ContractError(f"unknown op kind '{kind}'; expected one of {sorted(OPS)}")
    return op([_lift(t) for t in inputs], attrs or {})


# --- randomness ---

def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit seed for a named sub-stream."""
    mixed = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    return int(mixed.generate_state(1, dtype=np.uint64)[0])


class RngState:
    """
    Seeded random stream. Identical seed and identical call sequence give
    identical draws; `position` counts the draw calls made so far.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"RngState(seed={self.seed}, position={self.position})"

    def fork(self, label: str) -> "RngState":
        return RngState(derive_seed(self.seed, label))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        self.position += 1
        return self._generator.uniform(low, high, size=size)

    def normal(self, scale: float = 1.0, size=None) -> np.ndarray:
        self.position += 1
        return self._generator.normal(0.0, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        self.position += 1
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._generator.permutation(n)

    def gumbel(self, size) -> np.ndarray:
        """v = -log(-log(u)), u ~ U(0, 1), with u kept strictly inside the interval."""
        self.position += 1
        tiny = np.finfo(np.float64).tiny
        u = np.clip(self._generator.random(size=size), tiny, 1.0 - 1e-12)
        return -np.log(-np.log(u))
