# app/nn.py
"""
Parameter storage, the layers the models are assembled from, and the Adam
optimizer. Layers keep references to the Tensors registered in a ParamStore,
so loading a checkpoint into the store updates every layer in place.
"""
import logging
import math
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from app import tensor as T
from app.errors import CheckpointError, ContractError
from app.tensor import RngState, Tensor

logger = logging.getLogger(__name__)


# --- initialisers ---

def init_uniform_fan_in(rng: RngState, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_normal(rng: RngState, shape: Tuple[int, ...], scale: float = 0.02) -> np.ndarray:
    return rng.normal(scale, size=shape)


INITIALISERS = {
    "uniform": lambda rng, shape, fan_in, scale: init_uniform_fan_in(rng, shape, fan_in),
    "normal": lambda rng, shape, fan_in, scale: init_normal(rng, shape, scale),
    "zeros": lambda rng, shape, fan_in, scale: np.zeros(shape),
    "ones": lambda rng, shape, fan_in, scale: np.ones(shape),
}


class ParamStore:
    """Named parameters plus their Adam moments and the optimizer step count."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self):
        return len(self.params)

    def create(self, name: str, shape: Tuple[int, ...], init: str = "uniform",
               fan_in: Optional[int] = None, scale: float = 0.02) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter '{name}' already exists")
        if init not in INITIALISERS:
            raise ContractError(f"unknown initialiser '{init}'")
        # each parameter draws from its own stream so creation order does not matter
        rng = RngState(self.seed).fork(f"init/{name}")
        fan_in = fan_in if fan_in is not None else (shape[0] if shape else 1)
        data = INITIALISERS[init](rng, tuple(shape), fan_in, scale)
        param = Tensor(data, requires_grad=True, name=name)
        self.params[name] = param
        self.m[name] = np.zeros_like(param.data)
        self.v[name] = np.zeros_like(param.data)
        return param

    def get(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"no parameter named '{name}'") from None

    def names(self) -> List[str]:
        return sorted(self.params)

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters whose name starts with `prefix`."""
        return int(sum(p.size for n, p in self.params.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def load_arrays(self, arrays: Dict[str, np.ndarray], moments: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
                    step: int = 0) -> None:
        """Overwrite parameter values (and optionally optimizer state) in place."""
        missing = sorted(set(self.params) - set(arrays))
        unexpected = sorted(set(arrays) - set(self.params))
        if missing or unexpected:
            raise CheckpointError(f"checkpoint parameters do not match the model: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in self.params.items():
            value = np.asarray(arrays[name])
            if value.shape != param.data.shape:
                raise CheckpointError(f"parameter '{name}' has shape {list(value.shape)} in checkpoint, model expects {param.shape}")
            param.data = value.astype(param.data.dtype).copy()
            param.grad = None
            if moments and name in moments:
                self.m[name] = moments[name][0].astype(param.data.dtype).copy()
                self.v[name] = moments[name][1].astype(param.data.dtype).copy()
            else:
                self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
        self.step = int(step)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Optional[Iterable[str]] = None) -> ParamStore:
    """One bias-corrected Adam update on every parameter, then clear the grads."""
    selected = list(names) if names is not None else store.names()
    missing = [n for n in selected if store.params[n].grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {len(missing)} parameter(s), e.g. {missing[:3]}")
    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name in selected:
        param = store.params[name]
        g = param.grad.astype(param.data.dtype)
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / correction1
        v_hat = store.v[name] / correction2
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)
        param.grad = None
    return store


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in store.params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# --- layers ---

class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, bias: bool = True,
                 init: str = "uniform", scale: float = 0.02):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = store.create(f"{name}/W", (in_dim, out_dim), init=init, fan_in=in_dim, scale=scale)
        self.bias = store.create(f"{name}/b", (out_dim,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        out = T.matmul(x, self.weight)
        return T.add(out, self.bias) if self.bias is not None else out


class Conv1d:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: Tuple[int, int] = (0, 0)):
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel
        self.weight = store.create(f"{name}/w", (out_channels, in_channels, kernel), fan_in=fan_in)
        self.bias = store.create(f"{name}/b", (out_channels,), init="uniform", fan_in=fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Embedding:
    def __init__(self, store: ParamStore, name: str, rows: int, dim: int):
        self.rows, self.dim = rows, dim
        self.table = store.create(f"{name}/table", (rows, dim), init="normal", scale=0.02)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.create(f"{name}/gamma", (dim,), init="ones")
        self.beta = store.create(f"{name}/beta", (dim,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int):
        self.inner = Linear(store, f"{name}/ff1", dim, hidden)
        self.outer = Linear(store, f"{name}/ff2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


MASK_VALUE = -1e9


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative value above it."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        if dim % heads != 0:
            raise ContractError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.q = Linear(store, f"{name}/q", dim, dim)
        self.k = Linear(store, f"{name}/k", dim, dim)
        self.v = Linear(store, f"{name}/v", dim, dim)
        self.o = Linear(store, f"{name}/o", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        # (L, dim) -> (heads, L, head_dim)
        return T.transpose(T.reshape(x, (x.shape[0], self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, query: Tensor, memory: Tensor, causal: bool = False) -> Tuple[Tensor, np.ndarray]:
        """Returns the attended output (Lq, dim) and the attention weights (heads, Lq, Lk)."""
        lq, lk = query.shape[0], memory.shape[0]
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        if causal:
            if lq != lk:
                raise ContractError("causal attention needs equal query and memory lengths")
            scores = T.add(scores, T.Tensor(causal_mask(lq)))
        weights = T.softmax(scores, axis=-1)
        context = T.matmul(weights, v)
        merged = T.reshape(T.transpose(context, (1, 0, 2)), (lq, self.dim))
        return self.o(merged), weights.data
