"""Reverse-mode automatic differentiation over numpy arrays.

Operations executed inside a ``Tape`` context are recorded in creation order,
so replaying the tape backwards is already a reverse topological order.
Outside a tape the same functions just compute values, which is what the
evaluation paths use.

    >>> x = param(np.array(3.0), "x")
    >>> y = param(np.array(4.0), "y")
    >>> with Tape():
    ...     z = x * y
    >>> backward(z)["x"]
    array(4.)
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, OracleFailure, TrainingFault, VSDNError

_local = threading.local()
_tape_ids = itertools.count()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Records operations on nodes that depend on a trainable parameter."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffNode:
    __slots__ = ("value", "requires_grad", "name", "parents", "vjp", "tape", "index")
    # make numpy defer to our operators for ``ndarray <op> DiffNode``
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.parents = ()
        self.vjp = None
        self.tape = None
        self.index = None

    @property
    def tape_id(self):
        return None if self.tape is None else self.tape.id

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"DiffNode{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def param(value, name: str) -> DiffNode:
    """Trainable leaf."""
    return DiffNode(value, requires_grad=True, name=name)


def const(value) -> DiffNode:
    return value if isinstance(value, DiffNode) else DiffNode(value)


def _record(value, parents, vjp) -> DiffNode:
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return DiffNode(value)
    node = DiffNode(value, requires_grad=True)
    node.parents = parents
    node.vjp = vjp
    node.tape = tape
    node.index = len(tape.nodes)
    tape.nodes.append(node)
    return node


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = const(a), const(b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = const(a), const(b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a):
    a = const(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(out, (a, b), lambda g: (g / bv, -g * out / bv))


def square(a):
    a = const(a)
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, w):
    """``a @ w`` where ``w`` is a matrix and ``a`` has any number of leading dims."""
    a, w = const(a), const(w)
    av, wv = a.value, w.value
    if wv.ndim != 2 or av.shape[-1] != wv.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {av.shape} @ {wv.shape}")

    def vjp(g):
        ga = g @ wv.T
        gw = av.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1])
        return ga, gw

    return _record(av @ wv, (a, w), vjp)


def tanh(a):
    a = const(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = const(a)
    on = a.value > 0
    return _record(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a):
    a = const(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = const(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = const(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def softplus(a):
    a = const(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _record(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def logsumexp(v, axis=-1):
    """Stable ``log(sum(exp(v)))`` along ``axis`` (all elements when ``None``)."""
    v = const(v)
    vv = v.value
    if vv.size == 0 or (axis is not None and vv.shape[axis] == 0):
        raise ContractViolation("logsumexp of an empty array")
    m = np.max(vv, axis=axis, keepdims=True)
    s = np.sum(np.exp(vv - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def vjp(g):
        gk = np.reshape(g, out_k.shape) if axis is None else np.expand_dims(g, axis)
        return (gk * np.exp(vv - out_k),)

    return _record(out, (v,), vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = const(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = const(a)
    count = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# structural helpers: they move values around without arithmetic


def clip(a, lo, hi):
    a = const(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    """Elementwise select with a constant boolean condition."""
    a, b = const(a), const(b)
    cond = np.asarray(cond, dtype=bool)
    return _record(np.where(cond, a.value, b.value), (a, b), lambda g: (g * cond, g * ~cond))


class _SliceGrad:
    """Gradient that is nonzero only on ``key``; accumulated in place by ``backward``."""
    __slots__ = ("key", "grad")

    def __init__(self, key, grad):
        self.key = key
        self.grad = grad


def _is_basic_index(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def getitem(a, key):
    a = const(a)
    basic = _is_basic_index(key)
    return _record(a.value[key], (a,), lambda g: (_SliceGrad(key, g if basic else np.asarray(g)),))


def reshape(a, shape):
    a = const(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape):
    a = const(a)
    return _record(np.broadcast_to(a.value, shape), (a,), lambda g: (g,))


def concat(items: Sequence, axis=-1):
    """Concatenate along ``axis`` after broadcasting the other dimensions."""
    items = [const(x) for x in items]
    ndim = max(x.value.ndim for x in items)
    ax = axis % ndim
    lead = np.broadcast_shapes(*[x.value.shape[:ax] for x in items])
    vals = [np.broadcast_to(x.value, lead + x.value.shape[ax:]) for x in items]
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate(vals, axis=ax), tuple(items), vjp)


def stack(items: Sequence, axis=0):
    items = [const(x) for x in items]
    out = np.stack([x.value for x in items], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tuple(items), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _accumulate(prev, pg, shape, owned, key):
    """Add ``pg`` into ``prev``; buffers whose key is in ``owned`` are private and updated in place."""
    if isinstance(pg, _SliceGrad):
        if key not in owned:
            prev = np.zeros(shape) if prev is None else np.array(prev, dtype=np.float64)
            owned.add(key)
        if _is_basic_index(pg.key):
            prev[pg.key] += pg.grad
        else:
            np.add.at(prev, pg.key, pg.grad)
        return prev
    pg = _unbroadcast(np.asarray(pg), shape)
    if prev is None:
        return pg
    if key in owned:
        prev += pg
        return prev
    owned.add(key)
    return prev + pg


def backward(root: DiffNode, params: Optional[Iterable[DiffNode]] = None) -> Dict[str, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to named trainable leaves.

    Leaves passed in ``params`` that do not influence ``root`` get zeros.
    """
    if root.value.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.value.shape}")
    leaf_grads: Dict[int, np.ndarray] = {}
    leaves: Dict[int, DiffNode] = {}
    owned = set()
    if root.requires_grad and root.tape is None:
        leaf_grads[id(root)] = np.ones(root.value.shape)
        leaves[id(root)] = root
    elif root.requires_grad:
        tape = root.tape
        grads = {root.index: np.ones(root.value.shape)}
        nodes = tape.nodes
        for i in range(root.index, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = nodes[i]
            for p, pg in zip(node.parents, node.vjp(g)):
                if not p.requires_grad:
                    continue
                if p.tape is None:
                    key = id(p)
                    leaves[key] = p
                    leaf_grads[key] = _accumulate(leaf_grads.get(key), pg, p.value.shape, owned, ("leaf", key))
                else:
                    if p.tape is not tape or p.index >= i:
                        raise VSDNError(f"tape inconsistency at node {i} (cycle or foreign tape)")
                    grads[p.index] = _accumulate(grads.get(p.index), pg, p.value.shape, owned, p.index)
    out = {}
    for key, g in leaf_grads.items():
        name = leaves[key].name or f"leaf_{key}"
        out[name] = out[name] + g if name in out else g
    if params is not None:
        for p in (params.values() if isinstance(params, Mapping) else params):
            if p.name not in out:
                out[p.name] = np.zeros(p.value.shape)
    return out


# ---------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class AdamHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        vals = [self.learning_rate, self.beta1, self.beta2, self.epsilon, self.weight_decay]
        if not all(np.isfinite(vals)):
            raise ConfigError("Adam hyperparameters must be finite")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and epsilon must be positive, weight_decay nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")


class ParamStore:
    """Named float64 parameter blocks with Adam moment buffers."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise ContractViolation(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def leaves(self) -> Dict[str, DiffNode]:
        return {k: param(v, k) for k, v in self.params.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def unflatten(self, flat) -> Dict[str, np.ndarray]:
        out, pos = {}, 0
        for k, v in self.params.items():
            out[k] = np.asarray(flat[pos:pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        return out

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k in self.params:
            new.params[k] = self.params[k].copy()
            new.adam_m[k] = self.adam_m[k].copy()
            new.adam_v[k] = self.adam_v[k].copy()
        new.step_count = self.step_count
        return new


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]):
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], hyper: AdamHyper) -> ParamStore:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if name not in store.params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != store.params[name].shape:
            raise ContractViolation(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient for parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    for name, g in grads.items():
        m = store.adam_m[name] = b1 * store.adam_m[name] + (1 - b1) * g
        v = store.adam_v[name] = b2 * store.adam_v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = store.params[name]
        store.params[name] = p - hyper.learning_rate * (m_hat / (np.sqrt(v_hat) + hyper.epsilon)) \
            - hyper.learning_rate * hyper.weight_decay * p
    return store


def finite_diff_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat array."""
    if h <= 0:
        raise ContractViolation("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite function value at coordinate {i}", coordinate=i)
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)
