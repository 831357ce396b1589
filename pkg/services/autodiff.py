#!/usr/bin/env python3
"""
mmtranslate/services/autodiff.py
Reverse-mode differentiation over dense float64 arrays.

Every trainable computation in the toolkit is a DAG of Nodes built from the
primitives below. A node evaluates eagerly when all of its inputs carry values;
graphs built over placeholders are evaluated later with forward(root, bindings).
"""

import math
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from services.errors import GraphError, NonFiniteError, ShapeMismatchError

DTYPE = np.float64

OP_KINDS = (
    'leaf', 'add', 'matmul', 'mul', 'sigmoid', 'tanh', 'softmax', 'log_softmax',
    'concat', 'stack', 'slice', 'sum', 'mean', 'abs',
)


class Node:
    """One vertex of the computation graph"""

    __slots__ = ('op', 'inputs', 'attrs', 'value', 'grad', 'name', 'trainable', 'shape')

    def __init__(self, value: Optional[np.ndarray] = None, op: str = 'leaf',
                 inputs: Sequence['Node'] = (), attrs: Optional[Dict[str, Any]] = None,
                 name: Optional[str] = None, trainable: bool = False,
                 shape: Optional[Sequence[int]] = None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.trainable = trainable
        if value is not None:
            self.shape = tuple(value.shape)
        else:
            self.shape = tuple(shape) if shape is not None else None

    @property
    def is_leaf(self) -> bool:
        return self.op == 'leaf'

    def describe(self) -> str:
        label = self.name or self.op
        return f"{label}{list(self.shape) if self.shape is not None else ''}"

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, name={self.name!r}, shape={self.shape})"

    # Operator sugar; every method maps onto a primitive
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __sub__(self, other): return add(self, mul(other, -1.0))
    def __rsub__(self, other): return add(other, mul(self, -1.0))
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return take(self, key)


# ============================================================================
# LEAVES
# ============================================================================

def _as_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=DTYPE)


def constant(value: Any, name: Optional[str] = None) -> Node:
    """Non-trainable input leaf"""
    return Node(_as_array(value), name=name)


def parameter(value: Any, name: Optional[str] = None) -> Node:
    """Trainable leaf; its .grad accumulates until sgd_step or zero_grad"""
    return Node(_as_array(value), name=name, trainable=True)


def placeholder(shape: Sequence[int], name: Optional[str] = None) -> Node:
    """Unbound leaf; a value must be supplied through forward(bindings=...)"""
    return Node(None, name=name, shape=shape)


def detach(node: Node, name: Optional[str] = None) -> Node:
    """Copy a node's current value into a fresh constant (gradient stops here)"""
    if node.value is None:
        raise GraphError(f"cannot detach unevaluated node {node.describe()}")
    return constant(node.value, name=name or node.name)


def _lift(x: Any) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ============================================================================
# FORWARD RULES
# ============================================================================

def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, [a.shape, b.shape])


def _fwd_add(vals, attrs):
    _check_broadcast('add', vals[0], vals[1])
    return vals[0] + vals[1]


def _fwd_mul(vals, attrs):
    _check_broadcast('mul', vals[0], vals[1])
    return vals[0] * vals[1]


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError('matmul', [a.shape, b.shape])
    return np.matmul(a, b)


def _fwd_sigmoid(vals, attrs):
    x = vals[0]
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fwd_tanh(vals, attrs):
    return np.tanh(vals[0])


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _fwd_softmax(vals, attrs):
    if vals[0].ndim < 1:
        raise ShapeMismatchError('softmax', [vals[0].shape], 'needs at least one axis')
    return _stable_softmax(vals[0])


def _fwd_log_softmax(vals, attrs):
    x = vals[0]
    if x.ndim < 1:
        raise ShapeMismatchError('log_softmax', [x.shape], 'needs at least one axis')
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _fwd_concat(vals, attrs):
    axis = attrs['axis']
    first = vals[0]
    for v in vals[1:]:
        if v.ndim != first.ndim or any(
                d1 != d2 for i, (d1, d2) in enumerate(zip(first.shape, v.shape))
                if i != axis % max(first.ndim, 1)):
            raise ShapeMismatchError('concat', [x.shape for x in vals])
    return np.concatenate(vals, axis=axis)


def _fwd_stack(vals, attrs):
    if any(v.shape != vals[0].shape for v in vals):
        raise ShapeMismatchError('stack', [x.shape for x in vals])
    return np.stack(vals, axis=0)


def _fwd_slice(vals, attrs):
    try:
        return np.array(vals[0][attrs['key']], dtype=DTYPE)
    except IndexError as e:
        raise ShapeMismatchError('slice', [vals[0].shape], str(e))


def _fwd_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs['axis'])


def _fwd_mean(vals, attrs):
    if vals[0].size == 0:
        raise ShapeMismatchError('mean', [vals[0].shape], 'empty operand')
    return np.mean(vals[0], axis=attrs['axis'])


def _fwd_abs(vals, attrs):
    return np.abs(vals[0])


_FORWARD: Dict[str, Callable] = {
    'add': _fwd_add, 'mul': _fwd_mul, 'matmul': _fwd_matmul,
    'sigmoid': _fwd_sigmoid, 'tanh': _fwd_tanh, 'softmax': _fwd_softmax,
    'log_softmax': _fwd_log_softmax, 'concat': _fwd_concat, 'stack': _fwd_stack,
    'slice': _fwd_slice, 'sum': _fwd_sum, 'mean': _fwd_mean, 'abs': _fwd_abs,
}


# ============================================================================
# BACKWARD RULES
# ============================================================================

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, size in enumerate(shape):
        if size == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _bwd_add(g, vals, out, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _bwd_mul(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _bwd_matmul(g, vals, out, attrs):
    a, b = vals
    a2 = a if a.ndim == 2 else a[np.newaxis, :]
    b2 = b if b.ndim == 2 else b[:, np.newaxis]
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return [(g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)]


def _bwd_sigmoid(g, vals, out, attrs):
    return [g * out * (1.0 - out)]


def _bwd_tanh(g, vals, out, attrs):
    return [g * (1.0 - out * out)]


def _bwd_softmax(g, vals, out, attrs):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _bwd_log_softmax(g, vals, out, attrs):
    return [g - np.exp(out) * np.sum(g, axis=-1, keepdims=True)]


def _bwd_concat(g, vals, out, attrs):
    axis = attrs['axis']
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _bwd_stack(g, vals, out, attrs):
    return [g[i] for i in range(len(vals))]


def _bwd_slice(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    np.add.at(full, attrs['key'], g)
    return [full]


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _bwd_sum(g, vals, out, attrs):
    return [np.array(_expand_reduced(g, vals[0].shape, attrs['axis']))]


def _bwd_mean(g, vals, out, attrs):
    a = vals[0]
    axis = attrs['axis']
    count = a.size if axis is None else a.shape[axis]
    return [np.array(_expand_reduced(g, a.shape, axis)) / count]


def _bwd_abs(g, vals, out, attrs):
    # sign(0) == 0 is the chosen subgradient at the kink
    return [g * np.sign(vals[0])]


_BACKWARD: Dict[str, Callable] = {
    'add': _bwd_add, 'mul': _bwd_mul, 'matmul': _bwd_matmul,
    'sigmoid': _bwd_sigmoid, 'tanh': _bwd_tanh, 'softmax': _bwd_softmax,
    'log_softmax': _bwd_log_softmax, 'concat': _bwd_concat, 'stack': _bwd_stack,
    'slice': _bwd_slice, 'sum': _bwd_sum, 'mean': _bwd_mean, 'abs': _bwd_abs,
}


def _evaluate(node: Node) -> np.ndarray:
    vals = [inp.value for inp in node.inputs]
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        out = _FORWARD[node.op](vals, node.attrs)
    out = np.asarray(out, dtype=DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"node {node.describe()}", f"op '{node.op}' produced NaN/Inf")
    return out


def _make(op: str, inputs: Sequence[Any], **attrs) -> Node:
    nodes = [_lift(x) for x in inputs]
    node = Node(op=op, inputs=nodes, attrs=attrs)
    if all(n.value is not None for n in nodes):
        node.value = _evaluate(node)
        node.shape = tuple(node.value.shape)
    return node


# ============================================================================
# PRIMITIVES
# ============================================================================

def add(a, b) -> Node:
    return _make('add', [a, b])


def mul(a, b) -> Node:
    return _make('mul', [a, b])


def matmul(a, b) -> Node:
    return _make('matmul', [a, b])


def sigmoid(x) -> Node:
    return _make('sigmoid', [x])


def tanh(x) -> Node:
    return _make('tanh', [x])


def softmax(x) -> Node:
    return _make('softmax', [x])


def log_softmax(x) -> Node:
    return _make('log_softmax', [x])


def concat(xs: Sequence[Any], axis: int = 0) -> Node:
    if not xs:
        raise ShapeMismatchError('concat', [], 'no operands')
    return _make('concat', list(xs), axis=axis)


def stack(xs: Sequence[Any]) -> Node:
    if not xs:
        raise ShapeMismatchError('stack', [], 'no operands')
    return _make('stack', list(xs))


def take(x, key) -> Node:
    """The slice primitive: any numpy index, gather by index arrays included"""
    return _make('slice', [x], key=key)


def sum_(x, axis: Optional[int] = None) -> Node:
    return _make('sum', [x], axis=axis)


def mean(x, axis: Optional[int] = None) -> Node:
    return _make('mean', [x], axis=axis)


def abs_(x) -> Node:
    return _make('abs', [x])


# ============================================================================
# GRAPH TRAVERSAL
# ============================================================================

def topological_order(root: Node) -> List[Node]:
    """Inputs before consumers; iterative so long unrolled sequences do not recurse"""
    order: List[Node] = []
    seen = set()
    pending = [(root, False)]
    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        pending.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                pending.append((inp, False))
    return order


def leaves(root: Node) -> List[Node]:
    return [n for n in topological_order(root) if n.is_leaf]


def forward(root: Node, bindings: Optional[Mapping[Union[Node, str], Any]] = None) -> np.ndarray:
    """Re-evaluate every node under root, binding leaf values first"""
    order = topological_order(root)
    if bindings:
        by_name = {n.name: n for n in order if n.is_leaf and n.name}
        for key, value in bindings.items():
            leaf = key if isinstance(key, Node) else by_name.get(key)
            if leaf is None or not leaf.is_leaf:
                raise GraphError(f"binding '{key}' does not name a leaf of this graph")
            arr = _as_array(value)
            if leaf.shape is not None and leaf.value is None and tuple(arr.shape) != leaf.shape:
                raise ShapeMismatchError('leaf', [leaf.shape, arr.shape], f"binding for {leaf.describe()}")
            leaf.value = arr
            leaf.shape = tuple(arr.shape)
    for node in order:
        if node.is_leaf:
            if node.value is None:
                raise GraphError(f"leaf {node.describe()} is unbound")
            continue
        node.value = _evaluate(node)
        node.shape = tuple(node.value.shape)
    return root.value


def backward(root: Node) -> Dict[Node, np.ndarray]:
    """
    Gradient of a scalar root with respect to every leaf.
    Leaf .grad fields accumulate across calls; the returned map holds this pass only.
    """
    if root.value is None:
        raise GraphError(f"forward has not been run for {root.describe()}")
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")

    order = topological_order(root)
    for node in order:
        if node.value is None:
            raise GraphError(f"forward has not been run for {node.describe()}")

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    result: Dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.value)
        if node.is_leaf:
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        vals = [inp.value for inp in node.inputs]
        for inp, gi in zip(node.inputs, _BACKWARD[node.op](g, vals, node.value, node.attrs)):
            key = id(inp)
            # Fan-out: a node feeding several consumers sums their contributions
            grads[key] = gi if key not in grads else grads[key] + gi
    return result


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


def grad_check(root: Node, check_leaves: Optional[Sequence[Node]] = None,
               eps: float = 1e-5, floor: float = 1e-12) -> float:
    """
    Max over leaf elements of |analytic - central difference| /
    max(|analytic|, |numeric|, floor). Leaf values and grads are restored afterwards.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    forward(root)
    targets = list(check_leaves) if check_leaves is not None else leaves(root)
    saved = {id(n): n.grad for n in targets}
    zero_grad(targets)
    analytic = backward(root)

    worst = 0.0
    for leaf in targets:
        flat = leaf.value.reshape(-1)
        ana = analytic.get(leaf, np.zeros_like(leaf.value)).reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(forward(root))
            flat[i] = original - eps
            f_minus = float(forward(root))
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(numeric), floor)
            worst = max(worst, abs(ana[i] - numeric) / denom)

    forward(root)
    for leaf in targets:
        leaf.grad = saved[id(leaf)]
    return worst


def sgd_step(params: Union[Mapping[str, Node], Iterable[Node]], learning_rate: float,
             clip_norm: Optional[float] = None) -> float:
    """
    p <- p - lr * g after optional global-norm clipping, then zero the gradients.
    Returns the global gradient norm before clipping. A non-finite gradient refuses
    the whole step and leaves every parameter untouched.
    """
    if learning_rate < 0:
        raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in plist]
    for p, g in zip(plist, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of '{p.name or p.describe()}'", 'SGD step refused')

    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    for p, g in zip(plist, grads):
        p.value -= (learning_rate * scale) * g
        p.grad = None
    return norm
