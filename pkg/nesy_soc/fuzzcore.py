"""
Differentiable real-logic core.

Truth values live in [0, 1]. Every operation builds a ``ComputeNode`` whose
value is computed eagerly; ``backward`` then walks the graph in reverse
topological order and accumulates adjoints. Values are numpy float64 arrays
(0-d for scalars), so one node can hold a whole batch of groundings.

Connective family: product t-norm, probabilistic sum, standard negation,
Reichenbach implication, p-mean-error universal aggregation (p = 2 unless
stated otherwise).
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax as _softmax

from nesy_soc.errors import FuzzyDomainError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, Sequence[float], np.ndarray]
Operand = Union["ComputeNode", ArrayLike]

# Floor inside log() of the cross-entropy; probabilities from a softmax head
# never reach it in practice.
_LOG_FLOOR = 1e-12


class ComputeNode:
    """
    One vertex of the computation graph.

    Parameters
    ----------
    op : str
        Operation tag (``constant``, ``parameter``, ``affine``, ``elu``,
        ``softmax``, ``select``, ``not``, ``and``, ``or``, ``implies``,
        ``forall-aggregate``, ``exists-aggregate``, ``sat-aggregate``,
        ``cross-entropy``).
    inputs : sequence of ComputeNode
        Operands, all created before this node.
    value : array-like
        Cached forward result.
    backward_fn : callable, optional
        Receives the adjoint of this node and returns one adjoint per input
        (``None`` for inputs that need none).
    name : str, optional
        Label used in diagnostics and checkpoints.
    """

    def __init__(
        self,
        op: str,
        inputs: Sequence["ComputeNode"],
        value: ArrayLike,
        backward_fn: Optional[Callable[[np.ndarray], List[Optional[np.ndarray]]]] = None,
        name: Optional[str] = None,
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self._backward_fn = backward_fn
        if np.isnan(self.value).any():
            raise NumericalError(f"NaN in forward value of {self.describe()}")

    def describe(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{self.op} node{label}"

    def item(self) -> float:
        """Scalar value as a Python float."""
        if self.value.size != 1:
            raise ValueError(f"{self.describe()} holds {self.value.size} values, not one")
        return float(self.value.reshape(()))

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"ComputeNode(op={self.op!r}, shape={self.value.shape}, name={self.name!r})"


# ===== LEAVES =====


def constant(value: ArrayLike, name: Optional[str] = None) -> ComputeNode:
    """Node with a fixed value; receives no gradient."""
    return ComputeNode("constant", (), value, name=name)


def parameter(value: ArrayLike, name: Optional[str] = None) -> ComputeNode:
    """Trainable leaf; ``backward`` reports its adjoint."""
    return ComputeNode("parameter", (), np.array(value, dtype=np.float64), name=name)


def _as_node(x: Operand) -> ComputeNode:
    return x if isinstance(x, ComputeNode) else constant(x)


def _check_truth(*nodes: ComputeNode) -> None:
    for node in nodes:
        v = node.value
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise FuzzyDomainError(
                f"truth values of {node.describe()} outside [0, 1]: "
                f"min={v.min():.6g} max={v.max():.6g}"
            )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sums a broadcast adjoint back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ===== NEURAL OPERATIONS =====


def affine(x: Operand, weight: ComputeNode, bias: ComputeNode) -> ComputeNode:
    """``x @ weight + bias`` for a vector or a row-batch ``x``."""
    x = _as_node(x)
    out = x.value @ weight.value + bias.value

    def backward_fn(g):
        gx = g @ weight.value.T
        if x.value.ndim == 1:
            gw = np.outer(x.value, g)
            gb = g
        else:
            gw = x.value.T @ g
            gb = g.sum(axis=0)
        return [gx, gw, gb]

    return ComputeNode("affine", (x, weight, bias), out, backward_fn)


def elu(x: ComputeNode, alpha: float = 1.0) -> ComputeNode:
    """Exponential linear unit."""
    v = x.value
    neg = alpha * np.expm1(np.minimum(v, 0.0))
    out = np.where(v > 0, v, neg)

    def backward_fn(g):
        return [g * np.where(v > 0, 1.0, neg + alpha)]

    return ComputeNode("elu", (x,), out, backward_fn)


def softmax(x: ComputeNode) -> ComputeNode:
    """Softmax along the last axis; rows become class-membership truth values."""
    s = _softmax(x.value, axis=-1)

    def backward_fn(g):
        return [s * (g - np.sum(g * s, axis=-1, keepdims=True))]

    return ComputeNode("softmax", (x,), s, backward_fn)


def select(x: ComputeNode, column: int) -> ComputeNode:
    """Column ``column`` of the last axis, i.e. ``P(x, class)`` for one class."""
    out = x.value[..., column]

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        gx[..., column] = g
        return [gx]

    return ComputeNode("select", (x,), out, backward_fn)


def cross_entropy(probs: ComputeNode, labels: Sequence[int]) -> ComputeNode:
    """Mean negative log-likelihood of integer ``labels`` under row-probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    picked = np.maximum(probs.value[rows, labels], _LOG_FLOOR)
    n = len(labels)
    out = -np.mean(np.log(picked))

    def backward_fn(g):
        gp = np.zeros_like(probs.value)
        gp[rows, labels] = -g / (n * picked)
        return [gp]

    return ComputeNode("cross-entropy", (probs,), out, backward_fn)


# ===== CONNECTIVES =====


def fuzzy_not(x: Operand) -> ComputeNode:
    """Standard negation ``1 - x``."""
    x = _as_node(x)
    _check_truth(x)
    return ComputeNode("not", (x,), 1.0 - x.value, lambda g: [-g])


def fuzzy_and(x: Operand, y: Operand) -> ComputeNode:
    """Product t-norm ``x * y``."""
    x, y = _as_node(x), _as_node(y)
    _check_truth(x, y)
    out = x.value * y.value

    def backward_fn(g):
        return [_unbroadcast(g * y.value, x.shape), _unbroadcast(g * x.value, y.shape)]

    return ComputeNode("and", (x, y), out, backward_fn)


def fuzzy_or(x: Operand, y: Operand) -> ComputeNode:
    """Probabilistic sum ``x + y - x*y``."""
    x, y = _as_node(x), _as_node(y)
    _check_truth(x, y)
    # rounding can leave the sum one ulp above 1
    out = np.clip(x.value + y.value - x.value * y.value, 0.0, 1.0)

    def backward_fn(g):
        return [
            _unbroadcast(g * (1.0 - y.value), x.shape),
            _unbroadcast(g * (1.0 - x.value), y.shape),
        ]

    return ComputeNode("or", (x, y), out, backward_fn)


def fuzzy_implies(x: Operand, y: Operand) -> ComputeNode:
    """Reichenbach implication ``1 - x + x*y``, evaluated as ``1 - x(1-y)``."""
    x, y = _as_node(x), _as_node(y)
    _check_truth(x, y)
    out = 1.0 - x.value * (1.0 - y.value)

    def backward_fn(g):
        return [_unbroadcast(g * (y.value - 1.0), x.shape), _unbroadcast(g * x.value, y.shape)]

    return ComputeNode("implies", (x, y), out, backward_fn)


# ===== AGGREGATORS =====


def _pmean_error(op: str, x: ComputeNode, p: float) -> ComputeNode:
    v = x.value.ravel()
    n = v.size
    if n == 0:
        raise FuzzyDomainError("empty quantifier domain")
    if p < 1:
        raise FuzzyDomainError(f"aggregator exponent must be >= 1, got {p}")
    _check_truth(x)
    if n == 1:
        # 1 - |1 - v| is not bit-exact in floating point; the singleton is v.
        return ComputeNode(op, (x,), v[0], lambda g: [np.reshape(g, x.shape)])
    err = 1.0 - v
    mean = np.mean(err ** p)
    out = 1.0 - mean ** (1.0 / p)

    def backward_fn(g):
        if mean == 0.0:
            return [np.zeros_like(x.value)]
        local = mean ** (1.0 / p - 1.0) * err ** (p - 1.0) / n
        return [np.reshape(g * local, x.shape)]

    return ComputeNode(op, (x,), out, backward_fn)


def forall_aggregate(values: Operand, p: float = 2.0) -> ComputeNode:
    """
    Universal quantifier over every element of ``values``.

    ``1 - ((1/n) * sum((1 - a_i) ** p)) ** (1/p)``
    """
    return _pmean_error("forall-aggregate", _as_node(values), p)


def exists_aggregate(values: Operand, p: float = 2.0) -> ComputeNode:
    """Existential quantifier, the p-mean ``((1/n) * sum(a_i ** p)) ** (1/p)``."""
    x = _as_node(values)
    v = x.value.ravel()
    n = v.size
    if n == 0:
        raise FuzzyDomainError("empty quantifier domain")
    _check_truth(x)
    if n == 1:
        return ComputeNode("exists-aggregate", (x,), v[0], lambda g: [np.reshape(g, x.shape)])
    mean = np.mean(v ** p)
    out = mean ** (1.0 / p)

    def backward_fn(g):
        if mean == 0.0:
            return [np.zeros_like(x.value)]
        local = mean ** (1.0 / p - 1.0) * v ** (p - 1.0) / n
        return [np.reshape(g * local, x.shape)]

    return ComputeNode("exists-aggregate", (x,), out, backward_fn)


def sat_aggregate(axioms: Sequence[Operand], p: float = 2.0) -> ComputeNode:
    """Aggregates per-axiom truth values into one satisfaction level."""
    nodes = [_as_node(a) for a in axioms]
    if not nodes:
        raise FuzzyDomainError("empty quantifier domain")
    for node in nodes:
        if node.value.size != 1:
            raise FuzzyDomainError(f"axiom {node.describe()} is not a scalar")
    stacked = ComputeNode(
        "stack",
        nodes,
        np.array([n.item() for n in nodes]),
        lambda g: [np.reshape(g[i], nodes[i].shape) for i in range(len(nodes))],
    )
    return _pmean_error("sat-aggregate", stacked, p)


# ===== REVERSE MODE =====


def _topological_order(root: ComputeNode) -> List[ComputeNode]:
    order: List[ComputeNode] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in reversed(node.inputs):
            if id(child) not in visited:
                stack.append((child, False))
    return order


def backward(root: ComputeNode) -> Dict[ComputeNode, np.ndarray]:
    """
    Reverse-mode accumulation from a scalar ``root``.

    Returns
    -------
    dict
        Maps every parameter node reachable from ``root`` to its adjoint
        ``d root / d parameter`` (same shape as the parameter).
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)

    for node in reversed(order):
        if node._backward_fn is None:
            continue
        input_grads = node._backward_fn(node.grad)
        for child, g in zip(node.inputs, input_grads):
            if g is None or child.op == "constant":
                continue
            g = np.asarray(g, dtype=np.float64)
            if np.isnan(g).any():
                raise NumericalError(f"NaN in adjoint flowing from {node.describe()} into {child.describe()}")
            child.grad = child.grad + np.reshape(g, child.grad.shape)

    return {node: node.grad.copy() for node in order if node.op == "parameter"}
