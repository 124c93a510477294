import itertools
import logging

import numpy as np

logger = logging.getLogger(__name__)

# Additive floor used by guarded log/division so that p*log(p) -> 0 at p = 0
EPS = 1e-12

_node_ids = itertools.count()


class EngineError(Exception):
    """Base class for errors raised by the differentiation engine"""


class ShapeError(EngineError):
    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible operand shapes {', '.join(str(s) for s in self.shapes)}")


class NonFiniteError(EngineError):
    def __init__(self, primitive, node_id):
        self.primitive = primitive
        self.node_id = node_id
        super().__init__(f"{primitive}: non-finite output at node {node_id}")


class GraphError(EngineError):
    """Raised when backward is misused (non-scalar loss, released graph)"""


def as_tensor(value):
    """Wrap a python scalar or array as a constant tensor"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_node(data, parents, primitive, backward):
    """
    Create the output tensor of a primitive and register its backward rule

    Args:
        data: Output values
        parents: Operand tensors, in the order backward returns gradients
        primitive: Primitive name, used in error messages
        backward: Callable mapping the output gradient to a tuple of
            operand gradients (None where an operand needs no gradient)

    Returns:
        Tensor: The output node
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = primitive
    out._released = False
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(primitive, out.node_id)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum a gradient back down to an operand shape after trailing expansion"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(primitive, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


class Tensor:
    """
    Dense float64 array with an attached gradient slot

    Leaf tensors created with requires_grad=True receive dLoss/dTensor in
    .grad after backward(); intermediate nodes only carry the graph.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._released = False
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("leaf", self.node_id)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- graph traversal -------------------------------------------------

    def _topological_order(self):
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self):
        """
        Propagate d(self)/d(leaf) into every reachable leaf's .grad

        The graph is released afterwards; calling backward on the same
        loss again raises GraphError.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError(f"backward already ran through node {self.node_id}; rebuild the graph first")
        if not self.requires_grad:
            self._released = True
            return

        order = self._topological_order()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self._released = True

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self, eps=EPS):
        return log(self, eps)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    """Unguarded division; the divisor must avoid zero (see safe_div)"""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(out, (a, b), "div", backward)


def safe_div(a, b, eps=EPS):
    """Division with the divisor floored additively by eps"""
    return div(a, add(b, eps))


def power(x, exponent):
    x = as_tensor(x)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return make_node(np.power(x.data, exponent), (x,), "pow", backward)


def matmul(a, b):
    """
    Batched matrix product a[..., m, k] @ b[..., k, n]

    b may carry fewer leading dimensions than a (shared weights); its
    gradient is summed over the expanded leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = np.matmul(a.data, b.data)
    _count_macs(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), "matmul", backward)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return make_node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.size(out), 1)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return make_node(out, (x,), "mean", backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), "reshape", backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_node(np.transpose(x.data, axes), (x,), "transpose", backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), "exp", backward)


def log(x, eps=EPS):
    """Natural log of x + eps; x must be non-negative"""
    x = as_tensor(x)
    shifted = x.data + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(shifted)

    def backward(g):
        return (g / shifted,)

    return make_node(out, (x,), "log", backward)


# -- multiply-accumulate instrumentation ------------------------------------

_mac_counters = []


class MacCounter:
    """Counts multiply-accumulates issued by matmul while active"""

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        _mac_counters.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _mac_counters.remove(self)
        return False


def _count_macs(n):
    for counter in _mac_counters:
        counter.macs += int(n)
