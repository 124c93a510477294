"""
Network primitives on top of the core tensor arithmetic.

Every function validates operand shapes, computes its output with numpy and
registers a closed-form backward rule.
"""
import math

import numpy as np

from bimask_search.engine.tensor import (
    EPS,
    ShapeError,
    Tensor,
    as_tensor,
    broadcast_shape,
    make_node,
    unbroadcast,
)

GELU_C = math.sqrt(2.0 / math.pi)


def sigmoid(x):
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), "sigmoid", backward)


def tan(x):
    x = as_tensor(x)
    out = np.tan(x.data)

    def backward(g):
        return (g * (1.0 + out * out),)

    return make_node(out, (x,), "tan", backward)


def absolute(x):
    """|x| with subgradient 0 at the origin"""
    x = as_tensor(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return make_node(np.abs(x.data), (x,), "abs", backward)


def clip(x, lo, hi, straight_through=False):
    """
    Clamp to [lo, hi]

    The gradient vanishes outside the open interval unless straight_through
    is set, in which case it passes unchanged everywhere.
    """
    x = as_tensor(x)
    inside = np.ones(x.shape) if straight_through else (x.data > lo) & (x.data < hi)

    def backward(g):
        return (g * inside,)

    return make_node(np.clip(x.data, lo, hi), (x,), "clip", backward)


def gelu(x):
    """GELU, tanh approximation"""
    x = as_tensor(x)
    inner = GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return make_node(out, (x,), "gelu", backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_node(out, (x,), "softmax", backward)


def layer_norm(x, channel_mask=None, eps=1e-6):
    """
    Normalize over the last axis without affine parameters

    Args:
        x: Input tensor [..., C]
        channel_mask: Optional constant 0/1 array of length C. Statistics are
            taken over the active channels only and inactive channels come
            out as exactly zero.
        eps: Variance floor

    Returns:
        Tensor: Normalized tensor, same shape as x
    """
    x = as_tensor(x)
    width = x.shape[-1]
    if channel_mask is None:
        c = np.ones(width)
    else:
        c = np.asarray(channel_mask, dtype=np.float64)
        if c.shape != (width,):
            raise ShapeError("layer_norm", x.shape, c.shape)
    n = max(float(c.sum()), 1.0)
    mu = np.sum(x.data * c, axis=-1, keepdims=True) / n
    xc = (x.data - mu) * c
    var = np.sum(xc * xc, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gc = g * c
        mean_g = np.sum(gc, axis=-1, keepdims=True) / n
        mean_gy = np.sum(gc * y, axis=-1, keepdims=True) / n
        return (inv * (gc - c * mean_g - y * mean_gy),)

    return make_node(y, (x,), "layer_norm", backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of logits [B, K] against integer labels [B]"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    batch = logits.shape[0]
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -np.mean(log_p[np.arange(batch), labels])

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(batch), labels] -= 1.0
        return (g * grad / batch,)

    return make_node(loss, (logits,), "cross_entropy", backward)


def l1_loss(pred, target):
    """Mean absolute error between pred and a constant target"""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("l1_loss", pred.shape, target.shape)
    diff = pred.data - target
    count = max(diff.size, 1)

    def backward(g):
        return (g * np.sign(diff) / count,)

    return make_node(np.sum(np.abs(diff)) / count, (pred,), "l1_loss", backward)


def take(x, index, axis=0):
    """Gather entries of x along axis (constant integer index)"""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise ShapeError("take", x.shape, index.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (index,), g)
        return (gx,)

    return make_node(np.take(x.data, index, axis=axis), (x,), "take", backward)


def scatter(x, index, size):
    """Place the entries of 1-D x at positions index of a zero vector of length size"""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 1 or index.shape != x.shape or len(set(index.tolist())) != index.size:
        raise ShapeError("scatter", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter", x.shape, (size,))
    out = np.zeros(size)
    out[index] = x.data

    def backward(g):
        return (g[index],)

    return make_node(out, (x,), "scatter", backward)


def where(condition, a, b):
    """Select a where condition holds, else b (condition is a constant boolean array)"""
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    shape = broadcast_shape("where", a, b)
    try:
        shape = np.broadcast_shapes(shape, condition.shape)
    except ValueError:
        raise ShapeError("where", condition.shape, a.shape, b.shape) from None

    def backward(g):
        return (unbroadcast(np.where(condition, g, 0.0), a.shape),
                unbroadcast(np.where(condition, 0.0, g), b.shape))

    return make_node(np.where(condition, a.data, b.data), (a, b), "where", backward)


def entropy_terms(p, eps=EPS):
    """Elementwise p*log(p + eps); zero entries contribute exactly 0"""
    p = as_tensor(p)
    return p * p.log(eps)


def reverse_cumsum(x):
    """out[k] = sum of x[k:] along a 1-D tensor"""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("reverse_cumsum", x.shape)

    def backward(g):
        return (np.cumsum(g),)

    return make_node(np.cumsum(x.data[::-1])[::-1], (x,), "reverse_cumsum", backward)
