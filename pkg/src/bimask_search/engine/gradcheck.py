import logging

import numpy as np

from bimask_search.engine.tensor import EngineError, NonFiniteError, Tensor

logger = logging.getLogger(__name__)

# Keeps 0/0 at zero when both gradients vanish exactly
DENOM_EPS = 1e-12


class GradientCheckError(EngineError):
    """Raised when the checked function is not finite near the check point"""


def _evaluate(f, values):
    try:
        out = f(Tensor(values))
    except NonFiniteError as e:
        raise GradientCheckError(f"function is not finite at perturbed point: {e}") from e
    value = float(np.asarray(out.data).reshape(-1)[0]) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise GradientCheckError(f"function is not finite at perturbed point (value={value})")
    return value


def numerical_gradient(f, theta, h=1e-5):
    """
    Central-difference gradient of a scalar function

    Args:
        f: Callable taking a Tensor shaped like theta and returning a scalar Tensor
        theta: Point to differentiate at (array-like)
        h: Step size

    Returns:
        np.ndarray: Gradient estimate, same shape as theta
    """
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2.0 * h)
    return grad


def analytic_gradient(f, theta):
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise GradientCheckError("function is not finite at the check point")
    out.backward()
    return np.zeros_like(base) if leaf.grad is None else leaf.grad


def gradient_check(f, theta, h=1e-5):
    """
    Compare the engine's gradient with central differences

    Args:
        f: Scalar-valued function of one Tensor
        theta: Point to differentiate at
        h: Finite-difference step, within [1e-6, 1e-4]

    Returns:
        float: max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    analytic = analytic_gradient(f, theta)
    numeric = numerical_gradient(f, theta, h)
    if analytic.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + DENOM_EPS)
    worst = float(rel.max())
    logger.debug(f"gradient check: max relative error {worst:.3e} over {analytic.size} coordinates")
    return worst
