import logging
import math
from dataclasses import dataclass

import numpy as np

from bimask_search.engine import Tensor, as_tensor
from bimask_search.engine import functional as F
from bimask_search.search.bimask import importance_scores

logger = logging.getLogger(__name__)

OMEGA_EPS = 1e-3
SIMPLEX_TOL = 1e-9


@dataclass
class VarianceTarget:
    """Variance of a one-hot vector over the live steps"""
    D_live: int

    @property
    def sigma_target(self):
        return (self.D_live - 1) / (self.D_live * self.D_live)

    @classmethod
    def from_state(cls, state):
        return cls(state.D_live)


def _check_simplex(p, name):
    values = p.data
    if np.any(values < -SIMPLEX_TOL) or abs(values.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name}: input is not on the probability simplex (min={values.min():.3g}, sum={values.sum():.12g})")


def entropy(p):
    """
    Shannon entropy -Σ p log p with 0·log 0 = 0

    Args:
        p: Probability vector (Tensor)

    Returns:
        Tensor: Scalar in [0, log D]
    """
    p = as_tensor(p)
    _check_simplex(p, "entropy")
    return -F.entropy_terms(p).sum()


def variance(p):
    """σ(p) = Σ (p_k − 1/D)² / D"""
    p = as_tensor(p)
    d = p.size
    return ((p - 1.0 / d) ** 2).sum() / d


def variance_term(p, target, state=None):
    """
    Tangent-activated normalized variance Ψ = tan(π/2 − π·ω)

    ω = σ(p)/σᵗ is clamped to [1e-3, 1 − 1e-3] in the forward pass only;
    the gradient passes the clamp straight through, so a near-uniform p
    still feels the one-hot pull. A submodule with one live step
    contributes 0.

    Args:
        p: Probability vector over the live steps
        target: VarianceTarget for the same D_live
        state: Optional SubmoduleState whose decided flag is refreshed
            (set once ω reaches the upper clamp or one step is left)
    """
    p = as_tensor(p)
    if target.D_live <= 1:
        if state is not None:
            state.decided = True
        return Tensor(0.0)
    if p.size != target.D_live:
        raise ValueError(f"variance_term: p has {p.size} entries, target expects {target.D_live}")
    omega = variance(p) / target.sigma_target
    if state is not None:
        state.decided = bool(omega.item() >= 1.0 - OMEGA_EPS)
    omega = F.clip(omega, OMEGA_EPS, 1.0 - OMEGA_EPS, straight_through=True)
    return F.tan(math.pi / 2 - omega * math.pi)


def variance_identity_check(p):
    """|((D−1)/D² − σ(p)) − (1 − Σp²)/D|"""
    values = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    d = values.size
    sigma = np.sum((values - 1.0 / d) ** 2) / d
    left = (d - 1) / (d * d) - sigma
    right = (1.0 - np.sum(values * values)) / d
    return float(abs(left - right))


def importance_penalty(S_all):
    """ℓ1 norm of every live importance score (scores are positive)"""
    total = Tensor(0.0)
    for S in S_all:
        if S.size:
            total = total + S.sum()
    return total


def budget_penalty(g, tau):
    """|g(V) − τ|"""
    return F.absolute(as_tensor(g) - tau)


def total_mask_loss(space, weights, tau, coeffs):
    """
    Mask regularization L_m over the whole search space

    L_m = μ1·Σ[H(p)+Ψ(p)] + μ2·|g(V) − τ| + μ3·‖S‖₁. The use_* switches in
    weights drop individual terms.

    Returns:
        tuple: (L_m Tensor, dict of float parts, g Tensor)
    """
    from bimask_search.search.cost_model import g_of_V

    h_total = Tensor(0.0)
    psi_total = Tensor(0.0)
    for state in space:
        p = F.softmax(state.alpha)
        if weights.use_entropy:
            h_total = h_total + entropy(p)
        if weights.use_variance:
            psi_total = psi_total + variance_term(p, VarianceTarget.from_state(state), state)

    g = g_of_V(space, coeffs)
    budget = budget_penalty(g, tau)
    l1 = importance_penalty([importance_scores(s) for s in space]) if weights.use_importance else Tensor(0.0)

    loss = (h_total + psi_total) * weights.mu1 + budget * weights.mu2 + l1 * weights.mu3
    parts = {
        "entropy": h_total.item(),
        "psi": psi_total.item(),
        "budget": budget.item(),
        "l1": l1.item(),
        "g": g.item(),
        "L_m": loss.item(),
        "decided": sum(1 for state in space if state.decided),
    }
    return loss, parts, g


def _propositions(p):
    d = p.size
    h = entropy(Tensor(p)).item()
    sigma = variance(Tensor(p)).item()
    target = (d - 1) / (d * d)
    return h, sigma, target


def theorem_suite(n_samples=1000, dims=(2, 4, 8, 16), seed=0):
    """
    Check the entropy / max-probability / variance equivalence numerically

    Samples Dirichlet(1) points for every dimension in dims and adds every
    one-hot vector for D in 2..8 plus the uniform vectors. For each point
    the three statements H(p) < 1e-6, max(p) > 1 − 1e-4 and
    |σ(p) − σᵗ| < 1e-8 must agree, the entropy and variance bounds must
    hold and the variance identity residual must stay below 1e-12.

    Points with 0 < 1 − max(p) < 1e-4 sit between the three thresholds and
    are counted as ambiguous rather than checked.

    Returns:
        dict: Machine-readable report with a "violations" list
    """
    if n_samples < 1000:
        raise ValueError(f"theorem_suite needs at least 1000 samples, got {n_samples}")
    rng = np.random.default_rng(seed)

    points = []
    for d in range(2, 9):
        for k in range(d):
            points.append(("one-hot", np.eye(d)[k]))
    for d in sorted(set(dims) | set(range(2, 9))):
        points.append(("uniform", np.full(d, 1.0 / d)))
    for d in dims:
        for sample in rng.dirichlet(np.ones(d), size=n_samples):
            points.append(("dirichlet", sample))

    violations = []
    ambiguous = 0
    max_residual = 0.0
    for index, (kind, p) in enumerate(points):
        d = p.size
        h, sigma, target = _propositions(p)
        gap = 1.0 - p.max()
        statements = (h < 1e-6, gap < 1e-4, abs(sigma - target) < 1e-8)
        if 0.0 < gap < 1e-4:
            ambiguous += 1
        elif len(set(statements)) != 1:
            violations.append({"index": index, "kind": kind, "D": d, "check": "equivalence",
                               "entropy": h, "max_p": float(p.max()), "variance": sigma})
        if not (-1e-10 <= h <= math.log(d) + 1e-10):
            violations.append({"index": index, "kind": kind, "D": d, "check": "entropy-bound", "entropy": h})
        if not (0.0 <= sigma <= target + 1e-15):
            violations.append({"index": index, "kind": kind, "D": d, "check": "variance-bound", "variance": sigma})
        residual = variance_identity_check(p)
        max_residual = max(max_residual, residual)
        if residual >= 1e-12:
            violations.append({"index": index, "kind": kind, "D": d, "check": "identity", "residual": residual})

    report = {
        "samples": len(points),
        "dims": list(dims),
        "ambiguous": ambiguous,
        "max_identity_residual": max_residual,
        "violations": violations,
        "passed": not violations,
    }
    logger.info(f"Theorem suite: {len(points)} points, {len(violations)} violations, {ambiguous} ambiguous")
    return report
