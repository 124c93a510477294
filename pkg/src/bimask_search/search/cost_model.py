import logging
from dataclasses import dataclass, field

import numpy as np

from bimask_search.engine import MacCounter, Tensor
from bimask_search.engine import functional as F

logger = logging.getLogger(__name__)


class CalibrationError(Exception):
    """The closed-form cost polynomial disagrees with the instrumented counter"""


@dataclass
class CostCoefficients:
    """
    Toy-ViT multiply-accumulates as a polynomial in kept-unit counts

    Every term is (coefficient, sites): its contribution is the coefficient
    times the product of the kept units of the listed sites. Unit counts
    are channels for patch-embed and MLP, per-head channel slots for
    Q-K-V and heads for head-count.
    """
    terms: list
    full_widths: dict
    full_flops: int = 0
    calibrated: bool = False
    checked_settings: list = field(default_factory=list)


def full_widths(model_config):
    widths = {"patch_embed": model_config.embed_dim}
    for layer in range(model_config.depth):
        widths[f"blocks.{layer}.qkv"] = model_config.head_dim
        widths[f"blocks.{layer}.heads"] = model_config.heads
        widths[f"blocks.{layer}.mlp"] = model_config.mlp_dim
    return widths


def cost_terms(model_config):
    """
    Closed-form MAC count per image

    Patch embedding N·P·C, per layer Q-K-V and output projections
    4·N·C·h·d, attention scores and context 2·N²·h·d, MLP 2·N·C·f, and
    the classifier K·C. The reconstruction decoder is not counted.
    """
    n = model_config.n_patches
    pe = "patch_embed"
    terms = [(n * model_config.patch_pixels, (pe,))]
    for layer in range(model_config.depth):
        qkv, heads, mlp = (f"blocks.{layer}.{s}" for s in ("qkv", "heads", "mlp"))
        terms.append((4 * n, (pe, heads, qkv)))
        terms.append((2 * n * n, (heads, qkv)))
        terms.append((2 * n, (pe, mlp)))
    terms.append((model_config.classes, (pe,)))
    return terms


def flops_at(coeffs, widths):
    """Evaluate the polynomial at integer unit counts"""
    return int(sum(coef * int(np.prod([widths[s] for s in sites])) for coef, sites in coeffs.terms))


def param_count(model_config, widths):
    """Parameters of the dense model at the given widths; masks, mask token and decoder excluded"""
    n = model_config.n_patches
    c = widths["patch_embed"]
    total = model_config.patch_pixels * c + c + n * c
    for layer in range(model_config.depth):
        hd = widths[f"blocks.{layer}.heads"] * widths[f"blocks.{layer}.qkv"]
        f = widths[f"blocks.{layer}.mlp"]
        total += 3 * (c * hd + hd) + hd * c + c
        total += c * f + f + f * c + c
    total += c * model_config.classes + model_config.classes
    return int(total)


def widths_from_export(export):
    return {entry["site"]: len(entry["kept_units"]) for entry in export["submodules"]}


def _count_model_macs(model, model_config):
    patches = np.zeros((1, model_config.n_patches, model_config.patch_pixels))
    with MacCounter() as counter:
        model.forward(patches)
    return counter.macs


def _calibration_settings(model_config):
    full = full_widths(model_config)
    half_pe = dict(full, patch_embed=max(full["patch_embed"] // 2, 1))
    one_head = dict(full)
    minimal = dict(full)
    half_mlp = dict(full)
    for layer in range(model_config.depth):
        one_head[f"blocks.{layer}.heads"] = max(model_config.heads - 1, 1)
        half_mlp[f"blocks.{layer}.mlp"] = max(model_config.mlp_dim // 2, 1)
        for site in (f"blocks.{layer}.qkv", f"blocks.{layer}.heads", f"blocks.{layer}.mlp"):
            minimal[site] = 1
    minimal["patch_embed"] = 1
    mixed = dict(full)
    mixed["patch_embed"] = max(full["patch_embed"] - 3, 1)
    mixed["blocks.0.qkv"] = max(model_config.head_dim - 2, 1)
    mixed[f"blocks.{model_config.depth - 1}.mlp"] = max(model_config.mlp_dim // 4, 1)
    return [("full", full), ("half-patch-embed", half_pe), ("one-head-pruned", one_head),
            ("minimal", minimal), ("half-mlp", half_mlp), ("mixed", mixed)]


def calibrate(model_config, seed=0):
    """
    Build the cost polynomial and validate it against counted forwards

    Args:
        model_config: ToyViTConfig
        seed: Seed for the throwaway weights of the instrumented model

    Returns:
        CostCoefficients: Calibrated coefficients

    Raises:
        CalibrationError: Any setting where polynomial and counter differ
    """
    from bimask_search.models.vit import ToyViT, materialize_widths

    coeffs = CostCoefficients(terms=cost_terms(model_config), full_widths=full_widths(model_config))
    if any(coef < 0 for coef, _ in coeffs.terms):
        raise CalibrationError("negative cost coefficient")

    supernet = ToyViT(model_config, seed=seed)
    for name, widths in _calibration_settings(model_config):
        counted = _count_model_macs(materialize_widths(widths, supernet), model_config)
        predicted = flops_at(coeffs, widths)
        if counted != predicted:
            raise CalibrationError(f"setting {name} {widths}: counter {counted} != polynomial {predicted}")
        coeffs.checked_settings.append(name)

    coeffs.full_flops = flops_at(coeffs, coeffs.full_widths)
    coeffs.calibrated = True
    logger.info(f"Cost model calibrated: {coeffs.full_flops} MACs at full width, "
                f"{len(coeffs.checked_settings)} settings validated")
    return coeffs


def expected_width(state):
    """Expected kept units Σ_k grid_k·p_k, equal to the sum of the unit sparsity scores"""
    p = F.softmax(state.alpha)
    return (p * Tensor(np.asarray(state.live_grid, dtype=np.float64))).sum()


def g_of_V(space, coeffs):
    """Expected compute as a fraction of the full model (differentiable in every α)"""
    if not coeffs.calibrated:
        raise CalibrationError("cost coefficients are not calibrated")
    widths = {state.spec.site: expected_width(state) for state in space}
    total = Tensor(0.0)
    for coef, sites in coeffs.terms:
        term = widths[sites[0]]
        for site in sites[1:]:
            term = term * widths[site]
        total = total + term * float(coef)
    return total / float(coeffs.full_flops)


def discrete_cost(export, model_config, coeffs=None):
    """
    Exact MACs and parameters of a pruned architecture

    Returns:
        tuple: (flops, params)
    """
    coeffs = coeffs or CostCoefficients(terms=cost_terms(model_config), full_widths=full_widths(model_config))
    widths = widths_from_export(export)
    return flops_at(coeffs, widths), param_count(model_config, widths)


def widths_report(model_config, widths):
    """{flops, params, flops_fraction, params_fraction} at the given unit counts"""
    coeffs = CostCoefficients(terms=cost_terms(model_config), full_widths=full_widths(model_config))
    flops = flops_at(coeffs, widths)
    params = param_count(model_config, widths)
    return {
        "flops": flops,
        "params": params,
        "flops_fraction": flops / flops_at(coeffs, coeffs.full_widths),
        "params_fraction": params / param_count(model_config, coeffs.full_widths),
    }


def cost_report(export, model_config):
    """Cost report of an architecture document"""
    return widths_report(model_config, widths_from_export(export))
