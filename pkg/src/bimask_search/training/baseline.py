"""
Two-stage comparison scheme: learn unit importance, then prune everything
below one global threshold until the compute budget holds.
"""
import logging

import numpy as np
from tqdm import tqdm

from bimask_search.engine import NonFiniteError
from bimask_search.engine import functional as F
from bimask_search.engine.optim import Adam
from bimask_search.models.vit import materialize_architecture, patchify
from bimask_search.search.bimask import compute_bimasks, importance_scores
from bimask_search.search.cost_model import cost_report
from bimask_search.search.regularizers import importance_penalty
from bimask_search.search.space import build_space, build_specs
from bimask_search.training.trainer import DivergenceError, iterate_batches

logger = logging.getLogger(__name__)


def learn_importance(config, model, data):
    """
    Stage one: train weights and importance scores with m = S

    The loss is cross-entropy plus μ3·‖S‖₁. With zero baseline epochs the
    magnitude scores are used instead.

    Returns:
        dict: site -> importance score per unit, values in (0, 1]
    """
    tc = config.trainer
    if tc.baseline_epochs <= 0:
        logger.info("No importance-learning epochs; falling back to weight magnitudes")
        return magnitude_scores(model)

    space = build_space(config.model, config.space, seed=tc.seed, alpha_init=tc.alpha_init, init_std=tc.init_std)
    patches = patchify(data.train_images, config.model.patch_size)
    labels = data.train_labels
    rng = np.random.default_rng(tc.seed)
    main_opt = Adam(model.parameters(include_decoder=False), lr=tc.lr_main, weight_decay=tc.weight_decay)
    score_opt = Adam([s.importance for s in space], lr=tc.lr_score, betas=(tc.beta1_score, 0.999))
    snapshot = model.state_dict()
    step = 0
    for _ in tqdm(range(tc.baseline_epochs), desc="importance", leave=False):
        for idx in iterate_batches(len(labels), tc.batch_size, rng):
            try:
                output = model.forward(patches[idx], compute_bimasks(space, 1.0))
                l1 = importance_penalty([importance_scores(s) for s in space])
                loss = F.cross_entropy(output.logits, labels[idx]) + l1 * config.regularizers.mu3
                main_opt.zero_grad()
                score_opt.zero_grad()
                loss.backward()
                main_opt.step()
                score_opt.step()
            except NonFiniteError as e:
                raise DivergenceError(str(e), step, snapshot) from e
            step += 1
        snapshot = model.state_dict()
    return {s.spec.site: importance_scores(s).data.copy() for s in space}


def magnitude_scores(model):
    """Per-unit weight norms, scaled by the largest norm of each site"""
    config = model.config
    hd = config.head_dim
    scores = {"patch_embed": np.linalg.norm(model["patch_embed.weight"].data, axis=0)}
    for layer in range(config.depth):
        prefix = f"blocks.{layer}"
        qkv = np.concatenate([model[f"{prefix}.attn.{n}.weight"].data for n in ("q", "k", "v")], axis=0)
        per_head = qkv.reshape(qkv.shape[0], config.heads, hd)
        scores[f"{prefix}.qkv"] = np.sqrt(np.sum(per_head ** 2, axis=(0, 1)))
        scores[f"{prefix}.heads"] = np.sqrt(np.sum(per_head ** 2, axis=(0, 2)))
        scores[f"{prefix}.mlp"] = np.linalg.norm(model[f"{prefix}.mlp.fc1.weight"].data, axis=0)
    return {site: values / max(values.max(), 1e-12) for site, values in scores.items()}


def threshold_architecture(specs, scores, theta):
    """
    Keep units scoring above theta, rounded up to the next grid width

    Returns:
        dict: Architecture document
    """
    submodules = []
    for spec in specs:
        values = np.asarray(scores[spec.site])
        count = int(np.sum(values > theta))
        width = next((g for g in spec.grid if g >= count), spec.grid[-1])
        order = np.argsort(-values, kind="stable")
        submodules.append({
            "kind": spec.kind,
            "layer": spec.layer_index,
            "site": spec.site,
            "kept_units": sorted(int(u) for u in order[:width]),
            "kept_steps": spec.grid.index(width) + 1,
            "full_width": spec.full_width,
            "unit_size": spec.unit_size,
        })
    return {"submodules": submodules}


def baseline_threshold_prune(config, scores, tau):
    """
    Stage two: bisect a global threshold so the discrete cost fits tau

    Candidate thresholds are the distinct scores themselves; the kept cost
    is non-increasing in the threshold, so the smallest feasible candidate
    is found by binary search.

    Returns:
        tuple: (architecture document, info dict with threshold and reachability)
    """
    specs = build_specs(config.model, config.space)
    candidates = np.unique(np.concatenate([np.asarray(v) for v in scores.values()]))
    candidates = np.concatenate([[-np.inf], candidates])

    def fraction(theta):
        return cost_report(threshold_architecture(specs, scores, theta), config.model)["flops_fraction"]

    lo, hi = 0, len(candidates) - 1
    reachable = fraction(candidates[hi]) <= tau
    if not reachable:
        logger.warning(f"Budget tau={tau} is below the smallest grid architecture; exporting the minimum")
        chosen = hi
    else:
        while lo < hi:
            mid = (lo + hi) // 2
            if fraction(candidates[mid]) <= tau:
                hi = mid
            else:
                lo = mid + 1
        chosen = lo
    theta = float(candidates[chosen])
    export = threshold_architecture(specs, scores, theta)
    report = cost_report(export, config.model)
    logger.info(f"Global threshold {theta:.4g}: flops fraction {report['flops_fraction']:.4f} (tau={tau})")
    return export, {"threshold": theta if np.isfinite(theta) else None, "reachable": reachable, "cost": report}


def run_baseline(config, model, data):
    """
    Learn importance, prune at a global threshold and materialize

    Returns:
        tuple: (pruned ToyViT, architecture document, info dict)
    """
    scores = learn_importance(config, model, data)
    export, info = baseline_threshold_prune(config, scores, config.trainer.tau)
    return materialize_architecture(export, model), export, info
