import logging
from dataclasses import dataclass, field

import numpy as np

from bimask_search.engine import Tensor
from bimask_search.engine import functional as F

logger = logging.getLogger(__name__)


class LambdaSchedule:
    """
    Weight of the importance score, λ(t) = 1 - t/T clamped to [0, 1]

    Once the search finishes λ is pinned to 0.
    """

    def __init__(self, total_steps):
        if total_steps <= 0:
            raise ValueError(f"total_steps must be positive, got {total_steps}")
        self.total_steps = int(total_steps)
        self.current_step = 0
        self.finish_step = None

    def value(self, t=None):
        t = self.current_step if t is None else t
        if self.finish_step is not None and t >= self.finish_step:
            return 0.0
        return float(min(max(1.0 - t / self.total_steps, 0.0), 1.0))

    def advance(self):
        self.current_step += 1
        return self.value()

    def finish(self, t=None):
        self.finish_step = self.current_step if t is None else t


@dataclass
class BiMaskSnapshot:
    """
    Blended prunability scores for every site

    masks[site] is a full-length Tensor in original unit order (pruned
    units hold 0). channel_indicator marks the patch-embedding channels
    that layer normalization treats as present.
    """
    masks: dict
    permutations: dict = field(default_factory=dict)
    channel_indicator: np.ndarray = None
    importance: dict = field(default_factory=dict)
    sparsity: dict = field(default_factory=dict)


def rank_permutation(S):
    """Positions sorted by descending score; ties keep ascending index"""
    values = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    return np.argsort(-values, kind="stable")


def unit_order(state, sharing="bimask"):
    """Live-unit positions from highest to lowest keep priority"""
    if sharing == "ordinal":
        return np.arange(state.W_live)
    return rank_permutation(state.importance.data)


def importance_scores(state):
    """S = sigmoid(importance logits), one per live unit"""
    return F.sigmoid(state.importance)


def _rank_to_step(live_grid, n_units):
    """0-based step index of every 1-based rank position"""
    ranks = np.arange(1, n_units + 1)
    return np.searchsorted(np.asarray(live_grid), ranks, side="left")


def sparsity_scores(state):
    """
    V in rank order: the rank-j unit receives the mass of every step from its own upward

    V(j) = Σ_{k ≥ s(j)} p_k with p = softmax(α) over the live steps and
    s(j) the first live step whose width covers rank j.
    """
    tail = F.reverse_cumsum(F.softmax(state.alpha))
    return F.take(tail, _rank_to_step(state.live_grid, state.W_live))


def assign_sparsity(V_ranked, permutation):
    """Move rank-ordered V onto live-unit order: unit permutation[r] gets V_ranked[r]"""
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(permutation.size)
    return F.take(V_ranked, inverse)


def blend(S, V, lam):
    """m = λ·S + (1 − λ)·V, elementwise"""
    if S.shape != V.shape:
        raise ValueError(f"blend: importance {S.shape} and sparsity {V.shape} differ in length")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend: λ={lam} outside [0, 1]")
    return S * lam + V * (1.0 - lam)


def compute_bimasks(space, lam):
    """
    Differentiable bi-masks for every submodule at weight λ

    Returns:
        BiMaskSnapshot: Full-length masks keyed by site
    """
    masks, perms, importance, sparsity = {}, {}, {}, {}
    for state in space:
        perm = unit_order(state, space.sharing)
        S = importance_scores(state)
        V = assign_sparsity(sparsity_scores(state), perm)
        m = blend(S, V, lam)
        site = state.spec.site
        masks[site] = F.scatter(m, state.live_unit_ids, state.spec.n_units)
        perms[site] = perm
        importance[site] = S
        sparsity[site] = V
    pe = next(s for s in space if s.spec.site == "patch_embed")
    indicator = np.zeros(pe.spec.n_units)
    indicator[pe.live_unit_ids] = 1.0
    return BiMaskSnapshot(masks, perms, indicator, importance, sparsity)


def kept_unit_ids(state, sharing="bimask"):
    """Units kept when the submodule is hardened at its most probable step"""
    width = state.live_grid[int(np.argmax(state.probabilities()))]
    order = unit_order(state, sharing)
    return np.sort(state.live_unit_ids[order[:width]])


def harden(space):
    """
    0/1 masks keeping the top-ranked units of the most probable step

    Layer normalization uses the hardened patch-embedding mask as its
    channel indicator, so hardened masks behave exactly like deletion.
    """
    masks = {}
    indicator = None
    for state in space:
        values = np.zeros(state.spec.n_units)
        values[kept_unit_ids(state, space.sharing)] = 1.0
        masks[state.spec.site] = Tensor(values)
        if state.spec.site == "patch_embed":
            indicator = values.copy()
    return BiMaskSnapshot(masks, channel_indicator=indicator)


def full_masks(model_config):
    """All-ones masks, the identity snapshot for an unpruned supernet"""
    masks = {"patch_embed": Tensor(np.ones(model_config.embed_dim))}
    for layer in range(model_config.depth):
        masks[f"blocks.{layer}.qkv"] = Tensor(np.ones(model_config.head_dim))
        masks[f"blocks.{layer}.heads"] = Tensor(np.ones(model_config.heads))
        masks[f"blocks.{layer}.mlp"] = Tensor(np.ones(model_config.mlp_dim))
    return BiMaskSnapshot(masks, channel_indicator=np.ones(model_config.embed_dim))


def hardened_architecture(space):
    """Architecture document of the hardened masks, in export_architecture's layout"""
    return {
        "submodules": [
            {
                "kind": s.spec.kind,
                "layer": s.spec.layer_index,
                "site": s.spec.site,
                "kept_units": [int(u) for u in kept_unit_ids(s, space.sharing)],
                "kept_steps": int(np.argmax(s.probabilities())) + 1,
                "full_width": s.spec.full_width,
                "unit_size": s.spec.unit_size,
            }
            for s in space
        ]
    }


def trajectory_snapshot(space, snapshot):
    """
    Per-site scores in descending-importance rank order

    Returns:
        dict: site -> {"p", "S", "V", "m"} lists plus the decided flag, ready for the search log
    """
    rows = {}
    for state in space:
        site = state.spec.site
        perm = snapshot.permutations[site]
        m_live = snapshot.masks[site].data[state.live_unit_ids]
        rows[site] = {
            "p": state.probabilities().tolist(),
            "S": snapshot.importance[site].data[perm].tolist(),
            "V": snapshot.sparsity[site].data[perm].tolist(),
            "m": m_live[perm].tolist(),
            "decided": bool(state.decided),
        }
    return rows
