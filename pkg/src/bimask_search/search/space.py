import logging
from dataclasses import dataclass, field

import numpy as np

from bimask_search.engine import Tensor
from bimask_search.search.bimask import unit_order

logger = logging.getLogger(__name__)

QKV = "qkv-channels"
MLP = "mlp-channels"
HEADS = "head-count"
PATCH_EMBED = "patch-embed-channels"
KINDS = (QKV, MLP, HEADS, PATCH_EMBED)


class SearchSpaceError(Exception):
    """Invalid search-space configuration or an illegal pruning request"""


def _is_integer(x):
    return abs(x - round(x)) < 1e-9


@dataclass(frozen=True)
class SubmoduleSpec:
    """
    One prunable site and its candidate width grid

    full_width counts model channels (heads for head-count). A mask unit
    stands for unit_size channels: for Q-K-V one unit is a per-head channel
    slot shared by every head, so unit_size equals the head count. grid
    lists the candidate kept-unit counts in ascending order.
    """
    kind: str
    layer_index: int
    full_width: int
    ratio_lo: float
    ratio_hi: float
    step_ratio: float
    unit_size: int = 1
    grid: tuple = ()

    @property
    def site(self):
        if self.kind == PATCH_EMBED:
            return "patch_embed"
        suffix = {QKV: "qkv", HEADS: "heads", MLP: "mlp"}[self.kind]
        return f"blocks.{self.layer_index}.{suffix}"

    @property
    def n_units(self):
        return self.full_width // self.unit_size

    @property
    def step(self):
        """Unit step Δ in width units (channels, or heads)"""
        return int(round(self.full_width * self.step_ratio))

    @property
    def candidates(self):
        return len(self.grid)

    def widths(self):
        """Candidate widths in model channels"""
        return tuple(g * self.unit_size for g in self.grid)


def channel_spec(kind, layer_index, full_width, lo, step, unit_size=1):
    """
    Build the grid for a channel-ratio submodule (lo, 1, step)

    Returns:
        tuple: (SubmoduleSpec or None, problem description or None)
    """
    n_units = full_width // unit_size
    site = SubmoduleSpec(kind, layer_index, full_width, lo, 1.0, step, unit_size).site
    if full_width % unit_size:
        return None, f"{site}: width {full_width} not divisible into {unit_size}-channel units"
    delta = full_width * step
    lo_units = n_units * lo
    count = (1.0 - lo) / step + 1
    if not (_is_integer(delta) and delta >= 1 and _is_integer(delta / unit_size)):
        return None, f"{site}: step {step} of width {full_width} is not a whole number of units"
    if not _is_integer(lo_units) or round(lo_units) < 1:
        return None, f"{site}: lower ratio {lo} of {n_units} units is not a whole number of units"
    if not _is_integer(count) or lo > 1.0:
        return None, f"{site}: ratios ({lo}, 1, {step}) do not form a whole number of steps"
    unit_step = int(round(delta)) // unit_size
    grid = tuple(int(round(lo_units)) + k * unit_step for k in range(int(round(count))))
    return SubmoduleSpec(kind, layer_index, full_width, lo, 1.0, step, unit_size, grid), None


def head_spec(layer_index, num_heads, lo, step):
    """Head-count grid from (lo, num_heads, step), closed by num_heads itself"""
    site = f"blocks.{layer_index}.heads"
    if lo < 1 or lo > num_heads or step < 1:
        return None, f"{site}: head grid ({lo}, {num_heads}, {step}) is empty"
    grid = list(range(lo, num_heads + 1, step))
    if grid[-1] != num_heads:
        grid.append(num_heads)
    spec = SubmoduleSpec(HEADS, layer_index, num_heads, lo / num_heads, 1.0, step / num_heads, 1, tuple(grid))
    return spec, None


@dataclass
class SubmoduleState:
    """Live search state of one submodule"""
    spec: SubmoduleSpec
    alpha: Tensor
    importance: Tensor
    live_unit_ids: np.ndarray
    pruned: bool = False
    decided: bool = False

    @property
    def D_live(self):
        return int(self.alpha.size)

    @property
    def W_live(self):
        return int(self.live_unit_ids.size)

    @property
    def live_grid(self):
        return self.spec.grid[:self.D_live]

    @property
    def sigma_target(self):
        d = self.D_live
        return (d - 1) / (d * d)

    def probabilities(self):
        a = self.alpha.data - self.alpha.data.max()
        e = np.exp(a)
        return e / e.sum()


@dataclass
class SearchSpace:
    submodules: list
    sharing: str = "bimask"
    finished: bool = False
    _by_site: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_site = {s.spec.site: s for s in self.submodules}

    @property
    def M(self):
        return len(self.submodules)

    def __getitem__(self, site):
        return self._by_site[site]

    def __iter__(self):
        return iter(self.submodules)

    @property
    def total_live_units(self):
        return sum(s.W_live for s in self.submodules)

    def parameters(self):
        """Architecture logits and importance logits, the score optimizer's parameters"""
        params = []
        for s in self.submodules:
            params.extend([s.alpha, s.importance])
        return params


def build_specs(model_config, space_config):
    """Enumerate the prunable sites of the toy ViT with their step grids"""
    specs = []
    problems = []

    spec, problem = channel_spec(PATCH_EMBED, -1, model_config.embed_dim, space_config.pe_lo, space_config.pe_step)
    specs.append(spec)
    problems.append(problem)
    for layer in range(model_config.depth):
        spec, problem = channel_spec(QKV, layer, model_config.heads * model_config.head_dim,
                                     space_config.qkv_lo, space_config.qkv_step, unit_size=model_config.heads)
        specs.append(spec)
        problems.append(problem)
        spec, problem = head_spec(layer, model_config.heads, space_config.heads_lo, space_config.heads_step)
        specs.append(spec)
        problems.append(problem)
        spec, problem = channel_spec(MLP, layer, model_config.mlp_dim, space_config.mlp_lo, space_config.mlp_step)
        specs.append(spec)
        problems.append(problem)

    problems = [p for p in problems if p]
    if problems:
        raise SearchSpaceError("non-divisible widths: " + "; ".join(problems))
    return specs


def build_space(model_config, space_config, seed=0, alpha_init="random", init_std=1e-3, sharing="bimask"):
    """
    Create the live search state for every prunable site

    Args:
        model_config: ToyViTConfig
        space_config: SpaceConfig with the (lo, step) overrides
        seed: Seed for the α / importance initialization
        alpha_init: "random" (zero-mean Gaussian) or "uniform" (α = 0)
        init_std: Standard deviation of the random initialization
        sharing: "bimask" (importance-ranked) or "ordinal" (index-ordered)

    Returns:
        SearchSpace: One SubmoduleState per site
    """
    rng = np.random.default_rng(seed)
    states = []
    for spec in build_specs(model_config, space_config):
        alpha = rng.normal(0.0, init_std, size=spec.candidates)
        if alpha_init == "uniform":
            alpha = np.zeros(spec.candidates)
        importance = rng.normal(0.0, init_std, size=spec.n_units)
        states.append(SubmoduleState(
            spec=spec,
            alpha=Tensor(alpha, requires_grad=True),
            importance=Tensor(importance, requires_grad=True),
            live_unit_ids=np.arange(spec.n_units),
        ))
    space = SearchSpace(states, sharing=sharing)
    logger.info(f"Built search space with {space.M} submodules, {space.total_live_units} units")
    return space


def units_to_remove(state, n_steps, sharing="bimask"):
    """Original ids of the lowest-priority live units freed by dropping n_steps steps"""
    if n_steps <= 0:
        return np.array([], dtype=np.int64)
    new_width = state.spec.grid[state.D_live - n_steps - 1]
    n_drop = state.W_live - new_width
    order = unit_order(state, sharing)
    return np.sort(state.live_unit_ids[order[state.W_live - n_drop:]])


def prune_steps(state, steps_to_remove, removed_unit_ids=None, sharing="bimask"):
    """
    Delete architecture steps and the units they free

    Args:
        state: SubmoduleState to shrink (modified in place)
        steps_to_remove: Live step indices whose α entries are deleted
        removed_unit_ids: Original unit ids to drop; computed from the
            current unit ordering when omitted (replays pass them in)
        sharing: Unit ordering mode used when removed_unit_ids is omitted

    Returns:
        SubmoduleState: The same state object
    """
    steps = sorted(set(int(s) for s in steps_to_remove))
    if not steps:
        return state
    if steps[0] < 0 or steps[-1] >= state.D_live:
        raise SearchSpaceError(f"{state.spec.site}: steps {steps} are not live (D_live={state.D_live})")
    if state.D_live - len(steps) < 1:
        raise SearchSpaceError(f"{state.spec.site}: refusing to remove every step (minimum one step retained)")

    if removed_unit_ids is None:
        removed_unit_ids = units_to_remove(state, len(steps), sharing)
    removed = np.asarray(removed_unit_ids, dtype=np.int64)
    expected = state.W_live - state.spec.grid[state.D_live - len(steps) - 1]
    if removed.size != expected or not np.all(np.isin(removed, state.live_unit_ids)):
        raise SearchSpaceError(f"{state.spec.site}: removal of {removed.size} units does not match {len(steps)} steps")

    alpha_keep = np.array([k for k in range(state.D_live) if k not in steps], dtype=np.int64)
    unit_keep = np.flatnonzero(~np.isin(state.live_unit_ids, removed))
    state.alpha.data = state.alpha.data[alpha_keep]
    state.importance.data = state.importance.data[unit_keep]
    state.live_unit_ids = state.live_unit_ids[unit_keep]
    state.pruned = True
    logger.debug(f"{state.spec.site}: removed steps {steps}, units {removed.tolist()}; "
                 f"D_live={state.D_live}, W_live={state.W_live}")
    return state


def export_architecture(space):
    """Architecture document: kept units and steps per submodule"""
    return {
        "submodules": [
            {
                "kind": s.spec.kind,
                "layer": s.spec.layer_index,
                "site": s.spec.site,
                "kept_units": [int(u) for u in s.live_unit_ids],
                "kept_steps": s.D_live,
                "full_width": s.spec.full_width,
                "unit_size": s.spec.unit_size,
            }
            for s in space
        ]
    }
