import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from bimask_search.search.space import SearchSpaceError, prune_steps, units_to_remove

logger = logging.getLogger(__name__)

ONE_HOT_TOL = 1e-3


@dataclass
class PruneEvent:
    step: int
    site: str
    removed_steps: list
    removed_unit_ids: list
    p_before: list
    p_min: float
    threshold: float
    reason: str = "trigger"
    boundary_tie: bool = False

    def to_record(self):
        record = asdict(self)
        record["type"] = "prune"
        return record

    @classmethod
    def from_record(cls, record):
        fields = {k: v for k, v in record.items() if k != "type"}
        return cls(**fields)


@dataclass
class PruneSchedule:
    """Pruning cadence: every interval iterations once warmup_iters have passed"""
    interval: int
    eta: float = 0.2
    warmup_iters: int = 0
    finished: bool = False

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError(f"prune interval must be positive, got {self.interval}")

    @classmethod
    def for_epoch(cls, iters_per_epoch, prune_per_epoch=3, eta=0.2, warmup_iters=0):
        return cls(max(math.ceil(iters_per_epoch / prune_per_epoch), 1), eta, warmup_iters)

    def is_due(self, t):
        return not self.finished and t >= self.warmup_iters and t % self.interval == 0


def _boundary_tie(state, removed_units, sharing):
    """True when the best dropped unit scores exactly as the worst kept one"""
    dropped = np.isin(state.live_unit_ids, removed_units)
    if sharing != "bimask" or dropped.all() or not dropped.any():
        return False
    scores = state.importance.data
    return bool(scores[~dropped].min() == scores[dropped].max())


def _apply(state, steps, t, reason, threshold, sharing, optimizer):
    p = state.probabilities()
    removed_units = units_to_remove(state, len(steps), sharing)
    tie = _boundary_tie(state, removed_units, sharing)
    alpha_keep = np.array([k for k in range(state.D_live) if k not in steps], dtype=np.int64)
    unit_keep = np.flatnonzero(~np.isin(state.live_unit_ids, removed_units))
    event = PruneEvent(
        step=int(t),
        site=state.spec.site,
        removed_steps=[int(k) for k in steps],
        removed_unit_ids=[int(u) for u in removed_units],
        p_before=p.tolist(),
        p_min=float(p.min()),
        threshold=None if threshold is None else float(threshold),
        reason=reason,
        boundary_tie=tie,
    )
    if tie:
        logger.warning(f"[t={t}] {state.spec.site}: importance tie across the prune boundary; dropping by index")
    prune_steps(state, steps, removed_units, sharing)
    if state.D_live == 1:
        state.decided = True
    if optimizer is not None:
        optimizer.retain(state.alpha, alpha_keep)
        optimizer.retain(state.importance, unit_keep)
    total = state.probabilities().sum()
    if abs(total - 1.0) > 1e-12:
        raise SearchSpaceError(f"{state.spec.site}: probabilities sum to {total} after pruning")
    logger.info(f"[t={t}] {reason} {state.spec.site}: removed steps {event.removed_steps} "
                f"({len(event.removed_unit_ids)} units), D_live={state.D_live}, W_live={state.W_live}")
    return event


def maybe_prune(space, schedule, t, optimizer=None):
    """
    Remove every live step whose probability is at most η/D_live

    The most probable step of each submodule is never removed. Nothing
    happens unless the schedule is due at t.

    Args:
        space: SearchSpace (modified in place)
        schedule: PruneSchedule
        t: Current iteration
        optimizer: Optional score optimizer whose moments follow the shrink

    Returns:
        list: PruneEvent per pruned submodule
    """
    if not schedule.is_due(t):
        return []
    events = []
    for state in space:
        if state.D_live < 2:
            continue
        p = state.probabilities()
        threshold = schedule.eta / state.D_live
        protected = int(np.argmax(p))
        steps = [k for k in range(state.D_live) if p[k] <= threshold and k != protected]
        if steps:
            events.append(_apply(state, steps, t, "trigger", threshold, space.sharing, optimizer))
    return events


def is_one_hot(state, tol=ONE_HOT_TOL):
    return state.D_live == 1 or state.probabilities().max() >= 1.0 - tol


def finish_check(space, g_fraction, tau, tolerance=0.05, schedule=None):
    """
    True once the budget is met and every submodule has settled on one step

    A submodule counts as settled when its decided flag is up (ω hit the
    upper clamp on the last regularizer pass, or one step is left) or its
    p is one-hot within ONE_HOT_TOL. Sets space.finished (and
    schedule.finished) on success.
    """
    if g_fraction > tau * (1.0 + tolerance):
        return False
    open_sites = [state.spec.site for state in space if not (state.decided or is_one_hot(state))]
    if open_sites:
        logger.debug(f"Budget met (g={g_fraction:.4f}) but undecided: {', '.join(open_sites)}")
        return False
    space.finished = True
    if schedule is not None:
        schedule.finished = True
    logger.info(f"Search finished: g={g_fraction:.4f} within tau={tau} (+{tolerance:.0%})")
    return True


def finalize(space, t, optimizer=None):
    """
    Remove the steps above each submodule's most probable step

    Afterwards every live unit is kept, so the live set is the exported
    architecture and the event stream replays to it.

    Returns:
        list: PruneEvent per trimmed submodule (reason "finalize")
    """
    events = []
    for state in space:
        top = int(np.argmax(state.probabilities()))
        steps = list(range(top + 1, state.D_live))
        if steps:
            events.append(_apply(state, steps, t, "finalize", None, space.sharing, optimizer))
    return events


def replay_events(space, events):
    """
    Re-apply a logged event stream to a freshly built space

    Returns:
        SearchSpace: The same space, shrunk exactly as in the logged run
    """
    for event in events:
        if isinstance(event, dict):
            event = PruneEvent.from_record(event)
        prune_steps(space[event.site], event.removed_steps, event.removed_unit_ids, space.sharing)
    logger.info(f"Replayed {len(events)} prune events")
    return space
