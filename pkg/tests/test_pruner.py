import numpy as np
import pytest

from bimask_search.engine.optim import Adam
from bimask_search.search.pruner import (
    PruneEvent,
    PruneSchedule,
    finalize,
    finish_check,
    is_one_hot,
    maybe_prune,
    replay_events,
)
from bimask_search.search.space import build_space, export_architecture
from bimask_search.utils.config import SpaceConfig, ToyViTConfig


def pin(state, probabilities):
    state.alpha.data = np.log(np.asarray(probabilities, dtype=np.float64))


def collapse(space, step=-1):
    for state in space:
        alpha = np.full(state.D_live, -50.0)
        alpha[step] = 50.0
        state.alpha.data = alpha


@pytest.fixture
def quiet_space(model_config, space_config):
    """Near-uniform α everywhere, so nothing triggers unless pinned"""
    return build_space(model_config, space_config, seed=0, init_std=1e-3)


class TestSchedule:
    def test_interval_per_epoch(self):
        assert PruneSchedule.for_epoch(10, prune_per_epoch=3).interval == 4
        assert PruneSchedule.for_epoch(2, prune_per_epoch=3).interval == 1

    def test_due_after_warmup(self):
        schedule = PruneSchedule(interval=5, warmup_iters=10)
        assert not schedule.is_due(5)
        assert schedule.is_due(10)
        assert not schedule.is_due(12)
        assert schedule.is_due(15)

    def test_not_due_after_finish(self):
        schedule = PruneSchedule(interval=1)
        schedule.finished = True
        assert not schedule.is_due(3)

    def test_positive_interval(self):
        with pytest.raises(ValueError):
            PruneSchedule(interval=0)


class TestMaybePrune:
    def test_single_low_step(self, quiet_space):
        state = quiet_space["blocks.0.mlp"]
        pin(state, [0.04, 0.30, 0.33, 0.33])
        events = maybe_prune(quiet_space, PruneSchedule(interval=1, eta=0.2), t=1)
        assert len(events) == 1
        event = events[0]
        assert event.site == "blocks.0.mlp"
        assert event.removed_steps == [0]
        assert event.threshold == pytest.approx(0.05)
        assert event.p_min == pytest.approx(0.04)
        assert len(event.removed_unit_ids) == 2
        assert state.D_live == 3 and state.W_live == 6
        np.testing.assert_allclose(state.probabilities().sum(), 1.0)

    def test_uniform_is_left_alone(self, quiet_space):
        for state in quiet_space:
            state.alpha.data = np.zeros(state.D_live)
        assert maybe_prune(quiet_space, PruneSchedule(interval=1, eta=0.2), t=1) == []

    def test_two_small_steps_in_one_event(self):
        space = build_space(ToyViTConfig(), SpaceConfig(), init_std=1e-3)
        state = space["blocks.0.heads"]
        pin(state, [0.01, 0.01, 0.98])
        events = maybe_prune(space, PruneSchedule(interval=1, eta=0.2), t=3)
        assert [e.site for e in events] == ["blocks.0.heads"]
        assert events[0].removed_steps == [0, 1]
        assert state.D_live == 1
        assert state.decided
        assert state.W_live == 1

    def test_argmax_is_protected(self, quiet_space):
        state = quiet_space["blocks.1.mlp"]
        pin(state, [0.04, 0.04, 0.04, 0.88])
        maybe_prune(quiet_space, PruneSchedule(interval=1, eta=1.0), t=1)
        assert state.D_live == 1
        assert state.live_grid == (2,)

    def test_skipped_when_not_due(self, quiet_space):
        pin(quiet_space["blocks.0.mlp"], [0.01, 0.33, 0.33, 0.33])
        assert maybe_prune(quiet_space, PruneSchedule(interval=4), t=3) == []
        assert quiet_space["blocks.0.mlp"].D_live == 4

    def test_optimizer_moments_follow_shrink(self, quiet_space):
        opt = Adam(quiet_space.parameters())
        for p in quiet_space.parameters():
            p.grad = np.ones_like(p.data)
        opt.step()
        state = quiet_space["blocks.0.mlp"]
        pin(state, [0.04, 0.30, 0.33, 0.33])
        maybe_prune(quiet_space, PruneSchedule(interval=1), t=1, optimizer=opt)
        assert opt._m[id(state.alpha)].shape == state.alpha.shape
        assert opt._v[id(state.importance)].shape == state.importance.shape

    def test_boundary_tie_is_flagged(self, quiet_space):
        state = quiet_space["blocks.0.mlp"]
        state.importance.data = np.zeros(state.W_live)
        pin(state, [0.04, 0.30, 0.33, 0.33])
        event = maybe_prune(quiet_space, PruneSchedule(interval=1), t=1)[0]
        assert event.boundary_tie
        assert event.removed_unit_ids == [6, 7]

    def test_distinct_scores_no_tie(self, quiet_space):
        state = quiet_space["blocks.0.mlp"]
        state.importance.data = np.arange(state.W_live, dtype=np.float64)
        pin(state, [0.04, 0.30, 0.33, 0.33])
        event = maybe_prune(quiet_space, PruneSchedule(interval=1), t=1)[0]
        assert not event.boundary_tie
        assert event.removed_unit_ids == [0, 1]

    def test_event_record_round_trip(self, quiet_space):
        pin(quiet_space["blocks.0.mlp"], [0.04, 0.30, 0.33, 0.33])
        event = maybe_prune(quiet_space, PruneSchedule(interval=1), t=1)[0]
        record = event.to_record()
        assert record["type"] == "prune"
        assert PruneEvent.from_record(record) == event


class TestFinish:
    def test_decided_and_within_budget(self, quiet_space):
        collapse(quiet_space)
        schedule = PruneSchedule(interval=1)
        assert finish_check(quiet_space, 0.4, 0.4, schedule=schedule)
        assert quiet_space.finished and schedule.finished

    def test_over_budget(self, quiet_space):
        collapse(quiet_space)
        assert not finish_check(quiet_space, 0.8, 0.4)
        assert not quiet_space.finished

    def test_tolerance(self, quiet_space):
        collapse(quiet_space)
        assert finish_check(quiet_space, 0.41, 0.4, tolerance=0.05)

    def test_undecided_submodule_blocks_finish(self, quiet_space):
        collapse(quiet_space)
        pin(quiet_space["blocks.1.mlp"], [0.5, 0.5, 1e-9, 1e-9])
        assert not is_one_hot(quiet_space["blocks.1.mlp"])
        assert not finish_check(quiet_space, 0.1, 0.4)

    def test_decided_flag_settles_submodule(self, quiet_space):
        collapse(quiet_space)
        state = quiet_space["blocks.1.mlp"]
        pin(state, [0.99, 0.005, 0.0025, 0.0025])
        assert not finish_check(quiet_space, 0.3, 0.4)
        state.decided = True
        assert finish_check(quiet_space, 0.3, 0.4)

    def test_partial_prune_leaves_flag_down(self, quiet_space):
        state = quiet_space["blocks.0.mlp"]
        pin(state, [0.04, 0.30, 0.33, 0.33])
        maybe_prune(quiet_space, PruneSchedule(interval=1), t=1)
        assert state.D_live == 3 and not state.decided

    def test_single_step_counts_as_decided(self, quiet_space):
        state = quiet_space["blocks.0.heads"]
        pin(state, [0.01, 0.99])
        maybe_prune(quiet_space, PruneSchedule(interval=1), t=1)
        assert state.D_live == 1 and is_one_hot(state)


class TestFinalizeAndReplay:
    def test_finalize_trims_above_argmax(self, quiet_space):
        state = quiet_space["blocks.0.mlp"]
        pin(state, [0.1, 0.7, 0.1, 0.1])
        events = finalize(quiet_space, t=9)
        trimmed = [e for e in events if e.site == "blocks.0.mlp"]
        assert trimmed[0].reason == "finalize"
        assert trimmed[0].threshold is None
        assert trimmed[0].removed_steps == [2, 3]
        assert state.D_live == 2 and state.W_live == 4
        assert int(np.argmax(state.probabilities())) == state.D_live - 1

    def test_replay_rebuilds_export(self, model_config, space_config):
        space = build_space(model_config, space_config, seed=5, init_std=1.0)
        events = []
        pin(space["blocks.0.mlp"], [0.02, 0.5, 0.38, 0.1])
        pin(space["patch_embed"], [0.6, 0.01, 0.2, 0.1, 0.09])
        events += maybe_prune(space, PruneSchedule(interval=1), t=2)
        events += finalize(space, t=3)
        replayed = replay_events(build_space(model_config, space_config, seed=5, init_std=1.0),
                                 [e.to_record() for e in events])
        assert export_architecture(replayed) == export_architecture(space)
