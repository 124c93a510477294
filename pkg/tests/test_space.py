import numpy as np
import pytest

from bimask_search.search.space import (
    HEADS,
    MLP,
    PATCH_EMBED,
    QKV,
    SearchSpaceError,
    build_space,
    build_specs,
    export_architecture,
    prune_steps,
    units_to_remove,
)
from bimask_search.utils.config import SpaceConfig, ToyViTConfig


@pytest.fixture
def default_specs():
    return {spec.site: spec for spec in build_specs(ToyViTConfig(), SpaceConfig())}


class TestGrids:
    def test_default_sites(self, default_specs):
        assert list(default_specs) == [
            "patch_embed",
            "blocks.0.qkv", "blocks.0.heads", "blocks.0.mlp",
            "blocks.1.qkv", "blocks.1.heads", "blocks.1.mlp",
        ]

    def test_qkv_grid(self, default_specs):
        spec = default_specs["blocks.0.qkv"]
        assert spec.kind == QKV
        assert spec.step == 4
        assert spec.candidates == 7
        assert spec.widths() == (8, 12, 16, 20, 24, 28, 32)
        assert spec.unit_size == 4

    def test_head_grid_is_closed_by_head_count(self, default_specs):
        spec = default_specs["blocks.1.heads"]
        assert spec.kind == HEADS
        assert spec.grid == (1, 3, 4)

    def test_patch_embed_grid(self, default_specs):
        spec = default_specs["patch_embed"]
        assert spec.kind == PATCH_EMBED
        assert spec.step == 1
        assert spec.candidates == 17
        assert spec.grid[0] == 16 and spec.grid[-1] == 32

    def test_mlp_grid(self, default_specs):
        spec = default_specs["blocks.0.mlp"]
        assert spec.kind == MLP
        assert spec.grid == (16, 24, 32, 40, 48, 56, 64)

    def test_every_grid_ends_at_full_width(self, default_specs):
        for spec in default_specs.values():
            assert spec.grid[-1] == spec.n_units

    def test_non_divisible_widths_name_the_site(self):
        with pytest.raises(SearchSpaceError, match="patch_embed"):
            build_specs(ToyViTConfig(), SpaceConfig(pe_step=0.3))


class TestBuildSpace:
    def test_initial_state(self, space, model_config):
        for state in space:
            assert state.D_live == state.spec.candidates
            assert state.W_live == state.spec.n_units
            assert not state.pruned
        assert space.M == 1 + 3 * model_config.depth

    def test_uniform_alpha(self, model_config, space_config):
        space = build_space(model_config, space_config, alpha_init="uniform")
        for state in space:
            np.testing.assert_array_equal(state.alpha.data, 0.0)

    def test_seeded(self, model_config, space_config):
        a = build_space(model_config, space_config, seed=3, init_std=0.1)
        b = build_space(model_config, space_config, seed=3, init_std=0.1)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.alpha.data, sb.alpha.data)
            np.testing.assert_array_equal(sa.importance.data, sb.importance.data)


class TestPruneSteps:
    def test_remove_one_step(self, space):
        state = space["blocks.0.mlp"]
        prune_steps(state, [0])
        assert state.D_live == 3
        assert state.W_live == 6
        assert state.live_grid == (2, 4, 6)

    def test_last_step_is_retained(self, model_config, space_config):
        state = build_space(model_config, space_config)["blocks.0.heads"]
        prune_steps(state, [0])
        assert state.D_live == 1
        with pytest.raises(SearchSpaceError, match="minimum one step"):
            prune_steps(state, [0])

    def test_qkv_two_steps_drop_eight_channels(self):
        space = build_space(ToyViTConfig(), SpaceConfig())
        state = space["blocks.0.qkv"]
        assert state.D_live == 7
        before = state.W_live * state.spec.unit_size
        prune_steps(state, [2, 5])
        assert before - state.W_live * state.spec.unit_size == 8

    def test_drops_lowest_ranked_units(self, space):
        state = space["blocks.0.mlp"]
        state.importance.data = np.array([0.5, -1.0, 2.0, 0.1, -3.0, 1.0, 0.0, 0.7])
        assert units_to_remove(state, 1).tolist() == [1, 4]
        prune_steps(state, [3])
        assert state.live_unit_ids.tolist() == [0, 2, 3, 5, 6, 7]
        np.testing.assert_array_equal(state.importance.data, [0.5, 2.0, 0.1, 1.0, 0.0, 0.7])

    def test_ordinal_drops_highest_index(self, space):
        state = space["blocks.0.mlp"]
        assert units_to_remove(state, 2, sharing="ordinal").tolist() == [4, 5, 6, 7]

    def test_rejects_dead_step(self, space):
        with pytest.raises(SearchSpaceError):
            prune_steps(space["blocks.0.mlp"], [4])

    def test_rejects_inconsistent_units(self, space):
        with pytest.raises(SearchSpaceError):
            prune_steps(space["blocks.0.mlp"], [0], removed_unit_ids=[0])

    def test_export_lists_live_units(self, space):
        prune_steps(space["blocks.1.mlp"], [1])
        entry = {e["site"]: e for e in export_architecture(space)["submodules"]}["blocks.1.mlp"]
        assert entry["kept_steps"] == 3
        assert entry["kept_units"] == space["blocks.1.mlp"].live_unit_ids.tolist()
        assert entry["unit_size"] == 1
