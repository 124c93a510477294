import numpy as np
import pytest

from bimask_search.models.vit import ToyViT, materialize_widths
from bimask_search.search import cost_model
from bimask_search.search.cost_model import (
    CalibrationError,
    CostCoefficients,
    calibrate,
    cost_report,
    cost_terms,
    discrete_cost,
    expected_width,
    flops_at,
    full_widths,
    g_of_V,
    param_count,
)
from bimask_search.search.space import build_space, export_architecture
from bimask_search.utils.config import SpaceConfig, ToyViTConfig
from tests.conftest import make_state


@pytest.fixture
def coeffs(model_config):
    return calibrate(model_config)


def one_hot_alphas(space, rng):
    """Pin every submodule to a random step; returns the chosen unit counts"""
    widths = {}
    for state in space:
        k = int(rng.integers(state.D_live))
        alpha = np.full(state.D_live, -100.0)
        alpha[k] = 100.0
        state.alpha.data = alpha
        widths[state.spec.site] = state.live_grid[k]
    return widths


class TestExpectedWidth:
    def test_uniform(self):
        state = make_state((8, 16, 24, 32), np.zeros(4))
        assert expected_width(state).item() == pytest.approx(20.0)

    def test_one_hot_last_step_is_full(self):
        state = make_state((8, 16, 24, 32), np.array([-100.0, -100.0, -100.0, 100.0]))
        assert expected_width(state).item() == pytest.approx(32.0, abs=1e-12)

    def test_one_hot_first_step_is_minimum(self):
        state = make_state((16, 24, 32), np.array([100.0, -100.0, -100.0]))
        assert expected_width(state).item() == pytest.approx(16.0, abs=1e-12)


class TestCalibration:
    def test_default_model(self):
        coeffs = calibrate(ToyViTConfig())
        assert coeffs.calibrated
        assert coeffs.checked_settings == ["full", "half-patch-embed", "one-head-pruned",
                                           "minimal", "half-mlp", "mixed"]
        assert coeffs.full_flops == flops_at(coeffs, full_widths(ToyViTConfig()))

    def test_closed_form_full_count(self, model_config, coeffs):
        n, c, k = model_config.n_patches, model_config.embed_dim, model_config.classes
        hd, f, pp = model_config.heads * model_config.head_dim, model_config.mlp_dim, model_config.patch_pixels
        per_layer = 4 * n * c * hd + 2 * n * n * hd + 2 * n * c * f
        assert coeffs.full_flops == n * pp * c + model_config.depth * per_layer + k * c

    def test_mismatch_raises(self, model_config, monkeypatch):
        def skewed(config):
            terms = cost_terms(config)
            coef, sites = terms[0]
            return [(coef + 1, sites)] + terms[1:]

        monkeypatch.setattr(cost_model, "cost_terms", skewed)
        with pytest.raises(CalibrationError, match="full"):
            calibrate(model_config)

    def test_uncalibrated_coefficients_rejected(self, space, model_config):
        coeffs = CostCoefficients(terms=cost_terms(model_config), full_widths=full_widths(model_config))
        with pytest.raises(CalibrationError):
            g_of_V(space, coeffs)


class TestGofV:
    def test_full_width_is_one(self, space, coeffs):
        for state in space:
            alpha = np.full(state.D_live, -100.0)
            alpha[-1] = 100.0
            state.alpha.data = alpha
        assert g_of_V(space, coeffs).item() == pytest.approx(1.0, abs=1e-12)

    def test_minimal_architecture(self):
        space = build_space(ToyViTConfig(), SpaceConfig())
        coeffs = calibrate(ToyViTConfig())
        minimal = {}
        for state in space:
            alpha = np.full(state.D_live, -100.0)
            alpha[0] = 100.0
            state.alpha.data = alpha
            minimal[state.spec.site] = state.spec.grid[0]
        counted = cost_model._count_model_macs(materialize_widths(minimal, ToyViT(ToyViTConfig())), ToyViTConfig())
        assert g_of_V(space, coeffs).item() == pytest.approx(counted / coeffs.full_flops, abs=1e-12)

    def test_one_hot_states_match_counter(self, space, coeffs, model_config, rng):
        supernet = ToyViT(model_config)
        for _ in range(5):
            widths = one_hot_alphas(space, rng)
            counted = cost_model._count_model_macs(materialize_widths(widths, supernet), model_config)
            assert g_of_V(space, coeffs).item() == pytest.approx(counted / coeffs.full_flops, abs=1e-9)

    def test_monotone_in_probability_of_wider_steps(self, space, coeffs):
        state = space["blocks.0.mlp"]
        state.alpha.data = np.zeros(4)
        low = g_of_V(space, coeffs).item()
        state.alpha.data = np.array([0.0, 0.0, 0.0, 2.0])
        assert g_of_V(space, coeffs).item() > low

    def test_differentiable_in_every_alpha(self, space, coeffs):
        g_of_V(space, coeffs).backward()
        for state in space:
            assert np.any(state.alpha.grad != 0)


class TestDiscreteCost:
    def test_unpruned_equals_full_count(self, space, model_config, coeffs):
        flops, params = discrete_cost(export_architecture(space), model_config)
        assert flops == coeffs.full_flops
        assert params == param_count(model_config, full_widths(model_config))

    def test_halved_mlp(self, model_config):
        full = full_widths(model_config)
        half = dict(full)
        for layer in range(model_config.depth):
            half[f"blocks.{layer}.mlp"] = model_config.mlp_dim // 2
        supernet = ToyViT(model_config)
        full_count = cost_model._count_model_macs(supernet, model_config)
        half_count = cost_model._count_model_macs(materialize_widths(half, supernet), model_config)
        mlp_share = model_config.depth * 2 * model_config.n_patches * model_config.embed_dim * model_config.mlp_dim
        assert full_count - half_count == mlp_share // 2

    def test_deterministic(self, space, model_config):
        export = export_architecture(space)
        assert discrete_cost(export, model_config) == discrete_cost(export, model_config)

    def test_report_fractions(self, space, model_config):
        report = cost_report(export_architecture(space), model_config)
        assert report["flops_fraction"] == 1.0
        assert report["params_fraction"] == 1.0
