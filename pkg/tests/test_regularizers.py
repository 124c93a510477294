import math

import numpy as np
import pytest

from bimask_search.engine import Tensor
from bimask_search.engine import functional as F
from bimask_search.engine.optim import Adam
from bimask_search.search.bimask import importance_scores
from bimask_search.search.cost_model import calibrate, g_of_V
from bimask_search.search.regularizers import (
    VarianceTarget,
    budget_penalty,
    entropy,
    importance_penalty,
    theorem_suite,
    total_mask_loss,
    variance,
    variance_identity_check,
    variance_term,
)
from bimask_search.training.gradcheck_suite import logits_at_omega
from bimask_search.utils.config import RegularizerWeights
from tests.conftest import make_state

CLAMPED_PSI = math.tan(math.pi / 2 - 0.999 * math.pi)


class TestEntropy:
    @pytest.mark.parametrize("p, expected", [
        ([1.0, 0.0, 0.0, 0.0], 0.0),
        ([0.25, 0.25, 0.25, 0.25], math.log(4)),
        ([0.5, 0.5], math.log(2)),
    ])
    def test_values(self, p, expected):
        assert entropy(Tensor(p)).item() == pytest.approx(expected, abs=1e-10)

    def test_rejects_negative_entries(self):
        with pytest.raises(ValueError):
            entropy(Tensor([1.1, -0.1]))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            entropy(Tensor([0.5, 0.6]))


class TestVarianceTerm:
    def test_one_hot_clamps_high(self):
        psi = variance_term(Tensor([1.0, 0.0, 0.0, 0.0]), VarianceTarget(4)).item()
        assert psi == pytest.approx(CLAMPED_PSI, rel=1e-9)
        assert psi == pytest.approx(-318.3, abs=0.05)

    def test_uniform_clamps_low(self):
        psi = variance_term(Tensor(np.full(4, 0.25)), VarianceTarget(4)).item()
        assert psi == pytest.approx(-CLAMPED_PSI, rel=1e-9)
        assert psi == pytest.approx(318.3, abs=0.05)

    def test_half_normalized_variance_is_zero(self):
        # p = (1/2 + x, 1/2 - x) has σ = x² against σᵗ = 1/4, so x² = 1/8 puts ω at 1/2
        x = math.sqrt(0.125)
        p = Tensor([0.5 + x, 0.5 - x])
        assert variance(p).item() / VarianceTarget(2).sigma_target == pytest.approx(0.5)
        assert variance_term(p, VarianceTarget(2)).item() == pytest.approx(0.0, abs=1e-9)

    def test_decided_submodule(self):
        assert variance_term(Tensor([1.0]), VarianceTarget(1)).item() == 0.0

    def test_gradient_survives_lower_clamp(self, rng):
        alpha = Tensor(rng.normal(0.0, 1e-3, size=4), requires_grad=True)
        psi = variance_term(F.softmax(alpha), VarianceTarget(4))
        assert psi.item() == pytest.approx(-CLAMPED_PSI, rel=1e-9)
        psi.backward()
        assert np.all(np.isfinite(alpha.grad))
        assert np.abs(alpha.grad).max() > 0
        # descending Ψ spreads the logits: the largest one is pushed up
        assert alpha.grad[np.argmax(alpha.data)] < 0

    def test_monotone_in_omega(self):
        omegas = np.linspace(0.005, 0.995, 100)
        psi = [variance_term(F.softmax(Tensor(logits_at_omega(w))), VarianceTarget(4)).item() for w in omegas]
        assert np.all(np.diff(psi) < 0)
        np.testing.assert_allclose(psi, np.tan(np.pi / 2 - np.pi * omegas), rtol=1e-9)

    def test_decided_flag_follows_omega(self):
        state = make_state((2, 4, 6, 8), np.zeros(4))
        variance_term(Tensor(np.full(4, 0.25)), VarianceTarget(4), state)
        assert not state.decided
        variance_term(Tensor([1.0, 0.0, 0.0, 0.0]), VarianceTarget(4), state)
        assert state.decided
        variance_term(Tensor([0.7, 0.1, 0.1, 0.1]), VarianceTarget(4), state)
        assert not state.decided

    def test_single_step_is_decided(self):
        state = make_state((8,), np.zeros(1))
        variance_term(Tensor([1.0]), VarianceTarget(1), state)
        assert state.decided

    def test_length_must_match_target(self):
        with pytest.raises(ValueError):
            variance_term(Tensor([0.5, 0.5]), VarianceTarget(3))


class TestVarianceIdentity:
    def test_one_hot(self):
        assert variance_identity_check([1.0, 0.0, 0.0, 0.0]) == 0.0

    def test_uniform(self):
        assert variance_identity_check(np.full(4, 0.25)) < 1e-15

    def test_random_simplex_points(self, rng):
        residuals = [variance_identity_check(p) for p in rng.dirichlet(np.ones(6), size=1000)]
        assert max(residuals) < 1e-12


class TestPenalties:
    def test_importance_half_scores(self):
        assert importance_penalty([Tensor(np.full(10, 0.5))]).item() == 5.0

    def test_importance_empty(self):
        assert importance_penalty([]).item() == 0.0
        assert importance_penalty([Tensor(np.zeros(0))]).item() == 0.0

    def test_importance_matches_sum(self, rng):
        scores = [Tensor(rng.uniform(size=n)) for n in (3, 7, 5)]
        expected = sum(s.data.sum() for s in scores)
        assert importance_penalty(scores).item() == pytest.approx(expected, rel=1e-14)

    def test_budget_at_target(self):
        assert budget_penalty(Tensor(0.2), 0.2).item() == 0.0

    def test_budget_above_target(self):
        assert budget_penalty(Tensor(0.30), 0.20).item() == pytest.approx(0.10)


class TestTotalMaskLoss:
    @pytest.fixture
    def coeffs(self, model_config):
        return calibrate(model_config)

    def test_zero_weights(self, space, coeffs):
        weights = RegularizerWeights(mu1=0.0, mu2=0.0, mu3=0.0)
        loss, parts, _ = total_mask_loss(space, weights, 0.5, coeffs)
        assert loss.item() == 0.0
        assert parts["L_m"] == 0.0

    def test_sum_of_parts(self, space, coeffs):
        weights = RegularizerWeights()
        tau = 0.4
        loss, parts, g = total_mask_loss(space, weights, tau, coeffs)
        h = sum(entropy(F.softmax(s.alpha)).item() for s in space)
        psi = sum(variance_term(F.softmax(s.alpha), VarianceTarget(s.D_live)).item() for s in space)
        g_value = g_of_V(space, coeffs).item()
        l1 = sum(importance_scores(s).data.sum() for s in space)
        expected = weights.mu1 * (h + psi) + weights.mu2 * abs(g_value - tau) + weights.mu3 * l1
        assert loss.item() == pytest.approx(expected, rel=1e-12)
        assert parts["entropy"] == pytest.approx(h)
        assert parts["psi"] == pytest.approx(psi)
        assert parts["g"] == g.item() == pytest.approx(g_value)
        assert parts["l1"] == pytest.approx(l1)

    def test_switches_drop_terms(self, space, coeffs):
        weights = RegularizerWeights(use_entropy=False, use_variance=False, use_importance=False)
        loss, parts, _ = total_mask_loss(space, weights, 0.4, coeffs)
        assert parts["entropy"] == parts["psi"] == parts["l1"] == 0.0
        assert loss.item() == pytest.approx(weights.mu2 * parts["budget"])

    def test_gradient_flows_to_every_score(self, space, coeffs):
        loss, _, _ = total_mask_loss(space, RegularizerWeights(), 0.4, coeffs)
        loss.backward()
        for state in space:
            assert np.all(np.isfinite(state.alpha.grad))
            assert np.any(state.importance.grad != 0)


class TestOneHotDescent:
    def test_entropy_and_variance_drive_one_hot(self, rng):
        alpha = Tensor(rng.normal(0.0, 1e-2, size=4), requires_grad=True)
        opt = Adam([alpha], lr=0.05)
        start = entropy(F.softmax(alpha)).item()
        for _ in range(600):
            p = F.softmax(alpha)
            loss = entropy(p) + variance_term(p, VarianceTarget(4))
            opt.zero_grad()
            loss.backward()
            opt.step()
        p = F.softmax(alpha)
        assert entropy(p).item() < start
        assert p.data.max() > 0.99


class TestTheoremSuite:
    def test_default_suite_passes(self):
        report = theorem_suite(1000, dims=(2, 4, 8, 16), seed=0)
        assert report["passed"], report["violations"][:5]
        assert report["max_identity_residual"] < 1e-12
        assert report["samples"] >= 4000

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            theorem_suite(10)
