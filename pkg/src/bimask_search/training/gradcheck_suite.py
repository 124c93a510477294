"""
Finite-difference audit of every differentiable piece: engine primitives,
the one-hot regularizers, the sparsity scores, the cost surrogate and the
full search objective on a tiny two-layer model.
"""
import logging
from dataclasses import replace

import numpy as np

from bimask_search.engine import Tensor
from bimask_search.engine import functional as F
from bimask_search.engine import tensor as T
from bimask_search.engine.gradcheck import gradient_check
from bimask_search.models.vit import ToyViT, reconstruct_loss
from bimask_search.search.bimask import compute_bimasks, sparsity_scores
from bimask_search.search.cost_model import calibrate, g_of_V
from bimask_search.search.regularizers import VarianceTarget, entropy, total_mask_loss, variance_term
from bimask_search.search.space import SearchSpace, build_space
from bimask_search.utils.config import RegularizerWeights, SpaceConfig, ToyViTConfig

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

TINY_MODEL = ToyViTConfig(image_size=8, patch_size=4, in_chans=1, embed_dim=8, depth=2,
                          heads=2, head_dim=4, mlp_dim=8, classes=2)
TINY_SPACE = SpaceConfig(qkv_lo=0.25, qkv_step=0.25, mlp_lo=0.25, mlp_step=0.25,
                         heads_lo=1, heads_step=1, pe_lo=0.5, pe_step=0.125)


def primitive_cases(seed=0):
    """(name, f, theta) for every engine primitive, each reduced to a scalar by fixed random weights"""
    rng = np.random.default_rng(seed)
    x34 = rng.normal(size=(3, 4))
    c4 = rng.normal(size=4)
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases = []

    def case(name, fn, theta):
        out_shape = fn(Tensor(theta)).shape
        weights = Tensor(rng.normal(size=out_shape))
        cases.append((name, lambda t, fn=fn, weights=weights: (fn(t) * weights).sum(), theta))

    labels = np.array([0, 2, 1])
    interior = rng.uniform(-0.8, 0.8, size=(3, 4))
    away = np.sign(x34) * (np.abs(x34) + 0.1)
    case("add", lambda t: T.add(t, Tensor(c4)), x34)
    case("sub", lambda t: T.sub(Tensor(c4), t), x34)
    case("mul", lambda t: T.mul(t, t), x34)
    case("div", lambda t: T.div(Tensor(c4), t), pos)
    case("safe_div", lambda t: T.safe_div(t, Tensor(pos)), x34)
    case("power", lambda t: T.power(t, 2.5), pos)
    case("matmul", lambda t: T.matmul(t, Tensor(rng.normal(size=(4, 2)))), x34)
    case("batched_matmul", lambda t: T.matmul(t.reshape(1, 3, 4), t.reshape(1, 4, 3)), x34)
    case("sum", lambda t: T.reduce_sum(t, axis=1), x34)
    case("mean", lambda t: T.reduce_mean(t, axis=0, keepdims=True), x34)
    case("reshape", lambda t: T.reshape(t, (2, 6)), x34)
    case("transpose", lambda t: T.transpose(t, (1, 0)), x34)
    case("exp", T.exp, x34)
    case("log", T.log, pos)
    case("sigmoid", F.sigmoid, x34)
    case("tan", F.tan, interior)
    case("abs", F.absolute, away)
    case("clip", lambda t: F.clip(t, -1.5, 1.5), interior)
    case("gelu", F.gelu, x34)
    case("softmax", lambda t: F.softmax(t, axis=-1), x34)
    case("layer_norm", lambda t: F.layer_norm(t, np.array([1.0, 0.0, 1.0, 1.0])), x34)
    case("cross_entropy", lambda t: F.cross_entropy(t, labels), x34)
    case("l1_loss", lambda t: F.l1_loss(t, x34 - away), x34)
    case("take", lambda t: F.take(t, np.array([2, 0, 0]), axis=1), x34)
    case("scatter", lambda t: F.scatter(t, np.array([4, 1, 2]), 6), c4[:3])
    case("where", lambda t: F.where(x34 > 0, t, t * t), x34)
    case("reverse_cumsum", F.reverse_cumsum, c4)
    return cases


PSI_OMEGAS = (0.1, 0.3, 0.5, 0.7, 0.9)


def logits_at_omega(omega, d=4):
    """
    Logits whose softmax has normalized variance ω

    p = (1 − s)·uniform + s·e₀ has σ(p) = s²·σᵗ, so s = √ω.
    """
    s = np.sqrt(omega)
    p = np.full(d, (1.0 - s) / d)
    p[0] += s
    return np.log(p)


def _spread_alphas(space, rng):
    """Descending logits with a little noise, keeping every ω well inside the clamp"""
    for state in space:
        state.alpha.data = np.linspace(1.0, -1.0, state.D_live) + 0.05 * rng.normal(size=state.D_live)
    return space


def _tiny_space(seed):
    return build_space(TINY_MODEL, TINY_SPACE, seed=seed, alpha_init="random", init_std=1.0)


def _with_alphas(space, theta):
    """Copy of space whose α vectors are slices of one flat tensor"""
    states = []
    offset = 0
    for state in space:
        d = state.D_live
        alpha = F.take(theta, np.arange(offset, offset + d))
        states.append(replace(state, alpha=alpha))
        offset += d
    return SearchSpace(states, sharing=space.sharing)


def _flat_alphas(space):
    return np.concatenate([s.alpha.data for s in space])


def search_cases(seed=0):
    """(name, f, theta) for H, Ψ over an ω grid, V(α), g(V) and the full objective"""
    rng = np.random.default_rng(seed)
    space = _spread_alphas(_tiny_space(seed), rng)
    coeffs = calibrate(TINY_MODEL, seed=seed)
    cases = [
        ("entropy", lambda t: entropy(F.softmax(t)), rng.normal(size=5)),
    ]
    for omega in PSI_OMEGAS:
        cases.append((f"variance_term[omega={omega}]", lambda t: variance_term(F.softmax(t), VarianceTarget(4)),
                      logits_at_omega(omega)))

    state = space["blocks.0.mlp"]
    v_weights = Tensor(rng.normal(size=state.W_live))
    cases.append(("sparsity_scores", lambda t: (sparsity_scores(replace(state, alpha=t)) * v_weights).sum(),
                  state.alpha.data.copy()))
    cases.append(("g_of_V", lambda t: g_of_V(_with_alphas(space, t), coeffs), _flat_alphas(space)))

    model = ToyViT(TINY_MODEL, seed=seed)
    patches = rng.normal(size=(3, TINY_MODEL.n_patches, TINY_MODEL.patch_pixels))
    labels = np.array([0, 1, 0])
    mask = np.array([True, False, True, False])
    weights = RegularizerWeights()

    def objective(t):
        live = _with_alphas(space, t)
        output = model.forward(patches, compute_bimasks(live, 0.5), mask)
        l_m, _, _ = total_mask_loss(live, weights, 0.02, coeffs)
        return F.cross_entropy(output.logits, labels) + l_m + reconstruct_loss(output, patches)

    cases.append(("search_objective", objective, _flat_alphas(space)))
    return cases


def run_gradcheck(seed=0, h=1e-5, tolerance=TOLERANCE):
    """
    Run every case and report its maximum relative error

    Returns:
        dict: {"cases": {name: error}, "max_error", "failed": [...], "passed"}
    """
    errors = {}
    for name, fn, theta in primitive_cases(seed) + search_cases(seed):
        errors[name] = gradient_check(fn, np.asarray(theta, dtype=np.float64), h)
        logger.debug(f"gradcheck {name}: {errors[name]:.3e}")
    failed = sorted(name for name, err in errors.items() if not err < tolerance)
    report = {
        "cases": errors,
        "max_error": max(errors.values()),
        "tolerance": tolerance,
        "failed": failed,
        "passed": not failed,
    }
    if failed:
        logger.warning(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"Gradient check passed: {len(errors)} cases, max relative error {report['max_error']:.2e}")
    return report
