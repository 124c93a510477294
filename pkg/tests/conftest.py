import numpy as np
import pytest

from bimask_search.data_handlers.synthetic import generate_dataset
from bimask_search.engine import Tensor
from bimask_search.search.space import MLP, SubmoduleSpec, SubmoduleState, build_space
from bimask_search.utils.config import (
    RunConfig,
    SpaceConfig,
    SyntheticDatasetSpec,
    ToyViTConfig,
    TrainConfig,
)


def make_state(grid, alpha, importance=None, full_width=None):
    """Stand-alone MLP-kind submodule over an explicit unit grid"""
    full_width = full_width or grid[-1]
    step = (grid[1] - grid[0]) / full_width if len(grid) > 1 else 1.0
    spec = SubmoduleSpec(MLP, 0, full_width, grid[0] / full_width, 1.0, step, 1, tuple(grid))
    importance = np.zeros(full_width) if importance is None else np.asarray(importance, dtype=np.float64)
    return SubmoduleState(spec, Tensor(alpha, requires_grad=True), Tensor(importance, requires_grad=True),
                          np.arange(full_width))


def tiny_model_config():
    return ToyViTConfig(image_size=8, patch_size=4, in_chans=1, embed_dim=8, depth=2,
                        heads=2, head_dim=4, mlp_dim=8, classes=2)


def tiny_space_config():
    # grids: patch_embed 4..8, qkv 1..4 slots, heads 1..2, mlp 2,4,6,8
    return SpaceConfig(qkv_lo=0.25, qkv_step=0.25, mlp_lo=0.25, mlp_step=0.25,
                       heads_lo=1, heads_step=1, pe_lo=0.5, pe_step=0.125)


def tiny_run_config(output_dir="runs/test", **trainer):
    settings = dict(epochs=3, warmup_epochs=1, pretrain_epochs=0, retrain_epochs=1,
                    baseline_epochs=1, batch_size=8, tau=0.5, seed=0)
    settings.update(trainer)
    return RunConfig(
        model=tiny_model_config(),
        space=tiny_space_config(),
        trainer=TrainConfig(**settings),
        data=SyntheticDatasetSpec(n_train=16, n_eval=8, classes=2, image_size=8, noise_sigma=0.5, seed=7),
        output_dir=str(output_dir),
    )


def finishing_run_config(output_dir="runs/test", **trainer):
    """Tiny run whose fast score optimizer settles every submodule well inside the epoch budget"""
    settings = dict(epochs=20, lr_score=0.5, finish_tolerance=1.0)
    settings.update(trainer)
    config = tiny_run_config(output_dir, **settings)
    config.regularizers.mu2 = 1.0
    return config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def space_config():
    return tiny_space_config()


@pytest.fixture
def space(model_config, space_config):
    return build_space(model_config, space_config, seed=0, init_std=1.0)


@pytest.fixture
def run_config(tmp_path):
    return tiny_run_config(tmp_path)


@pytest.fixture
def dataset(run_config):
    return generate_dataset(run_config.data)


TINY_CONFIG_TEXT = """\
# tiny two-layer model for command-line smoke runs
model.image_size=8
model.patch_size=4
model.embed_dim=8
model.heads=2
model.head_dim=4
model.mlp_dim=8
model.classes=2
space.qkv_lo=0.25
space.qkv_step=0.25
space.mlp_lo=0.25
space.mlp_step=0.25
space.heads_lo=1
space.heads_step=1
space.pe_lo=0.5
space.pe_step=0.125
trainer.epochs=20
trainer.lr_score=0.5
trainer.finish_tolerance=1.0
trainer.warmup_epochs=1
trainer.pretrain_epochs=1
trainer.retrain_epochs=1
trainer.baseline_epochs=1
trainer.batch_size=8
data.n_train=16
data.n_eval=8
data.classes=2
data.image_size=8
regularizers.mu2=1.0
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return path
