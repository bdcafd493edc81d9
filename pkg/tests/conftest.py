import os

import hypothesis
import numpy as np
import pytest

from relpose_adapt.core.config import (
    AdaptConfig,
    BankConfig,
    EvalConfig,
    MotionAAEConfig,
    PipelineConfig,
    PoseAAEConfig,
    RelationsConfig,
    RenderStyle,
    SourceConfig,
    default_target_style,
)
from relpose_adapt.core.latent_models import train_motion_aae, train_pose_aae
from relpose_adapt.core.synth_world import build_source_dataset, build_target_videos, generate_motion_bank

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.register_profile("relpose", max_examples=25, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "relpose"))

os.environ.setdefault("RELPOSE_PROGRESS", "false")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行完整规模的慢速测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_bank_config() -> BankConfig:
    return BankConfig(
        n_poses=64,
        n_sequences=12,
        n_long_sequences=8,
        n_source_sequences=6,
        n_target_sequences=4,
        val_fraction=0.25,
    )


def tiny_pipeline_config() -> PipelineConfig:
    return PipelineConfig(
        bank=tiny_bank_config(),
        pose_aae=PoseAAEConfig(epochs=2, batch_size=32, hidden=32),
        motion_aae=MotionAAEConfig(epochs=2, batch_size=8, hidden=16),
        relations=RelationsConfig(epochs=2, batch_size=32, pose_ceiling=5.0, motion_ceiling=50.0),
        source=SourceConfig(epochs=2, batch_size=32),
        adapt=AdaptConfig(iterations=5, batch_frames=4, batch_clips=2),
        eval=EvalConfig(ablation_stages=[[], ["LCR"]], ablation_seeds=[0, 1], n_probe=8),
    )


@pytest.fixture(scope="session")
def tiny_bank():
    return generate_motion_bank(tiny_bank_config())


@pytest.fixture(scope="session")
def pose_coder(tiny_bank):
    coder, _ = train_pose_aae(tiny_bank, PoseAAEConfig(epochs=2, batch_size=32, hidden=32))
    return coder


@pytest.fixture(scope="session")
def motion_coder(tiny_bank, pose_coder):
    coder, _ = train_motion_aae(tiny_bank, pose_coder, MotionAAEConfig(epochs=1, batch_size=8, hidden=16))
    return coder


@pytest.fixture(scope="session")
def source_style():
    return RenderStyle()


@pytest.fixture(scope="session")
def source_set(tiny_bank, source_style):
    return build_source_dataset(tiny_bank, source_style, val_fraction=0.34)


@pytest.fixture(scope="session")
def target_set(tiny_bank):
    return build_target_videos(tiny_bank, default_target_style())


@pytest.fixture
def tiny_config():
    return tiny_pipeline_config()
