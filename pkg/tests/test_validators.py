import numpy as np
import pytest

from relpose_adapt.utils.validators import (
    sanitize_input,
    validate_artifact_dir,
    validate_domain,
    validate_image_array,
    validate_pose_array,
    validate_rule_name,
    validate_stage_name,
)


@pytest.mark.parametrize("stage", ["gen-data", "train-pose-aae", "rank-relations", "adapt", "ablation", "relation-sweep"])
def test_valid_stage_names(stage):
    assert validate_stage_name(stage)


@pytest.mark.parametrize("stage", ["", "train", "Adapt", "run-all"])
def test_invalid_stage_names(stage):
    assert not validate_stage_name(stage)


def test_domains():
    assert validate_domain("unseen")
    assert not validate_domain("test")


@pytest.mark.parametrize("name", ["pose-flip", "flip+inplane-15", "flip+inplane-15-backward", "slow-backward",
                                  "inplane-2.5"])
def test_valid_rule_names(name):
    assert validate_rule_name(name)


@pytest.mark.parametrize("name", ["", "Pose-Flip", "flip inplane", "inplane-", "slow-backward;rm"])
def test_invalid_rule_names(name):
    assert not validate_rule_name(name)


def test_artifact_dir(tmp_path):
    valid, errors = validate_artifact_dir(tmp_path / "missing")
    assert not valid and len(errors) == 1
    for name in ("checkpoints", "data", "reports"):
        (tmp_path / name).mkdir()
    valid, errors = validate_artifact_dir(tmp_path)
    assert not valid
    assert errors == ["缺少子目录: plots"]
    (tmp_path / "plots").mkdir()
    assert validate_artifact_dir(tmp_path) == (True, [])


def test_pose_array_validation():
    assert validate_pose_array(np.zeros((2, 17, 3))) == (True, [])
    assert not validate_pose_array(np.zeros((16, 3)))[0]
    bad = np.zeros((17, 3))
    bad[3, 1] = np.nan
    assert validate_pose_array(bad)[1] == ["存在非有限坐标"]
    shifted = np.ones((17, 3))
    assert validate_pose_array(shifted)[1] == ["根关节不在原点"]
    assert not validate_pose_array([["a"]])[0]


def test_image_array_validation():
    assert validate_image_array(np.zeros((64, 64, 3), dtype=np.uint8)) == (True, [])
    valid, errors = validate_image_array(np.zeros((2, 64, 64, 3), dtype=np.float32))
    assert not valid and len(errors) == 1
    valid, errors = validate_image_array(np.zeros((32, 32, 3), dtype=np.float32))
    assert len(errors) == 2


def test_sanitize_input():
    assert sanitize_input("  out/run1  ") == "out/run1"
    assert sanitize_input("out; rm -rf `x`") == "out rm -rf x"
    assert sanitize_input(42) == "42"
