import json

import numpy as np
import pytest
import torch

from relpose_adapt.core.config import (
    AdaptConfig,
    EvalConfig,
    PipelineConfig,
    RenderStyle,
    StylesConfig,
    config_hash,
    config_schema,
    default_target_style,
    load_config,
)
from relpose_adapt.core.errors import CheckpointError, ConfigError, FrozenViolationError, SealedDataError
from relpose_adapt.core.latent_models import PoseCoder
from relpose_adapt.core.synth_world import build_target_videos
from relpose_adapt.utils.bundle_io import (
    SEALED_NAME,
    bank_seq_len,
    bundle_shapes,
    load_bank,
    load_source_set,
    load_target_set,
    save_bank,
    save_source_set,
    save_target_set,
)
from relpose_adapt.utils.checkpoint_io import load_state, read_manifest, save_checkpoint, verify_checkpoint
from relpose_adapt.utils.runtime import (
    progress_enabled,
    read_ablation_csv,
    read_trace_csv,
    seed_everything,
    write_ablation_csv,
    write_trace_csv,
)


# =================== 检查点 ===================

def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    coder = PoseCoder(hidden=8).freeze()
    checksum = save_checkpoint(coder, tmp_path / "pose", "train-pose-aae", 1, coder.hparams, {"note": "x"})
    assert checksum == coder.checksum()
    assert verify_checkpoint(tmp_path / "pose")

    restored = PoseCoder(**read_manifest(tmp_path / "pose")["hparams"])
    manifest = load_state(tmp_path / "pose", restored)
    assert manifest["stage"] == "train-pose-aae"
    assert manifest["seed"] == 1
    assert manifest["extra"] == {"note": "x"}
    assert restored.freeze().checksum() == checksum


def test_tampered_checkpoint_is_detected(tmp_path):
    coder = PoseCoder(hidden=8).freeze()
    save_checkpoint(coder, tmp_path, "train-pose-aae", 1, coder.hparams)
    blob = next(path for path in tmp_path.glob("*.bin"))
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    assert not verify_checkpoint(tmp_path)
    with pytest.raises(FrozenViolationError):
        load_state(tmp_path, PoseCoder(hidden=8))


def test_missing_checkpoint(tmp_path):
    assert not verify_checkpoint(tmp_path / "nothing")
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "nothing")


# =================== 数据目录 ===================

def test_bank_bundle(tmp_path, tiny_bank):
    save_bank(tiny_bank, tmp_path / "bank")
    loaded = load_bank(tmp_path / "bank")
    np.testing.assert_array_equal(loaded.poses, tiny_bank.poses)
    np.testing.assert_array_equal(loaded.target_ids, tiny_bank.target_ids)
    assert loaded.seed == tiny_bank.seed
    assert bundle_shapes(tmp_path / "bank")["long_sequences"] == (8, 60, 17, 3)


def test_bank_bundle_leaves_target_poses_out(tmp_path, tiny_bank):
    save_bank(tiny_bank, tmp_path / "bank")
    assert not (tmp_path / "bank" / "target_sequences.bin").exists()
    assert "target_sequences" not in bundle_shapes(tmp_path / "bank")
    assert bank_seq_len(tmp_path / "bank") == tiny_bank.seq_len == 30

    loaded = load_bank(tmp_path / "bank")
    assert loaded.target_sequences is None
    np.testing.assert_array_equal(loaded.target_ids, tiny_bank.target_ids)
    assert loaded.summary()["n_target_sequences"] == 4
    with pytest.raises(SealedDataError):
        build_target_videos(loaded, default_target_style())


def test_source_bundle(tmp_path, source_set):
    save_source_set(source_set, tmp_path / "source")
    loaded = load_source_set(tmp_path / "source")
    np.testing.assert_array_equal(loaded.images, source_set.images)
    np.testing.assert_array_equal(loaded.split, source_set.split)
    assert loaded.styles == source_set.styles


def test_target_bundle_keeps_ground_truth_sealed(tmp_path, target_set, tiny_bank):
    directory = save_target_set(target_set, tmp_path / "target")
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    assert SEALED_NAME not in json.dumps(manifest["arrays"])
    assert manifest["eval"]["sealed_gt"]["file"] == SEALED_NAME
    assert (directory / SEALED_NAME).exists()

    loaded = load_target_set(directory)
    np.testing.assert_array_equal(loaded.clips, target_set.clips)
    assert loaded.sealed_gt.shape == (4, 60, 17, 3)
    np.testing.assert_array_equal(loaded.sealed_gt.unseal(), tiny_bank.target_sequences)
    assert "sealed_gt" not in bundle_shapes(directory)


def test_missing_bundle(tmp_path):
    with pytest.raises(CheckpointError):
        load_bank(tmp_path)


# =================== 配置 ===================

def test_default_config():
    config = load_config(None)
    assert config == PipelineConfig()
    assert config.adapt.energies == ["LCR", "HCR", "Z3", "V2", "V3"]
    assert config.relations.theta == 15.0


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(broken)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"adapt": {"temperature": 0.1}}), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(unknown)
    assert info.value.exit_code == 2


def test_config_file_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"adapt": {"iterations": 12, "tau": 0.2}}), encoding="utf-8")
    config = load_config(path)
    assert config.adapt.iterations == 12
    assert config.adapt.term_tau("HCR") == 0.2
    assert config.bank == PipelineConfig().bank


def test_energy_terms_are_ordered_and_checked():
    assert AdaptConfig(energies=["V3", "LCR", "Z3"]).energies == ["LCR", "Z3", "V3"]
    with pytest.raises(ValueError):
        AdaptConfig(energies=["LCR", "PCR"])
    assert AdaptConfig(tau_hcr=0.5).term_tau("HCR") == 0.5
    assert AdaptConfig(tau_hcr=0.5).term_tau("LCR") == 0.1


def test_sweep_energies_need_a_single_pose_relation():
    assert EvalConfig(sweep_energies=["Z3", "LCR"]).sweep_energies == ["LCR", "Z3"]
    for energies in (["LCR", "HCR"], ["LCR", "Z3", "V2"], ["Z3", "PCR"]):
        with pytest.raises(ValueError):
            EvalConfig(sweep_energies=energies)


def test_target_style_name_must_differ():
    with pytest.raises(ValueError):
        PipelineConfig(styles=StylesConfig(target=RenderStyle(name="source")))


def test_with_seed_offsets():
    config = PipelineConfig().with_seed(100)
    assert [config.bank.seed, config.pose_aae.seed, config.motion_aae.seed, config.relations.seed,
            config.source.seed, config.adapt.seed, config.eval.seed] == list(range(100, 107))


def test_config_hash():
    assert config_hash(PipelineConfig()) == config_hash(load_config(None))
    assert config_hash(PipelineConfig()) != config_hash(PipelineConfig().with_seed(1))
    assert len(config_hash(PipelineConfig())) == 64


def test_config_schema():
    schema = config_schema()
    assert {"bank", "adapt", "relations", "eval"} <= set(schema["properties"])


# =================== 运行时 ===================

def test_trace_csv_round_trip(tmp_path):
    traces = [
        {"iteration": 0, "term": "LCR", "value": 2.0794415416798357, "seed": 5},
        {"iteration": 1, "term": "Z3", "value": 1e-06, "seed": 5},
    ]
    path = write_trace_csv(tmp_path / "traces" / "adapt.csv", traces)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "iteration,term,value,seed"
    assert read_trace_csv(path) == traces


def test_ablation_csv_round_trip(tmp_path):
    rows = [{"stage": "LCR+HCR", "seed": 0, "mpjpe": 81.25, "pa_mpjpe": 55.5}]
    assert read_ablation_csv(write_ablation_csv(tmp_path / "ablation.csv", rows)) == rows


def test_progress_disabled_by_environment():
    assert not progress_enabled()


def test_seed_everything():
    seed_everything(3)
    a = torch.rand(3)
    seed_everything(3)
    assert torch.equal(a, torch.rand(3))
