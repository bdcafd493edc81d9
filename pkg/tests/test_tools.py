import dataclasses
import inspect
import json
import os
import shutil

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_pipeline_config
from relpose_adapt import main
from relpose_adapt.core import alignment, latent_models, relation_nets
from relpose_adapt.core.config import EvalConfig
from relpose_adapt.core.errors import ConfigError, SealedDataError, StageOrderError
from relpose_adapt.core.models import AblationRow, ExperimentReport, LatentDistanceReport
from relpose_adapt.tools import report_tools
from relpose_adapt.tools.evaluation_tools import (
    SOURCE_ONLY,
    ablation_medians,
    evaluate,
    relation_sweep_rows,
    stage_label,
)
from relpose_adapt.tools.pipeline_tools import (
    PIPELINE_STAGES,
    PipelineRunner,
    dependents_of,
    pipeline_status,
    read_report,
    run_ablation,
    run_pipeline,
    run_relation_sweep,
    write_report,
)
from relpose_adapt.tools.plot_tools import emit_plots
from relpose_adapt.utils.bundle_io import load_bank
from relpose_adapt.utils.runtime import write_trace_csv


@pytest.fixture(scope="session")
def pipeline_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    run_pipeline(tiny_pipeline_config(), out)
    return out


@pytest.fixture
def pipeline_copy(pipeline_out, tmp_path):
    target = tmp_path / "copy"
    shutil.copytree(pipeline_out, target)
    return target


def _report_bytes(out):
    return (out / "reports" / "report.json").read_bytes()


# =================== 评估 ===================

def test_stage_labels():
    assert stage_label([]) == SOURCE_ONLY
    assert stage_label(["LCR", "HCR"]) == "LCR+HCR"


def test_ablation_medians_keep_row_order():
    rows = [
        AblationRow(stage="LCR", seed=0, mpjpe=80.0, pa_mpjpe=50.0),
        {"stage": SOURCE_ONLY, "seed": 0, "mpjpe": 100.0, "pa_mpjpe": 60.0},
        AblationRow(stage="LCR", seed=1, mpjpe=90.0, pa_mpjpe=40.0),
        AblationRow(stage="LCR", seed=2, mpjpe=70.0, pa_mpjpe=45.0),
    ]
    medians = ablation_medians(rows)
    assert list(medians) == ["LCR", SOURCE_ONLY]
    assert medians["LCR"] == {"mpjpe": 80.0, "pa_mpjpe": 45.0}


def test_ground_truth_shortcut(pose_coder, target_set):
    report = evaluate(None, pose_coder, target_set)
    assert report.n_samples == 8 * 30
    assert report.mpjpe >= 0.0


def test_evaluate_needs_sealed_ground_truth(pose_coder, target_set):
    with pytest.raises(SealedDataError):
        evaluate(None, pose_coder, dataclasses.replace(target_set, sealed_gt=None))
    with pytest.raises(SealedDataError):
        evaluate(None, pose_coder, target_set.unlabeled())


def test_adaptation_code_never_touches_ground_truth():
    for module in (alignment, latent_models, relation_nets):
        assert "seal" not in inspect.getsource(module).lower()
    assert "unlabeled()" in inspect.getsource(PipelineRunner._adapt)


def test_bank_directory_holds_no_target_poses(pipeline_out):
    bank_dir = pipeline_out / "data" / "bank"
    manifest = json.loads((bank_dir / "manifest.json").read_text(encoding="utf-8"))
    assert "target_sequences" not in manifest["arrays"]
    assert not (bank_dir / "target_sequences.bin").exists()

    sealed = (pipeline_out / "data" / "target" / "sealed_gt.bin").read_bytes()
    loaded = load_bank(bank_dir)
    assert loaded.target_sequences is None
    first_clip = sealed[: len(sealed) // len(loaded.target_ids)]
    for blob in bank_dir.glob("*.bin"):
        assert first_clip not in blob.read_bytes()


# =================== 图表 ===================

def test_empty_report_writes_no_plots(tmp_path):
    assert emit_plots(ExperimentReport(config_hash="0" * 64), tmp_path) == []
    assert not (tmp_path / "plots").exists()


def test_plot_metadata(tmp_path):
    traces = [
        {"iteration": 0, "term": "LCR", "value": 2.0, "seed": 5},
        {"iteration": 1, "term": "LCR", "value": 1.5, "seed": 5},
        {"iteration": 0, "term": "Z3", "value": 0.25, "seed": 5},
    ]
    write_trace_csv(tmp_path / "reports" / "loss_traces.csv", traces)
    report = ExperimentReport(
        config_hash="0" * 64,
        latent_distances=[
            LatentDistanceReport(rule="pose-flip", space="pose", mean=0.5, std=0.1, n_samples=10),
            LatentDistanceReport(rule="inplane-15", space="pose", mean=0.25, std=0.1, n_samples=10),
            LatentDistanceReport(rule="slow-backward", space="motion", mean=1.75, std=0.2, n_samples=4),
        ],
        loss_traces={"adapt": "reports/loss_traces.csv"},
        ablation=[
            AblationRow(stage=SOURCE_ONLY, seed=0, mpjpe=100.0, pa_mpjpe=60.0),
            AblationRow(stage=SOURCE_ONLY, seed=1, mpjpe=100.0, pa_mpjpe=60.0),
            AblationRow(stage="LCR", seed=0, mpjpe=80.0, pa_mpjpe=50.0),
            AblationRow(stage="LCR", seed=1, mpjpe=90.0, pa_mpjpe=52.0),
        ],
    )
    paths = emit_plots(report, tmp_path)
    assert sorted(path.name for path in paths) == sorted(
        ["latent_distance_pose.png", "latent_distance_motion.png", "loss_traces.png", "ablation.png"]
    )

    def description(name):
        return json.loads(Image.open(tmp_path / "plots" / name).text["Description"])

    assert description("latent_distance_pose.png") == {"pose-flip": 0.5, "inplane-15": 0.25}
    assert description("latent_distance_motion.png") == {"slow-backward": 1.75}
    assert description("loss_traces.png") == {"LCR": 1.5, "Z3": 0.25}
    assert description("ablation.png") == {SOURCE_ONLY: 100.0, "LCR": 85.0}


def test_missing_trace_file_is_skipped(tmp_path):
    report = ExperimentReport(
        config_hash="0" * 64,
        loss_traces={"adapt": "reports/loss_traces.csv"},
        ablation=[AblationRow(stage="LCR", seed=0, mpjpe=80.0, pa_mpjpe=50.0)],
    )
    assert [path.name for path in emit_plots(report, tmp_path)] == ["ablation.png"]


# =================== 流水线 ===================

def test_dependents():
    assert dependents_of("adapt") == ["evaluate"]
    assert dependents_of("train-relations") == ["adapt", "evaluate", "ablation"]
    assert "train-source" in dependents_of("gen-data")
    assert dependents_of("evaluate") == []


def test_pipeline_report(pipeline_out):
    report = read_report(pipeline_out / "reports" / "report.json")
    assert report.completed_stages == list(PIPELINE_STAGES)
    assert {"source/source-val", "source/target", "adapt/target", "oracle/target"} <= set(report.metrics)
    assert set(report.selected_rules) == {"Z3", "V2", "V3"}
    assert {"pose_aae", "motion_aae", "source_encoder", "adapted_encoder"} <= set(report.checksums)
    assert report.loss_traces == {"adapt": "reports/loss_traces.csv"}
    assert (pipeline_out / "reports" / "loss_traces.csv").exists()
    assert set(report.equivariance_gap) == {"init", "final"}
    assert {"diagnostic:identity", "diagnostic:motion-identity"} <= set(report.relation_fits)
    names = {row.rule for row in report.latent_distances}
    assert {"identity", "motion-identity", "inplane-5"} <= names
    assert report.ranking["pose"][0] in names


def test_pipeline_is_deterministic(pipeline_out, tmp_path):
    run_pipeline(tiny_pipeline_config(), tmp_path)
    assert _report_bytes(tmp_path) == _report_bytes(pipeline_out)


def test_resume_skips_completed_stages(pipeline_out, pipeline_copy):
    report = run_pipeline(tiny_pipeline_config(), pipeline_copy)
    assert report == read_report(pipeline_out / "reports" / "report.json")
    assert _report_bytes(pipeline_copy) == _report_bytes(pipeline_out)


def test_resume_reruns_damaged_stage(pipeline_out, pipeline_copy):
    shutil.rmtree(pipeline_copy / "checkpoints" / "adapted_encoder")
    run_pipeline(tiny_pipeline_config(), pipeline_copy)
    assert (pipeline_copy / "checkpoints" / "adapted_encoder").exists()
    assert _report_bytes(pipeline_copy) == _report_bytes(pipeline_out)


def test_rerun_invalidates_dependent_stages(pipeline_copy):
    report = PipelineRunner(tiny_pipeline_config(), pipeline_copy).run_stage("adapt")
    assert "evaluate" not in report.completed_stages
    assert report.completed_stages[-1] == "adapt"


def test_config_mismatch(pipeline_out):
    with pytest.raises(ConfigError):
        PipelineRunner(tiny_pipeline_config().with_seed(5), pipeline_out)


def test_stage_order(tmp_path, tiny_config):
    runner = PipelineRunner(tiny_config, tmp_path)
    with pytest.raises(StageOrderError) as info:
        runner.run_stage("train-source")
    assert info.value.exit_code == 3
    with pytest.raises(ConfigError):
        runner.run_stage("run-all")


def test_ablation(pipeline_copy):
    rows = run_ablation(tiny_pipeline_config(), pipeline_copy)
    assert [row.stage for row in rows] == [SOURCE_ONLY, SOURCE_ONLY, "LCR", "LCR"]
    assert [row.seed for row in rows] == [0, 1, 0, 1]
    report = read_report(pipeline_copy / "reports" / "report.json")
    assert rows[0].mpjpe == pytest.approx(report.metrics["source/target"].mpjpe)
    assert rows[0].mpjpe == rows[1].mpjpe
    assert "ablation" in report.completed_stages
    assert (pipeline_copy / "reports" / "ablation.csv").exists()
    assert f"ablation.{SOURCE_ONLY}.median_mpjpe" in report.diagnostics


def test_relation_sweep(pipeline_copy):
    rows = run_relation_sweep(tiny_pipeline_config(), pipeline_copy)
    assert [row.rule for row in rows] == ["pose-flip", "inplane-15", "flip+inplane-15"]
    report = read_report(pipeline_copy / "reports" / "report.json")
    assert report.relation_sweep == rows
    assert "relation-sweep" in report.completed_stages
    distances = {row.rule: row.mean for row in report.latent_distances}
    for row in rows:
        assert row.latent_distance == pytest.approx(distances[row.rule])
        assert row.mpjpe > 0.0
    header = (pipeline_copy / "reports" / "relation_sweep.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "rule,latent_distance,mpjpe,pa_mpjpe"
    assert "relation_sweep.png" in [path.name for path in emit_plots(report, pipeline_copy)]


def test_relation_sweep_rejects_motion_rules(pose_coder, motion_coder, tiny_bank, target_set):
    config = tiny_pipeline_config()
    with pytest.raises(ConfigError):
        relation_sweep_rows(None, pose_coder, motion_coder, tiny_bank, target_set, config.relations, config.adapt,
                            EvalConfig(sweep_rules=["slow-backward"]))


def test_status(pipeline_out, pipeline_copy, tmp_path):
    fresh = pipeline_status(tmp_path / "fresh")
    assert fresh["next_stage"] == "gen-data"
    assert fresh["completed_stages"] == []

    status = pipeline_status(pipeline_out)
    assert status["next_stage"] is None
    assert status["checkpoints_ok"]

    blob = next((pipeline_copy / "checkpoints" / "pose_aae").glob("*.bin"))
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0xFF
    blob.write_bytes(bytes(data))
    damaged = pipeline_status(pipeline_copy)
    assert not damaged["checkpoints_ok"]
    assert damaged["errors"]


# =================== MCP 工具 ===================

def test_describe_skeleton():
    result = report_tools.describeSkeleton()
    assert result["status"] == "success"
    assert len(result["joint_names"]) == 17
    assert len(result["bones"]) == 16
    assert result["seq_len"] == 30


def test_experiment_report_tool(pipeline_out, tmp_path):
    result = report_tools.getExperimentReport(str(pipeline_out))
    assert result["status"] == "success"
    assert result["report"]["completed_stages"] == list(PIPELINE_STAGES)
    assert report_tools.getExperimentReport(str(tmp_path))["error_code"] == "INVALID_OUT_DIR"


def test_latent_distance_tool(pipeline_out, tmp_path):
    result = report_tools.getLatentDistances(str(pipeline_out), "motion")
    assert result["status"] == "success"
    assert {row["space"] for row in result["latent_distances"]} == {"motion"}
    assert set(result["selected_rules"]) == {"Z3", "V2", "V3"}
    assert report_tools.getLatentDistances(str(pipeline_out), "joint")["error_code"] == "INVALID_SPACE"

    write_report(ExperimentReport(config_hash="0" * 64), tmp_path / "reports" / "report.json")
    assert report_tools.getLatentDistances(str(tmp_path))["error_code"] == "NO_LATENT_DISTANCES"
    assert report_tools.getLatentDistances(str(tmp_path / "missing"))["error_code"] == "CHECKPOINT_INVALID"


def test_evaluate_stage_tool(pipeline_out):
    result = report_tools.evaluateStage("adapt", "target", str(pipeline_out))
    assert result["status"] == "success"
    expected = read_report(pipeline_out / "reports" / "report.json").metrics["adapt/target"]
    assert result["metrics"]["mpjpe"] == pytest.approx(expected.mpjpe)
    assert result["metrics"]["auc"] == pytest.approx(expected.auc)

    assert report_tools.evaluateStage("source", "source", str(pipeline_out))["status"] == "success"
    assert report_tools.evaluateStage("final", "target", str(pipeline_out))["error_code"] == "INVALID_STAGE"
    assert report_tools.evaluateStage("adapt", "test", str(pipeline_out))["error_code"] == "INVALID_DOMAIN"
    assert report_tools.evaluateStage("adapt", "unseen", str(pipeline_out))["error_code"] == "NO_UNSEEN_DOMAIN"


def test_pipeline_status_tool(pipeline_out):
    result = report_tools.getPipelineStatus(str(pipeline_out))
    assert result["status"] == "success"
    assert result["checkpoints_ok"]


# =================== 命令行 ===================

def test_cli_schema(tmp_path, capsys):
    assert main(["schema", "--out", str(tmp_path)]) == 0
    assert "adapt" in json.loads(capsys.readouterr().out)["properties"]


def test_cli_stage_order_exit_code(tmp_path):
    assert main(["adapt", "--out", str(tmp_path / "fresh")]) == 3


def test_cli_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"adapt": {"energies": ["LCR", "PCR"]}}), encoding="utf-8")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "out")]) == 2


def test_cli_plots(pipeline_copy, capsys):
    assert main(["plots", "--out", str(pipeline_copy)]) == 0
    written = json.loads(capsys.readouterr().out)
    assert {name.rsplit("/", 1)[-1] for name in written} == {
        "latent_distance_pose.png", "latent_distance_motion.png", "loss_traces.png",
    }
    assert np.all([(pipeline_copy / "plots" / name).exists()
                   for name in ("latent_distance_pose.png", "loss_traces.png")])


# =================== 服务器配置 ===================

def test_transport_config(monkeypatch):
    from relpose_adapt.main import _run_arguments, get_transport_config

    monkeypatch.setenv("MCP_TRANSPORT", "http")
    monkeypatch.setenv("MCP_PORT", "9001")
    config = get_transport_config()
    assert config["transport"] == "streamable-http"
    assert _run_arguments(config) == {"transport": "http", "host": "127.0.0.1", "port": 9001, "path": "/mcp"}

    monkeypatch.setenv("MCP_TRANSPORT", "carrier-pigeon")
    config = get_transport_config()
    assert config["transport"] == "stdio"
    assert _run_arguments(config) == {}


def test_env_file(tmp_path, monkeypatch):
    from relpose_adapt.main import load_env_file

    env = tmp_path / ".env"
    env.write_text("# comment\nRELPOSE_TEST_A='quoted'\nRELPOSE_TEST_B = plain\n\nnot a pair\n", encoding="utf-8")
    monkeypatch.setenv("RELPOSE_TEST_B", "kept")
    monkeypatch.delenv("RELPOSE_TEST_A", raising=False)
    load_env_file(str(env))
    assert os.environ["RELPOSE_TEST_A"] == "quoted"
    assert os.environ["RELPOSE_TEST_B"] == "kept"
    monkeypatch.delenv("RELPOSE_TEST_A")
