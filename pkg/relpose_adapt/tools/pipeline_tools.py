"""
Pipeline Tools - 流水线编排工具

按固定顺序执行各阶段: 生成数据 -> 姿态 AAE -> 运动 AAE -> 源域编码器 -> 关系排序 -> 关系网络 -> 适配 -> 评估。
每个阶段从产物目录读取输入, 结束后写检查点并更新 reports/report.json, 因此可以从任一已完成阶段恢复。

产物目录结构:
    checkpoints/  模型检查点 (清单 + float32 参数文件)
    data/         姿态库、源域数据集、目标域视频
    reports/      report.json、loss_traces.csv、ablation.csv
    plots/        PNG 图表
    logs/         运行日志
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from ..core.alignment import FrozenComponents, ImageEncoder, adapt_target, equivariance_gap, train_source_encoder
from ..core.config import PipelineConfig, config_hash
from ..core.errors import CheckpointError, ConfigError, StageOrderError
from ..core.latent_models import (
    MotionCoder,
    PoseCoder,
    build_motion_coder,
    build_pose_coder,
    decode_plausibility_rate,
    prior_fit_stats,
    reversal_distinctness,
    train_motion_aae,
    train_pose_aae,
)
from ..core.models import AblationRow, ExperimentReport, RelationSweepRow
from ..core.relation_nets import (
    RelationNetwork,
    RelationRule,
    get_rule,
    latent_distance,
    rank_relations,
    select_relations,
    train_relation,
)
from ..core.synth_world import (
    LabeledSourceSet,
    TargetVideoSet,
    UnpairedPoseBank,
    build_source_dataset,
    build_target_videos,
    generate_motion_bank,
    render_poses,
)
from ..utils.bundle_io import (
    bank_seq_len,
    load_bank,
    load_source_set,
    load_target_set,
    save_bank,
    save_source_set,
    save_target_set,
)
from ..utils.checkpoint_io import load_state, read_manifest, save_checkpoint, verify_checkpoint
from ..utils.runtime import configure_threads, seed_everything, write_ablation_csv, write_sweep_csv, write_trace_csv
from ..utils.validators import STAGES, validate_stage_name
from .evaluation_tools import ablation_medians, ablation_rows, evaluate, evaluate_source, relation_sweep_rows

logger = logging.getLogger(__name__)

# 不属于 run-all 主流程的可选阶段
OPTIONAL_STAGES = ("ablation", "relation-sweep")
PIPELINE_STAGES = tuple(stage for stage in STAGES if stage not in OPTIONAL_STAGES)

PREREQUISITES: Dict[str, Tuple[str, ...]] = {
    "gen-data": (),
    "train-pose-aae": ("gen-data",),
    "train-motion-aae": ("train-pose-aae",),
    "train-source": ("gen-data", "train-pose-aae"),
    "rank-relations": ("train-motion-aae",),
    "train-relations": ("train-motion-aae",),
    "adapt": ("train-source", "train-relations"),
    "evaluate": ("train-source",),
    "ablation": ("train-source", "train-relations"),
    "relation-sweep": ("train-source", "train-motion-aae"),
}

DIAGNOSTIC_RULES = ("identity", "motion-identity")

# 重新执行某阶段时, 依赖其输出的阶段记录失效
_INVALIDATES = {
    **PREREQUISITES,
    "train-relations": ("train-motion-aae", "rank-relations"),
    "evaluate": ("train-source", "adapt"),
}


@dataclass(frozen=True)
class ArtifactLayout:
    """--out 目录的固定布局"""
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def report_path(self) -> Path:
        return self.reports / "report.json"

    @property
    def trace_path(self) -> Path:
        return self.reports / "loss_traces.csv"

    @property
    def ablation_path(self) -> Path:
        return self.reports / "ablation.csv"

    @property
    def sweep_path(self) -> Path:
        return self.reports / "relation_sweep.csv"

    def ensure(self) -> "ArtifactLayout":
        for path in (self.checkpoints, self.data, self.reports, self.plots, self.logs):
            path.mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / name

    def relative(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


def read_report(path: Union[str, Path]) -> ExperimentReport:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"实验报告不存在: {path}")
    return ExperimentReport.model_validate_json(path.read_text(encoding="utf-8"))


def write_report(report: ExperimentReport, path: Union[str, Path]) -> Path:
    """报告不含时间戳与绝对路径, 相同配置与种子得到逐字节相同的文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True)
    path.write_text(document + "\n", encoding="utf-8")
    return path


def dependents_of(stage: str) -> List[str]:
    """直接或间接依赖 stage 的阶段"""
    found: List[str] = []
    frontier = [stage]
    while frontier:
        current = frontier.pop()
        for name, needs in _INVALIDATES.items():
            if current in needs and name not in found:
                found.append(name)
                frontier.append(name)
    return [name for name in STAGES if name in found]


def verify_report_checkpoints(report: ExperimentReport, out_dir: Union[str, Path]) -> Tuple[bool, List[str]]:
    """
    核对报告引用的每个检查点都存在且校验和一致

    Returns:
        Tuple[bool, List[str]]: (是否完整, 错误信息列表)
    """
    errors = []
    layout = ArtifactLayout(Path(out_dir))
    for name, checksum in sorted(report.checksums.items()):
        directory = layout.checkpoint(name)
        if not verify_checkpoint(directory):
            errors.append(f"检查点缺失或损坏: {name}")
            continue
        if read_manifest(directory)["checksum"] != checksum:
            errors.append(f"检查点校验和与报告不一致: {name}")
    return len(errors) == 0, errors


class ArtifactStore:
    """从产物目录读取数据集与检查点; 模型载入后冻结或置为推理模式"""

    def __init__(self, out_dir: Union[str, Path]):
        self.layout = ArtifactLayout(Path(out_dir))

    def bank(self) -> UnpairedPoseBank:
        return load_bank(self.layout.data / "bank")

    def source_set(self) -> LabeledSourceSet:
        return load_source_set(self.layout.data / "source")

    def target_set(self) -> TargetVideoSet:
        return load_target_set(self.layout.data / "target")

    def unseen_set(self) -> Optional[TargetVideoSet]:
        directory = self.layout.data / "unseen"
        return load_target_set(directory) if directory.exists() else None

    def pose_coder(self) -> PoseCoder:
        directory = self.layout.checkpoint("pose_aae")
        coder = build_pose_coder(read_manifest(directory)["hparams"])
        load_state(directory, coder)
        return coder.freeze()

    def motion_coder(self) -> MotionCoder:
        directory = self.layout.checkpoint("motion_aae")
        coder = build_motion_coder(read_manifest(directory)["hparams"])
        load_state(directory, coder)
        return coder.freeze()

    def encoder(self, name: str) -> ImageEncoder:
        directory = self.layout.checkpoint(name)
        G = ImageEncoder(latent=read_manifest(directory)["hparams"].get("latent", 32))
        load_state(directory, G)
        G.eval()
        return G

    def relation_nets(self, slots: Iterable[str]) -> Dict[str, RelationNetwork]:
        networks = {}
        seq_len = bank_seq_len(self.layout.data / "bank")
        for slot in sorted(slots):
            directory = self.layout.checkpoint(f"relations/{slot}")
            hparams = read_manifest(directory)["hparams"]
            network = RelationNetwork(get_rule(hparams["rule"], seq_len=seq_len), hidden=hparams["hidden"])
            load_state(directory, network)
            networks[slot] = network.freeze()
        return networks


class PipelineRunner(ArtifactStore):
    """
    阶段执行器

    每个阶段开始前检查前置阶段, 以该阶段所属配置节的种子重置随机状态,
    并且只从产物目录读取输入。
    """

    def __init__(self, config: PipelineConfig, out_dir: Union[str, Path]):
        super().__init__(out_dir)
        self.config = config
        self.layout.ensure()
        self.report = self._load_or_create_report()
        configure_threads(config.runtime.single_threaded)

    # ---------- 报告与阶段记录 ----------

    def _load_or_create_report(self) -> ExperimentReport:
        digest = config_hash(self.config)
        if not self.layout.report_path.exists():
            return ExperimentReport(config_hash=digest)
        report = read_report(self.layout.report_path)
        if report.config_hash != digest:
            raise ConfigError(
                f"产物目录 {self.layout.root} 由不同的配置生成 ({report.config_hash[:12]} != {digest[:12]}), "
                f"请使用新的 --out 目录"
            )
        return report

    def save(self) -> Path:
        return write_report(self.report, self.layout.report_path)

    @property
    def completed(self) -> List[str]:
        return list(self.report.completed_stages)

    def require(self, stage: str) -> None:
        missing = [name for name in PREREQUISITES[stage] if name not in self.report.completed_stages]
        if missing:
            raise StageOrderError(f"阶段 {stage} 需要先完成: {missing}", stage=stage, missing=missing)

    def _mark_completed(self, stage: str) -> None:
        stale = [name for name in dependents_of(stage) if name in self.report.completed_stages]
        if stale:
            logger.warning(f"阶段 {stage} 重新执行, 后续阶段需要重跑: {stale}")
        kept = [name for name in self.report.completed_stages if name not in stale and name != stage]
        self.report.completed_stages = [name for name in STAGES if name in kept or name == stage]

    def _stage_seed(self, stage: str) -> int:
        sections = {
            "gen-data": self.config.bank,
            "train-pose-aae": self.config.pose_aae,
            "train-motion-aae": self.config.motion_aae,
            "train-source": self.config.source,
            "rank-relations": self.config.relations,
            "train-relations": self.config.relations,
            "adapt": self.config.adapt,
            "evaluate": self.config.eval,
            "ablation": self.config.eval,
            "relation-sweep": self.config.eval,
        }
        return sections[stage].seed

    def stage_checkpoints(self, stage: str) -> List[str]:
        if stage == "train-pose-aae":
            return ["pose_aae"]
        if stage == "train-motion-aae":
            return ["motion_aae"]
        if stage == "train-source":
            return ["source_encoder"]
        if stage == "train-relations":
            return [f"relations/{slot}" for slot in sorted(self.report.selected_rules)]
        if stage == "adapt":
            return ["adapted_encoder"]
        return []

    def stage_intact(self, stage: str) -> bool:
        """已完成阶段的检查点仍然存在且校验和与报告一致"""
        for name in self.stage_checkpoints(stage):
            directory = self.layout.checkpoint(name)
            if not verify_checkpoint(directory) or read_manifest(directory)["checksum"] != self.report.checksums.get(name):
                return False
        return True

    def run_stage(self, stage: str) -> ExperimentReport:
        """
        执行单个阶段

        Raises:
            ConfigError: 未知阶段
            StageOrderError: 前置阶段未完成
        """
        if not validate_stage_name(stage):
            raise ConfigError(f"未知阶段: {stage}")
        self.require(stage)
        handlers: Dict[str, Callable[[], None]] = {
            "gen-data": self._gen_data,
            "train-pose-aae": self._train_pose_aae,
            "train-motion-aae": self._train_motion_aae,
            "train-source": self._train_source,
            "rank-relations": self._rank_relations,
            "train-relations": self._train_relations,
            "adapt": self._adapt,
            "evaluate": self._evaluate,
            "ablation": self._ablation,
            "relation-sweep": self._relation_sweep,
        }
        seed = self._stage_seed(stage)
        seed_everything(seed)
        logger.info(f"===== 阶段 {stage} 开始 (seed={seed}) =====")
        handlers[stage]()
        self._mark_completed(stage)
        self.save()
        logger.info(f"===== 阶段 {stage} 完成 =====")
        return self.report

    def frozen_components(self) -> FrozenComponents:
        return FrozenComponents(self.pose_coder(), self.motion_coder(), self.relation_nets(self.report.selected_rules))

    def expected_checksums(self) -> Dict[str, str]:
        sums = {"pose_coder": self.report.checksums["pose_aae"], "motion_coder": self.report.checksums["motion_aae"]}
        for slot in self.report.selected_rules:
            sums[f"relation:{slot}"] = self.report.checksums[f"relations/{slot}"]
        return sums

    def _save(self, module, name: str, stage: str, seed: int, hparams: Dict[str, Any],
              extra: Optional[Dict[str, Any]] = None) -> str:
        checksum = save_checkpoint(module, self.layout.checkpoint(name), stage, seed, hparams, extra)
        self.report.checksums[name] = checksum
        return checksum

    # ---------- 各阶段 ----------

    def _gen_data(self) -> None:
        config = self.config
        workers = config.runtime.workers
        bank = generate_motion_bank(config.bank)
        save_bank(bank, self.layout.data / "bank")
        source = build_source_dataset(
            bank,
            config.styles.source,
            subset_size=config.bank.source_subset_size,
            frame_stride=config.bank.source_frame_stride,
            val_fraction=config.bank.val_fraction,
            workers=workers,
        )
        save_source_set(source, self.layout.data / "source")
        save_target_set(build_target_videos(bank, config.styles.target, workers=workers), self.layout.data / "target")
        if config.styles.unseen is not None:
            unseen = build_target_videos(bank, config.styles.unseen, workers=workers)
            save_target_set(unseen, self.layout.data / "unseen")
        for key, value in bank.summary().items():
            self.report.diagnostics[f"bank.{key}"] = float(value)
        self.report.diagnostics["source.n_samples"] = float(len(source))

    def _train_pose_aae(self) -> None:
        bank = self.bank()
        coder, log = train_pose_aae(bank, self.config.pose_aae)
        self._save(coder, "pose_aae", "train-pose-aae", log.seed, coder.hparams,
                   {"train_log": log.model_dump(mode="json")})
        self.report.train_logs["pose_aae"] = log
        probe = bank.val_poses() if len(bank.val_poses()) else bank.poses
        for key, value in prior_fit_stats(coder, probe).items():
            self.report.diagnostics[f"pose_aae.prior.{key}"] = value
        for key, value in decode_plausibility_rate(coder, 100, seed=self.config.pose_aae.seed).items():
            self.report.diagnostics[f"pose_aae.decode.{key}"] = value

    def _train_motion_aae(self) -> None:
        bank = self.bank()
        pose_coder = self.pose_coder()
        coder, log = train_motion_aae(bank, pose_coder, self.config.motion_aae)
        self._save(coder, "motion_aae", "train-motion-aae", log.seed, coder.hparams,
                   {"train_log": log.model_dump(mode="json")})
        self.report.train_logs["motion_aae"] = log
        probe = bank.val_sequences() if len(bank.val_sequences()) else bank.sequences
        self.report.diagnostics["motion_aae.reversal_distinctness"] = reversal_distinctness(pose_coder, coder, probe)

    def _train_source(self) -> None:
        source = self.source_set()
        pose_coder = self.pose_coder()
        G, log = train_source_encoder(source, pose_coder, self.config.source)
        self._save(G, "source_encoder", "train-source", log.seed, G.hparams,
                   {"train_log": log.model_dump(mode="json")})
        self.report.train_logs["source"] = log
        self.report.metrics["source/source-val"] = evaluate_source(G, pose_coder, source, self.config.eval)

    def _candidate_rules(self, seq_len: int) -> Tuple[List[RelationRule], List[RelationRule]]:
        relations = self.config.relations
        candidates = [get_rule(name, relations.theta, seq_len) for name in relations.candidates]
        diagnostics = [get_rule(name, relations.theta, seq_len) for name in DIAGNOSTIC_RULES]
        diagnostics += [get_rule(f"inplane-{theta:g}", seq_len=seq_len) for theta in relations.diagnostic_thetas]
        names = {rule.name for rule in candidates}
        return candidates, [rule for rule in diagnostics if rule.name not in names]

    def _rank_relations(self) -> None:
        bank = self.bank()
        pose_coder, motion_coder = self.pose_coder(), self.motion_coder()
        relations = self.config.relations
        candidates, diagnostics = self._candidate_rules(bank.seq_len)

        distances = {rule.name: latent_distance(rule, pose_coder, motion_coder, bank)
                     for rule in candidates + diagnostics}
        self.report.latent_distances = list(distances.values())
        ranked = rank_relations(candidates, pose_coder, motion_coder, bank, distances=distances)
        self.report.ranking = {
            space: [rule.name for rule in ranked if rule.space == space] for space in ("pose", "motion")
        }
        if relations.use_ranking:
            selected = select_relations(ranked, relations.n_pose, relations.n_motion)
        else:
            selected = {slot: get_rule(name, relations.theta, bank.seq_len) for slot, name in relations.selected.items()}
        self.report.selected_rules = {slot: rule.name for slot, rule in sorted(selected.items())}
        self.report.checksums = {name: value for name, value in self.report.checksums.items()
                                 if not name.startswith("relations/")}
        self.report.relation_fits = {}
        logger.info(f"选择的关系规则: {self.report.selected_rules}")

    def _train_relations(self) -> None:
        if "rank-relations" not in self.report.completed_stages:
            self._rank_relations()
            self._mark_completed("rank-relations")
        bank = self.bank()
        pose_coder, motion_coder = self.pose_coder(), self.motion_coder()
        relations = self.config.relations
        fits = {}
        for slot, name in sorted(self.report.selected_rules.items()):
            rule = get_rule(name, seq_len=bank.seq_len)
            network = train_relation(rule, pose_coder, motion_coder, bank, relations)
            self._save(network, f"relations/{slot}", "train-relations", relations.seed, network.hparams,
                       {"fit_report": network.fit_report.model_dump(mode="json")})
            fits[slot] = network.fit_report
        for name in DIAGNOSTIC_RULES:
            rule = get_rule(name, seq_len=bank.seq_len)
            fits[f"diagnostic:{name}"] = train_relation(rule, pose_coder, motion_coder, bank, relations).fit_report
        self.report.relation_fits = fits

    def probe_images(self) -> np.ndarray:
        """等变差距探针: 姿态库验证姿态按目标域风格渲染, 不属于适配用的目标片段"""
        bank = self.bank()
        poses = bank.val_poses() if len(bank.val_poses()) else bank.poses
        return render_poses(poses[:self.config.eval.n_probe], self.config.styles.target,
                            workers=self.config.runtime.workers)

    def _adapt(self) -> None:
        G_source = self.encoder("source_encoder")
        targets = self.target_set().unlabeled()
        frozen = self.frozen_components()
        config = self.config.adapt
        result = adapt_target(G_source, targets, frozen, config, expected_checksums=self.expected_checksums())
        self._save(result.encoder, "adapted_encoder", "adapt", config.seed, result.encoder.hparams,
                   {"adapt_mask": list(config.adapt_mask), "energies": list(config.energies)})
        write_trace_csv(self.layout.trace_path, result.traces)
        self.report.loss_traces["adapt"] = self.layout.relative(self.layout.trace_path)

        if "Z3" in frozen.relation_nets:
            network = frozen.relation_nets["Z3"]
            probe = self.probe_images()
            self.report.equivariance_gap = {
                "init": equivariance_gap(G_source, network, network.rule, probe),
                "final": equivariance_gap(result.encoder, network, network.rule, probe),
            }
            logger.info(f"等变差距: {self.report.equivariance_gap}")

    def _evaluate(self) -> None:
        pose_coder = self.pose_coder()
        config = self.config.eval
        domains = {"target": self.target_set()}
        unseen = self.unseen_set()
        if unseen is not None:
            domains["unseen"] = unseen

        encoders = {"source": self.encoder("source_encoder")}
        if "adapt" in self.report.completed_stages:
            encoders["adapt"] = self.encoder("adapted_encoder")
        for domain, dataset in domains.items():
            for stage, G in encoders.items():
                self.report.metrics[f"{stage}/{domain}"] = evaluate(G, pose_coder, dataset, config)
        self.report.metrics["oracle/target"] = evaluate(None, pose_coder, domains["target"], config)

        if "adapt/target" in self.report.metrics:
            before = self.report.metrics["source/target"].mpjpe
            after = self.report.metrics["adapt/target"].mpjpe
            self.report.diagnostics["adaptation_gain"] = (before - after) / before if before > 0 else 0.0

    def _ablation(self) -> None:
        rows = ablation_rows(
            self.encoder("source_encoder"),
            self.pose_coder(),
            self.target_set(),
            self.frozen_components(),
            self.config.adapt,
            self.config.eval,
        )
        write_ablation_csv(self.layout.ablation_path, [row.model_dump() for row in rows])
        self.report.ablation = rows
        for stage, medians in ablation_medians(rows).items():
            self.report.diagnostics[f"ablation.{stage}.median_mpjpe"] = medians["mpjpe"]
            self.report.diagnostics[f"ablation.{stage}.median_pa_mpjpe"] = medians["pa_mpjpe"]

    def _relation_sweep(self) -> None:
        rows = relation_sweep_rows(
            self.encoder("source_encoder"),
            self.pose_coder(),
            self.motion_coder(),
            self.bank(),
            self.target_set(),
            self.config.relations,
            self.config.adapt,
            self.config.eval,
        )
        write_sweep_csv(self.layout.sweep_path, [row.model_dump() for row in rows])
        self.report.relation_sweep = rows


def run_stage(config: PipelineConfig, out_dir: Union[str, Path], stage: str) -> ExperimentReport:
    return PipelineRunner(config, out_dir).run_stage(stage)


def run_pipeline(config: PipelineConfig, out_dir: Union[str, Path], resume: bool = True,
                 with_ablation: bool = False, with_sweep: bool = False) -> ExperimentReport:
    """
    按固定顺序执行全部阶段

    Args:
        config: 流水线配置
        out_dir: 产物目录
        resume: 跳过已完成且检查点完好的阶段
        with_ablation: 结束后执行消融
        with_sweep: 结束后执行关系扫描

    Returns:
        ExperimentReport: 最终报告
    """
    runner = PipelineRunner(config, out_dir)
    for stage in PIPELINE_STAGES:
        if resume and stage in runner.report.completed_stages and runner.stage_intact(stage):
            logger.info(f"阶段 {stage} 已完成, 跳过")
            continue
        runner.run_stage(stage)
    requested = {"ablation": with_ablation, "relation-sweep": with_sweep}
    for stage in OPTIONAL_STAGES:
        if requested[stage] and not (resume and stage in runner.report.completed_stages):
            runner.run_stage(stage)
    ok, errors = verify_report_checkpoints(runner.report, out_dir)
    if not ok:
        raise CheckpointError(f"报告引用的检查点不完整: {errors}")
    return runner.report


def run_ablation(config: PipelineConfig, out_dir: Union[str, Path]) -> List[AblationRow]:
    """在已训练的产物上执行累积能量消融, 写入 reports/ablation.csv"""
    return PipelineRunner(config, out_dir).run_stage("ablation").ablation


def run_relation_sweep(config: PipelineConfig, out_dir: Union[str, Path]) -> List[RelationSweepRow]:
    """逐个姿态规则单独适配, 写入 reports/relation_sweep.csv"""
    return PipelineRunner(config, out_dir).run_stage("relation-sweep").relation_sweep


def pipeline_status(out_dir: Union[str, Path]) -> Dict[str, Any]:
    """产物目录的阶段状态, 不需要配置"""
    layout = ArtifactLayout(Path(out_dir))
    if not layout.report_path.exists():
        return {"completed_stages": [], "next_stage": PIPELINE_STAGES[0], "checkpoints_ok": True, "errors": []}
    report = read_report(layout.report_path)
    remaining = [stage for stage in PIPELINE_STAGES if stage not in report.completed_stages]
    ok, errors = verify_report_checkpoints(report, out_dir)
    return {
        "config_hash": report.config_hash,
        "completed_stages": report.completed_stages,
        "next_stage": remaining[0] if remaining else None,
        "checkpoints_ok": ok,
        "errors": errors,
    }
