"""
Config - 流水线配置

PipelineConfig 由若干带 extra="forbid" 的 pydantic 配置节组成, 每一节都显式携带随机种子。
配置文件为 JSON, 可通过 `relpose-adapt schema` 导出 JSON Schema。
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENERGY_TERMS = ("LCR", "HCR", "Z3", "V2", "V3")

Color = Tuple[int, int, int]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RenderStyle(_Section):
    """渲染风格: 调色板、背景、光度偏置与正交相机尺度"""
    name: str = Field("source", description="风格名称")
    image_size: Literal[64] = Field(64, description="图像边长 (像素)")
    line_width: float = Field(2.2, gt=0, description="肢体线宽 (像素)")
    joint_radius: float = Field(1.6, gt=0, description="关节圆盘半径 (像素)")
    limb_color: Color = Field((230, 230, 230), description="肢体颜色")
    joint_color: Color = Field((255, 80, 80), description="关节颜色")
    background_color: Color = Field((20, 20, 30), description="背景颜色")
    background_mode: Literal["flat", "texture"] = Field("flat", description="背景模式")
    texture_strength: float = Field(0.0, ge=0, description="纹理强度 (像素值)")
    texture_seed: int = Field(0, description="纹理随机种子")
    brightness: float = Field(0.0, description="亮度偏移 (像素值)")
    contrast: float = Field(1.0, gt=0, description="对比度倍数")
    scale: float = Field(24.0, gt=0, description="米到像素的尺度")
    depth_range: float = Field(1.0, gt=0, description="深度亮度编码的范围 (米)")


def default_target_style() -> RenderStyle:
    return RenderStyle(
        name="target",
        limb_color=(90, 200, 120),
        joint_color=(250, 220, 60),
        background_color=(110, 90, 70),
        background_mode="texture",
        texture_strength=28.0,
        texture_seed=7,
        brightness=-12.0,
        contrast=0.8,
    )


class BankConfig(_Section):
    """无配对姿态库与源/目标划分"""
    n_poses: int = Field(5000, ge=1, description="单帧姿态数 N")
    n_sequences: int = Field(200, ge=1, description="长度 T 的序列数 M")
    n_long_sequences: int = Field(100, ge=0, description="长度 2T 的序列数 M_long")
    n_source_sequences: int = Field(60, ge=1, description="带标签源域序列数")
    n_target_sequences: int = Field(48, ge=1, description="目标域长序列数 (每条切成两个长度 T 的片段)")
    n_sinusoids: int = Field(2, ge=0, description="每个自由度的正弦分量个数 K")
    freq_range: Tuple[float, float] = Field((0.1, 2.0), description="频率范围 (Hz)")
    amplitude_scale: float = Field(0.35, ge=0, description="振幅相对关节活动范围的比例")
    walk_std: float = Field(0.004, ge=0, description="每帧随机游走标准差 (弧度)")
    max_radius: float = Field(1.2, gt=0, description="任一关节到根关节的最大距离 (米)")
    smoothness_limit: float = Field(0.15, gt=0, description="相邻帧最大关节位移 (米)")
    max_rejection_rate: float = Field(0.9, gt=0, lt=1, description="最大拒绝率")
    val_fraction: float = Field(0.1, ge=0, lt=1, description="验证集比例")
    source_frame_stride: int = Field(2, ge=1, description="源域取帧步长")
    source_subset_size: Optional[int] = Field(None, ge=1, description="源域样本数上限")
    seed: int = Field(0, description="随机种子")

    @field_validator("freq_range")
    @classmethod
    def _check_freq(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.1 <= low <= high <= 2.0:
            raise ValueError(f"频率范围必须在 [0.1, 2.0] Hz 内: {value}")
        return value


class StylesConfig(_Section):
    """源域 (可多个)、目标域与未见域风格"""
    source: List[RenderStyle] = Field(default_factory=lambda: [RenderStyle()], min_length=1)
    target: RenderStyle = Field(default_factory=default_target_style)
    unseen: Optional[RenderStyle] = Field(None, description="仅用于泛化评估的未见域风格")


class PoseAAEConfig(_Section):
    """姿态对抗自编码器"""
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-4, gt=0)
    critic_lr: float = Field(1e-4, gt=0)
    adv_weight: float = Field(0.01, ge=0, description="重建:对抗 = 1:adv_weight")
    critic_steps: int = Field(1, ge=1, description="每次生成器更新对应的判别器更新次数")
    hidden: int = Field(256, ge=1)
    patience: int = Field(20, ge=1, description="发散检测窗口 (epoch)")
    val_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = Field(1)


class MotionAAEConfig(_Section):
    """运动对抗自编码器"""
    epochs: int = Field(300, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    critic_lr: float = Field(1e-4, gt=0)
    adv_weight: float = Field(0.01, ge=0)
    prior: Literal["normal", "uniform", "none"] = Field("normal", description="运动嵌入先验")
    hidden: int = Field(128, ge=1)
    long_views: bool = Field(True, description="训练数据加入长序列的 15FPS 锚视图与中间窗口")
    patience: int = Field(30, ge=1)
    seed: int = Field(2)


class RelationsConfig(_Section):
    """关系网络"""
    theta: float = Field(15.0, description="平面内旋转角 (度)")
    candidates: List[str] = Field(
        default_factory=lambda: [
            "pose-flip", "inplane", "flip+inplane",
            "flip-backward", "flip+inplane-backward", "slow-backward",
        ],
        description="候选规则 (旋转类规则使用 theta)",
    )
    diagnostic_thetas: List[float] = Field(default_factory=lambda: [5.0], description="仅计算潜空间距离的额外平面内旋转角")
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    pose_ceiling: float = Field(0.25, gt=0, description="姿态规则验证误差上限 (每分量)")
    motion_ceiling: float = Field(0.5, gt=0, description="运动规则验证误差上限 (每分量)")
    n_pose: int = Field(1, ge=0, description="选择的姿态规则数")
    n_motion: int = Field(2, ge=0, description="选择的运动规则数")
    use_ranking: bool = Field(True, description="按潜空间距离排序选择规则, 否则使用 selected")
    selected: Dict[str, str] = Field(
        default_factory=lambda: {"Z3": "flip+inplane", "V2": "flip+inplane-backward", "V3": "slow-backward"},
        description="能量项槽位 -> 规则 (use_ranking=false 时生效)",
    )
    seed: int = Field(3)


class SourceConfig(_Section):
    """源域编码器 G^s"""
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    patience: int = Field(10, ge=1)
    seed: int = Field(4)


class AdaptConfig(_Section):
    """目标域适配"""
    tau: float = Field(0.1, gt=0, description="温度")
    tau_hcr: Optional[float] = Field(None, gt=0, description="HCR 单独温度, 默认与 tau 共享")
    iterations: int = Field(3000, ge=0, description="能量项步数预算")
    energies: List[str] = Field(default_factory=lambda: list(ENERGY_TERMS), description="启用的能量项 (按固定轮转顺序)")
    lr: Dict[str, float] = Field(default_factory=lambda: {name: 1e-4 for name in ENERGY_TERMS})
    weights: Dict[str, float] = Field(default_factory=lambda: {name: 1.0 for name in ENERGY_TERMS})
    batch_frames: int = Field(8, ge=2, description="单帧对比批大小")
    batch_clips: int = Field(8, ge=2, description="片段批大小")
    adapt_mask: List[Literal["stem", "mid", "head"]] = Field(default_factory=lambda: ["mid"])
    normalize_embeddings: bool = Field(True, description="对比损失前 L2 归一化")
    energy_norm: Literal["l2", "l1"] = Field("l2", description="非局部能量使用的范数")
    augment_strength: float = Field(1.0, ge=0)
    prefetch: int = Field(0, ge=0, description=">0 时启用单生产者预取线程与有界队列")
    seed: int = Field(5)

    @field_validator("energies")
    @classmethod
    def _check_energies(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in ENERGY_TERMS]
        if unknown:
            raise ValueError(f"未知能量项: {unknown}")
        return [name for name in ENERGY_TERMS if name in value]

    def term_tau(self, name: str) -> float:
        if name == "HCR" and self.tau_hcr is not None:
            return self.tau_hcr
        return self.tau


class EvalConfig(_Section):
    """评估与消融"""
    pck_threshold: float = Field(150.0, gt=0)
    n_thresholds: int = Field(30, ge=1)
    ablation_stages: List[List[str]] = Field(
        default_factory=lambda: [[], ["LCR"], ["LCR", "HCR"], ["LCR", "HCR", "Z3"],
                                 ["LCR", "HCR", "Z3", "V2"], list(ENERGY_TERMS)],
    )
    ablation_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    n_probe: int = Field(64, ge=1, description="等变差距探针图像数")
    sweep_rules: List[str] = Field(
        default_factory=lambda: ["pose-flip", "inplane", "flip+inplane"],
        description="关系扫描: 逐个作为唯一姿态关系 (Z3 槽位) 驱动适配的规则",
    )
    sweep_energies: List[str] = Field(default_factory=lambda: ["LCR", "HCR", "Z3"], description="关系扫描使用的能量项")
    seed: int = Field(6)

    @field_validator("sweep_energies")
    @classmethod
    def _check_sweep_energies(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in ENERGY_TERMS]
        if unknown:
            raise ValueError(f"未知能量项: {unknown}")
        if "Z3" not in value or "V2" in value or "V3" in value:
            raise ValueError("关系扫描的能量项必须包含 Z3, 且不能包含 V2 / V3")
        return [name for name in ENERGY_TERMS if name in value]


class RuntimeConfig(_Section):
    """运行时"""
    single_threaded: bool = Field(True, description="单线程确定性模式")
    workers: int = Field(0, ge=0, description="数据生成线程数 (0 表示串行)")


class PipelineConfig(_Section):
    """完整流水线配置"""
    bank: BankConfig = Field(default_factory=BankConfig)
    styles: StylesConfig = Field(default_factory=StylesConfig)
    pose_aae: PoseAAEConfig = Field(default_factory=PoseAAEConfig)
    motion_aae: MotionAAEConfig = Field(default_factory=MotionAAEConfig)
    relations: RelationsConfig = Field(default_factory=RelationsConfig)
    source: SourceConfig = Field(default_factory=SourceConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    @model_validator(mode="after")
    def _check_sources(self) -> "PipelineConfig":
        names = [style.name for style in self.styles.source]
        if self.styles.target.name in names:
            raise ValueError(f"目标域风格名称与源域重复: {self.styles.target.name}")
        return self

    def with_seed(self, seed: int) -> "PipelineConfig":
        """把所有配置节的种子改为 seed + 固定偏移"""
        data = self.model_dump()
        for offset, section in enumerate(SEEDED_SECTIONS):
            data[section]["seed"] = seed + offset
        return PipelineConfig.model_validate(data)


SEEDED_SECTIONS = ("bank", "pose_aae", "motion_aae", "relations", "source", "adapt", "eval")


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    读取 JSON 配置

    Args:
        path: 配置文件路径, None 时返回默认配置

    Returns:
        PipelineConfig: 校验后的配置

    Raises:
        ConfigError: 文件不存在、JSON 非法或字段校验失败
    """
    if path is None:
        logger.info("未指定配置文件, 使用默认配置")
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        config = PipelineConfig.model_validate(data)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 JSON 解析错误: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e
    logger.info(f"配置加载完成: {path}")
    return config


def config_hash(config: PipelineConfig) -> str:
    """配置的规范 JSON 的 sha256"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_schema() -> dict:
    """配置的 JSON Schema"""
    return PipelineConfig.model_json_schema()
