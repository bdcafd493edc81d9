"""
Synth World - 合成火柴人世界

负责三件事:
1. 用前向运动学从随机 MotionScript 生成无配对姿态库 (单帧姿态、长度 T / 2T 的序列);
2. 用正交居中相机把姿态渲染为 64x64x3 图像, 源域与目标域只在风格 (调色板、纹理、光度) 上不同;
3. 提供所有关系变换在图像空间的对应操作, 以及只改变光度的数据增强。

相机正交且以骨盆为中心, 因此图像水平翻转 / 直角旋转与姿态翻转 / 平面内旋转逐像素一致。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from .config import BankConfig, RenderStyle
from .errors import ConfigError, RenderError, SealedDataError, ShapeError, SplitError, UnknownRuleError
from .pose_geometry import (
    BONE_LENGTHS,
    BONES,
    DEFAULT_THETA,
    FRAME_RATE,
    N_JOINTS,
    PARENT_INDEX,
    SEQ_LEN,
    check_pose_shape,
    slow_backward_indices,
)

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
IMAGE_RULES = ("z0", "z1", "z2", "z3", "v0", "v1", "v2", "v3")

# T 姿态下每根骨骼 (以子关节索引) 的静止方向
_REST_DIRECTIONS = np.array([
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.8, 0.6], [0.0, 0.9, -0.4359],
    [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0],
])
_REST_OFFSETS = (
    _REST_DIRECTIONS / np.maximum(np.linalg.norm(_REST_DIRECTIONS, axis=1, keepdims=True), 1e-12)
    * np.array(BONE_LENGTHS)[:, None]
)

_AXES = {"x": 0, "y": 1, "z": 2}

# 左侧 / 躯干自由度: (骨骼子关节, 轴, 下限, 上限), 弧度; 索引 0 为根朝向
_LEFT_AND_TRUNK_DOFS = [
    (0, "x", -0.15, 0.15), (0, "y", -0.5, 0.5), (0, "z", -0.1, 0.1),
    (7, "x", -0.2, 0.5), (7, "y", -0.4, 0.4), (7, "z", -0.25, 0.25),
    (8, "x", -0.1, 0.2), (8, "z", -0.1, 0.1),
    (9, "x", -0.3, 0.4), (9, "y", -0.6, 0.6), (9, "z", -0.3, 0.3),
    (5, "x", -1.2, 0.4), (5, "y", -0.3, 0.3), (5, "z", -0.1, 0.5),
    (6, "x", 0.0, 1.6),
    (11, "y", -0.15, 0.15), (11, "z", -0.15, 0.15),
    (12, "x", -0.5, 0.5), (12, "y", -1.2, 0.5), (12, "z", -1.45, 0.9),
    (13, "y", -1.8, 0.0),
]
_MIRROR = {5: 2, 6: 3, 11: 14, 12: 15, 13: 16}


def _build_dof_table() -> List[Tuple[int, int, float, float]]:
    table = []
    for joint, axis, low, high in _LEFT_AND_TRUNK_DOFS:
        table.append((joint, _AXES[axis], low, high))
        if joint in _MIRROR:
            # 镜像: 绕 y / z 轴的角度取反, 绕 x 轴不变
            if axis == "x":
                table.append((_MIRROR[joint], 0, low, high))
            else:
                table.append((_MIRROR[joint], _AXES[axis], -high, -low))
    return table


DOF_TABLE = _build_dof_table()
N_DOFS = len(DOF_TABLE)
_DOF_LOW = np.array([row[2] for row in DOF_TABLE])
_DOF_HIGH = np.array([row[3] for row in DOF_TABLE])


# =================== 运动脚本与前向运动学 ===================

@dataclass(frozen=True)
class MotionScript:
    """
    关节角轨迹参数: angle(t) = base + sum_k A_k sin(2π f_k t + φ_k) + 随机游走,
    最终裁剪到每个自由度的活动范围内。
    """
    base: np.ndarray
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    walk_std: float
    duration: int
    seed: int
    start_time: float = 0.0

    def angles(self, frame_rate: float = FRAME_RATE) -> np.ndarray:
        """返回形如 (duration, N_DOFS) 的关节角"""
        t = self.start_time + np.arange(self.duration) / frame_rate
        waves = self.amplitudes[None] * np.sin(
            2.0 * np.pi * self.frequencies[None] * t[:, None, None] + self.phases[None]
        )
        rng = np.random.default_rng(self.seed)
        walk = np.cumsum(rng.normal(0.0, 1.0, size=(self.duration, N_DOFS)) * self.walk_std, axis=0)
        angles = self.base[None] + waves.sum(axis=-1) + walk
        return np.clip(angles, _DOF_LOW, _DOF_HIGH)


def sample_motion_script(rng: np.random.Generator, config: BankConfig, duration: int,
                         start_time: float = 0.0) -> MotionScript:
    """从配置的参数范围采样一个运动脚本"""
    k = config.n_sinusoids
    half_range = (_DOF_HIGH - _DOF_LOW) / 2.0
    low_f, high_f = config.freq_range
    return MotionScript(
        base=rng.uniform(_DOF_LOW, _DOF_HIGH),
        amplitudes=rng.uniform(0.0, 1.0, size=(N_DOFS, k)) * config.amplitude_scale * half_range[:, None],
        frequencies=rng.uniform(low_f, high_f, size=(N_DOFS, k)),
        phases=rng.uniform(0.0, 2.0 * np.pi, size=(N_DOFS, k)),
        walk_std=config.walk_std,
        duration=duration,
        seed=int(rng.integers(0, 2 ** 31 - 1)),
        start_time=start_time,
    )


def forward_kinematics(angles: np.ndarray) -> np.ndarray:
    """
    前向运动学

    Args:
        angles: 形如 (..., N_DOFS) 的关节角 (弧度)

    Returns:
        np.ndarray: 形如 (..., 17, 3) 的根相对姿态
    """
    angles = np.asarray(angles, dtype=np.float64)
    lead = angles.shape[:-1]
    euler = np.zeros(lead + (N_JOINTS, 3))
    for d, (joint, axis, _, _) in enumerate(DOF_TABLE):
        euler[..., joint, axis] = angles[..., d]
    local = Rotation.from_euler("xyz", euler.reshape(-1, 3)).as_matrix().reshape(lead + (N_JOINTS, 3, 3))

    chain = np.empty_like(local)
    positions = np.zeros(lead + (N_JOINTS, 3))
    chain[..., 0, :, :] = local[..., 0, :, :]
    for joint in range(1, N_JOINTS):
        parent = PARENT_INDEX[joint]
        chain[..., joint, :, :] = chain[..., parent, :, :] @ local[..., joint, :, :]
        positions[..., joint, :] = positions[..., parent, :] + chain[..., joint, :, :] @ _REST_OFFSETS[joint]
    return positions


# =================== 姿态库 ===================

@dataclass
class UnpairedPoseBank:
    """无配对姿态库; 所有数组均为 float32, split 中 0 表示训练、1 表示验证"""
    poses: np.ndarray
    pose_split: np.ndarray
    sequences: np.ndarray
    sequence_ids: np.ndarray
    sequence_split: np.ndarray
    long_sequences: np.ndarray
    long_sequence_ids: np.ndarray
    long_split: np.ndarray
    source_sequences: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    seed: int
    seq_len: int = SEQ_LEN
    # 目标域真值只在内存中存在, 落盘时只写入 sealed_gt.bin
    target_sequences: Optional[np.ndarray] = field(default=None, repr=False)

    def train_poses(self) -> np.ndarray:
        return self.poses[self.pose_split == 0]

    def val_poses(self) -> np.ndarray:
        return self.poses[self.pose_split == 1]

    def train_sequences(self) -> np.ndarray:
        return self.sequences[self.sequence_split == 0]

    def val_sequences(self) -> np.ndarray:
        return self.sequences[self.sequence_split == 1]

    def train_long_sequences(self) -> np.ndarray:
        return self.long_sequences[self.long_split == 0]

    def val_long_sequences(self) -> np.ndarray:
        return self.long_sequences[self.long_split == 1]

    def summary(self) -> dict:
        return {
            "n_poses": int(len(self.poses)),
            "n_sequences": int(len(self.sequences)),
            "n_long_sequences": int(len(self.long_sequences)),
            "n_source_sequences": int(len(self.source_sequences)),
            "n_target_sequences": int(len(self.target_ids)),
            "seed": self.seed,
        }


def _max_step(frames: np.ndarray) -> np.ndarray:
    if frames.shape[-3] < 2:
        return np.zeros(frames.shape[:-3])
    steps = np.linalg.norm(np.diff(frames, axis=-3), axis=-1)
    return steps.max(axis=(-1, -2))


def _sample_partition(rng: np.random.Generator, config: BankConfig, count: int, duration: int,
                      name: str, random_start: bool = False, batch: int = 64) -> np.ndarray:
    """拒绝采样一个分区, 返回 (count, duration, 17, 3)"""
    accepted: List[np.ndarray] = []
    attempts = 0
    while sum(len(a) for a in accepted) < count:
        scripts = [
            sample_motion_script(rng, config, duration, rng.uniform(0.0, 10.0) if random_start else 0.0)
            for _ in range(batch)
        ]
        angles = np.stack([script.angles() for script in scripts])
        frames = forward_kinematics(angles)
        radius = np.linalg.norm(frames, axis=-1).max(axis=(-1, -2))
        ok = (radius <= config.max_radius) & (_max_step(frames) <= config.smoothness_limit)
        accepted.append(frames[ok])
        attempts += batch
        n_ok = sum(len(a) for a in accepted)
        if attempts >= 4 * batch and 1.0 - n_ok / attempts > config.max_rejection_rate:
            raise ConfigError(
                f"分区 {name} 拒绝率 {1.0 - n_ok / attempts:.1%} 超过上限 {config.max_rejection_rate:.0%}, 参数范围不合理",
                partition=name,
            )
    frames = np.concatenate(accepted)[:count]
    logger.debug(f"分区 {name}: 接受 {count} 条, 尝试 {attempts} 次")
    return frames.astype(np.float32)


def _split_tags(rng: np.random.Generator, count: int, val_fraction: float) -> np.ndarray:
    tags = np.zeros(count, dtype=np.uint8)
    n_val = int(round(count * val_fraction))
    if count > 1:
        n_val = min(n_val, count - 1)
        tags[rng.permutation(count)[:n_val]] = 1
    return tags


def generate_motion_bank(config: BankConfig, seed: Optional[int] = None) -> UnpairedPoseBank:
    """
    生成无配对姿态库

    Args:
        config: 姿态库配置
        seed: 随机种子, None 时使用 config.seed

    Returns:
        UnpairedPoseBank: 给定 (config, seed) 时逐字节确定

    Raises:
        ConfigError: 任一分区的拒绝率超过上限
    """
    seed = config.seed if seed is None else seed
    T = SEQ_LEN
    logger.info(f"开始生成姿态库: N={config.n_poses}, M={config.n_sequences}, seed={seed}")

    def stream(index: int) -> np.random.Generator:
        return np.random.default_rng([seed, index])

    poses = _sample_partition(stream(0), config, config.n_poses, 1, "poses", random_start=True)[:, 0]
    sequences = _sample_partition(stream(1), config, config.n_sequences, T, "sequences")
    if config.n_long_sequences:
        long_sequences = _sample_partition(stream(2), config, config.n_long_sequences, 2 * T, "long_sequences")
    else:
        long_sequences = np.zeros((0, 2 * T, N_JOINTS, 3), dtype=np.float32)
    source = _sample_partition(stream(3), config, config.n_source_sequences, T, "source")
    target = _sample_partition(stream(4), config, config.n_target_sequences, 2 * T, "target")

    # 所有分区的序列 id 全局唯一
    offsets = np.cumsum([0, len(sequences), len(long_sequences), len(source), len(target)])
    split_rng = stream(5)
    bank = UnpairedPoseBank(
        poses=poses,
        pose_split=_split_tags(split_rng, len(poses), config.val_fraction),
        sequences=sequences,
        sequence_ids=np.arange(offsets[0], offsets[1]),
        sequence_split=_split_tags(split_rng, len(sequences), config.val_fraction),
        long_sequences=long_sequences,
        long_sequence_ids=np.arange(offsets[1], offsets[2]),
        long_split=_split_tags(split_rng, len(long_sequences), config.val_fraction),
        source_sequences=source,
        source_ids=np.arange(offsets[2], offsets[3]),
        target_sequences=target,
        target_ids=np.arange(offsets[3], offsets[4]),
        seed=seed,
    )
    logger.info(f"姿态库生成完成: {bank.summary()}")
    return bank


# =================== 渲染 ===================

@lru_cache(maxsize=16)
def _pixel_grid(size: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    # 像素中心: 列 -> x, 行 -> y (向上为正)
    centre = (size - 1) / 2.0
    index = np.arange(size, dtype=np.float64)
    return (index - centre) / scale, (centre - index) / scale


@lru_cache(maxsize=16)
def _background(size: int, color: Tuple[int, int, int], mode: str, strength: float, seed: int) -> np.ndarray:
    base = np.broadcast_to(np.array(color, dtype=np.float64), (size, size, 3)).copy()
    if mode == "texture" and strength > 0:
        noise = np.random.default_rng(seed).normal(size=(size, size, 3)).astype(np.float32)
        blurred = cv2.GaussianBlur(noise, (0, 0), sigmaX=3.0).astype(np.float64)
        blurred /= max(float(blurred.std()), 1e-6)
        base += strength * blurred
    base.setflags(write=False)
    return base


def _style_background(style: RenderStyle) -> np.ndarray:
    return _background(style.image_size, tuple(style.background_color), style.background_mode,
                       float(style.texture_strength), int(style.texture_seed))


def _check_in_frame(pose: np.ndarray, style: RenderStyle) -> None:
    margin = max(style.line_width / 2.0, style.joint_radius)
    extent = np.abs(pose[:, :2]).max() * style.scale + margin
    if not np.isfinite(extent) or extent > style.image_size / 2.0:
        raise RenderError(f"姿态超出画面: 最大范围 {extent:.1f} px, 画面半宽 {style.image_size / 2.0} px")


def _depth_shade(z: np.ndarray, depth_range: float) -> np.ndarray:
    return 0.45 + 0.55 * np.clip(0.5 + z / (2.0 * depth_range), 0.0, 1.0)


def _layers(pose: np.ndarray, style: RenderStyle) -> Tuple[np.ndarray, np.ndarray]:
    """返回肢体与关节的亮度层 (H, W), 0 表示未覆盖"""
    xs, ys = _pixel_grid(style.image_size, float(style.scale))
    X = xs[None, None, :]
    Y = ys[None, :, None]

    parents = np.array([p for p, _ in BONES])
    children = np.array([c for _, c in BONES])
    a = pose[parents][:, :, None, None]
    b = pose[children][:, :, None, None]
    abx, aby = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    dx, dy = X - a[:, 0], Y - a[:, 1]
    denom = np.maximum(abx * abx + aby * aby, 1e-12)
    t = np.clip((dx * abx + dy * aby) / denom, 0.0, 1.0)
    ex, ey = dx - t * abx, dy - t * aby
    half_width = style.line_width / 2.0 / style.scale
    depth = a[:, 2] + t * (b[:, 2] - a[:, 2])
    covered = ex * ex + ey * ey <= half_width * half_width
    limb = np.where(covered, _depth_shade(depth, style.depth_range), 0.0).max(axis=0)

    j = pose[:, :, None, None]
    jx, jy = X - j[:, 0], Y - j[:, 1]
    radius = style.joint_radius / style.scale
    on_joint = jx * jx + jy * jy <= radius * radius
    joints = np.where(on_joint, _depth_shade(j[:, 2], style.depth_range), 0.0).max(axis=0)
    return limb, joints


def limb_mask(y: np.ndarray, style: RenderStyle) -> np.ndarray:
    """渲染几何掩码: 被肢体或关节覆盖的像素"""
    pose = check_pose_shape(np.asarray(y, dtype=np.float64))
    if pose.ndim != 2:
        raise ShapeError(f"limb_mask 只接受单个姿态, 当前: {pose.shape}")
    limb, joints = _layers(pose, style)
    return (limb > 0) | (joints > 0)


def render_pose(y: np.ndarray, style: RenderStyle) -> np.ndarray:
    """
    渲染单个姿态

    正交投影 (x, y), z 以亮度编码; 肢体为线段, 关节为圆盘, 关节层覆盖肢体层。

    Args:
        y: 形如 (17, 3) 的根相对姿态
        style: 渲染风格

    Returns:
        np.ndarray: (64, 64, 3) uint8

    Raises:
        RenderError: 姿态超出画面
    """
    pose = check_pose_shape(np.asarray(y, dtype=np.float64))
    if pose.ndim != 2:
        raise ShapeError(f"render_pose 只接受单个姿态, 当前: {pose.shape}")
    _check_in_frame(pose, style)
    limb, joints = _layers(pose, style)

    image = _style_background(style).copy()
    image = np.where((limb > 0)[..., None], np.array(style.limb_color) * limb[..., None], image)
    image = np.where((joints > 0)[..., None], np.array(style.joint_color) * joints[..., None], image)
    image = (image - 127.5) * style.contrast + 127.5 + style.brightness
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def render_poses(poses: np.ndarray, style: RenderStyle, workers: int = 0) -> np.ndarray:
    """
    批量渲染, 输出形状为 poses.shape[:-2] + (64, 64, 3)

    workers > 0 时按顺序分片并行, 结果与串行一致。
    """
    poses = check_pose_shape(np.asarray(poses))
    lead = poses.shape[:-2]
    flat = poses.reshape(-1, N_JOINTS, 3)
    if workers > 0 and len(flat) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(lambda p: render_pose(p, style), flat))
    else:
        frames = [render_pose(p, style) for p in flat]
    size = style.image_size
    if not frames:
        return np.zeros(lead + (size, size, 3), dtype=np.uint8)
    return np.stack(frames).reshape(lead + (size, size, 3))


# =================== 数据集 ===================

@dataclass
class LabeledSourceSet:
    """带标签的源域图像-姿态对; split 按序列划分 (0 训练, 1 验证)"""
    images: np.ndarray
    poses: np.ndarray
    sequence_ids: np.ndarray
    style_index: np.ndarray
    split: np.ndarray
    styles: List[RenderStyle]

    def __len__(self) -> int:
        return int(len(self.images))

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == 0)

    def val_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == 1)


class SealedGroundTruth:
    """
    密封的目标域真值

    内存中持有或指向 sealed_gt.bin; 只有评估路径调用 unseal()。
    """

    __slots__ = ("_frames", "_path", "_shape")

    def __init__(self, frames: Optional[np.ndarray] = None, path: Optional[Union[str, Path]] = None,
                 shape: Optional[Sequence[int]] = None):
        if frames is None and path is None:
            raise SealedDataError("密封真值需要数组或文件路径")
        self._frames = None if frames is None else np.asarray(frames, dtype=np.float32)
        self._path = None if path is None else Path(path)
        self._shape = tuple(shape) if shape is not None else (None if frames is None else self._frames.shape)

    @property
    def shape(self) -> Optional[Tuple[int, ...]]:
        return self._shape

    def unseal(self) -> np.ndarray:
        """取出长度为 2T 的目标域真值序列 (Q, 2T, 17, 3)"""
        if self._frames is not None:
            return self._frames
        if self._path is None or not self._path.exists():
            raise SealedDataError(f"密封真值文件缺失: {self._path}")
        data = np.fromfile(self._path, dtype="<f4")
        if self._shape is None or int(np.prod(self._shape)) != data.size:
            raise SealedDataError(f"密封真值大小与声明形状不符: {data.size} vs {self._shape}")
        return data.reshape(self._shape)

    def __repr__(self) -> str:
        return f"SealedGroundTruth(shape={self._shape})"


@dataclass
class UnlabeledTargetClips:
    """适配阶段可见的目标域视图: 只有像素与序列 id"""
    clips: np.ndarray
    long_clips: np.ndarray
    clip_sequence_ids: np.ndarray
    long_sequence_ids: np.ndarray

    @property
    def frames(self) -> np.ndarray:
        return self.clips.reshape((-1,) + self.clips.shape[-3:])

    @property
    def frame_sequence_ids(self) -> np.ndarray:
        return np.repeat(self.clip_sequence_ids, self.clips.shape[1])


@dataclass
class TargetVideoSet:
    """
    目标域视频

    long_clips 为 2T 帧的长片段, clips 为每个长片段切成的两个 T 帧窗口。
    """
    clips: np.ndarray
    long_clips: np.ndarray
    clip_sequence_ids: np.ndarray
    long_sequence_ids: np.ndarray
    style: RenderStyle
    sealed_gt: SealedGroundTruth = field(repr=False)

    def unlabeled(self) -> UnlabeledTargetClips:
        return UnlabeledTargetClips(
            clips=self.clips,
            long_clips=self.long_clips,
            clip_sequence_ids=self.clip_sequence_ids,
            long_sequence_ids=self.long_sequence_ids,
        )


def build_source_dataset(bank: UnpairedPoseBank, styles: Union[RenderStyle, Sequence[RenderStyle]],
                         subset_size: Optional[int] = None, frame_stride: int = 2,
                         val_fraction: float = 0.1, workers: int = 0) -> LabeledSourceSet:
    """
    渲染带标签的源域数据集

    源域序列按轮转方式分配到各个源域风格; 训练/验证按序列划分。

    Args:
        bank: 姿态库
        styles: 一个或多个源域风格
        subset_size: 样本数上限, None 表示全部
        frame_stride: 每条序列的取帧步长
        val_fraction: 验证序列比例
        workers: 渲染线程数

    Raises:
        SplitError: 源域序列 id 与目标域重叠
    """
    styles = [styles] if isinstance(styles, RenderStyle) else list(styles)
    overlap = set(bank.source_ids.tolist()) & set(bank.target_ids.tolist())
    if overlap:
        raise SplitError(f"源域与目标域共享序列 id: {sorted(overlap)[:5]}")

    n_seq = len(bank.source_sequences)
    seq_split = _split_tags(np.random.default_rng([bank.seed, 11]), n_seq, val_fraction)
    frame_index = np.arange(0, bank.seq_len, frame_stride)
    poses = bank.source_sequences[:, frame_index].reshape(-1, N_JOINTS, 3)
    seq_of = np.repeat(np.arange(n_seq), len(frame_index))
    if subset_size is not None:
        if subset_size > len(poses):
            raise ConfigError(f"源域样本数上限 {subset_size} 超过可用帧数 {len(poses)}")
        poses, seq_of = poses[:subset_size], seq_of[:subset_size]

    style_index = (seq_of % len(styles)).astype(np.int64)
    images = np.zeros((len(poses), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for s, style in enumerate(styles):
        chosen = np.flatnonzero(style_index == s)
        if len(chosen):
            images[chosen] = render_poses(poses[chosen], style, workers=workers)
    logger.info(f"源域数据集构建完成: {len(poses)} 个样本, {len(styles)} 种风格")
    return LabeledSourceSet(
        images=images,
        poses=poses.astype(np.float32),
        sequence_ids=bank.source_ids[seq_of],
        style_index=style_index,
        split=seq_split[seq_of],
        styles=styles,
    )


def build_target_videos(bank: UnpairedPoseBank, style: RenderStyle, workers: int = 0) -> TargetVideoSet:
    """渲染目标域视频, 真值密封"""
    if bank.target_sequences is None:
        raise SealedDataError("姿态库不含目标域姿态, 只能在 gen-data 阶段构建目标域视频")
    T = bank.seq_len
    long_clips = render_poses(bank.target_sequences, style, workers=workers)
    q = len(long_clips)
    clips = long_clips.reshape((q, 2, T) + long_clips.shape[-3:]).reshape((2 * q, T) + long_clips.shape[-3:])
    logger.info(f"目标域视频构建完成: {q} 条长片段, {2 * q} 个片段, 风格 {style.name}")
    return TargetVideoSet(
        clips=clips,
        long_clips=long_clips,
        clip_sequence_ids=np.repeat(bank.target_ids, 2),
        long_sequence_ids=bank.target_ids.copy(),
        style=style,
        sealed_gt=SealedGroundTruth(frames=bank.target_sequences),
    )


# =================== 光度增强 ===================

def _modal_color(frame: np.ndarray) -> np.ndarray:
    codes = (frame[..., 0].astype(np.int64) << 16) | (frame[..., 1].astype(np.int64) << 8) | frame[..., 2]
    values, counts = np.unique(codes.ravel(), return_counts=True)
    code = int(values[np.argmax(counts)])
    return np.array([(code >> 16) & 255, (code >> 8) & 255, code & 255], dtype=np.uint8)


def augment_photometric(x: np.ndarray, seed: int, strength: float = 1.0, noise_std: float = 4.0) -> np.ndarray:
    """
    只改变光度的增强: 亮度/对比度抖动、通道缩放、背景色抖动、高斯像素噪声

    不做任何翻转、旋转、裁剪或平移。输入可以是单帧 (H, W, 3) 或片段 (T, H, W, 3),
    片段内所有帧使用同一组参数。

    Args:
        x: uint8 图像或片段
        seed: 随机种子
        strength: 强度, 0 表示恒等
        noise_std: 像素噪声标准差 (strength=1 时)
    """
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-1] != 3:
        raise ShapeError(f"图像必须以 3 通道结尾, 当前: {x.shape}")
    rng = np.random.default_rng(seed)
    brightness = rng.uniform(-0.15, 0.15) * 255.0 * strength
    contrast = 1.0 + rng.uniform(-0.2, 0.2) * strength
    channel_scale = 1.0 + rng.uniform(-0.1, 0.1, size=3) * strength
    bg_jitter = rng.uniform(-20.0, 20.0, size=3) * strength

    frames = x.reshape((-1,) + x.shape[-3:])
    out = frames.astype(np.float64)
    for i, frame in enumerate(frames):
        background = np.all(frame == _modal_color(frame), axis=-1)
        out[i][background] += bg_jitter
    out = (out - 127.5) * contrast + 127.5 + brightness
    out = out * channel_scale
    if strength > 0 and noise_std > 0:
        out = out + rng.normal(0.0, noise_std * strength, size=out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(x.shape)


# =================== 图像空间关系变换 ===================

def flip_image(x: np.ndarray) -> np.ndarray:
    """水平翻转 (宽度轴)"""
    return np.asarray(x)[..., ::-1, :].copy()


def rotate_image(x: np.ndarray, theta: float) -> np.ndarray:
    """
    绕图像中心逆时针旋转 theta 度

    90 度整数倍时无损; 其他角度双线性插值, 边界复制。
    """
    x = np.asarray(x)
    quarter = theta / 90.0
    if float(quarter).is_integer():
        return np.rot90(x, k=int(quarter) % 4, axes=(-3, -2)).copy()
    h, w = x.shape[-3:-1]
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), float(theta), 1.0)
    frames = x.reshape((-1,) + x.shape[-3:])
    rotated = [
        cv2.warpAffine(frame, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        for frame in frames
    ]
    return np.stack(rotated).reshape(x.shape)


def reverse_clip(X: np.ndarray) -> np.ndarray:
    return np.asarray(X)[..., ::-1, :, :, :].copy()


def slow_anchor_clip(X_long: np.ndarray, seq_len: int = SEQ_LEN) -> np.ndarray:
    """长片段以步长 2 采样得到的锚片段 (15 FPS 观看)"""
    X_long = _check_clip(X_long, 2 * seq_len)
    return X_long[..., ::2, :, :, :].copy()


def _check_clip(X: np.ndarray, length: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim < 4 or X.shape[-4] != length:
        raise ShapeError(f"片段长度必须为 {length}, 当前形状: {X.shape}")
    return X


def image_rule_transform(rule_id: str, x: np.ndarray, theta: float = DEFAULT_THETA,
                         seq_len: int = SEQ_LEN) -> np.ndarray:
    """
    图像空间的关系变换

    z0 恒等; z1 水平翻转; z2 旋转 theta; z3 翻转后旋转;
    v0 恒等; v1 逐帧翻转+时间反转; v2 逐帧翻转旋转+时间反转; v3 慢放反向 (输入 2T 帧)。

    Raises:
        UnknownRuleError: 未知规则
        ShapeError: 片段长度不符
    """
    if rule_id not in IMAGE_RULES:
        raise UnknownRuleError(f"未知的图像规则: {rule_id}")
    x = np.asarray(x)
    if rule_id in ("z0", "v0"):
        return x.copy()
    if rule_id == "z1":
        return flip_image(x)
    if rule_id == "z2":
        return rotate_image(x, theta)
    if rule_id == "z3":
        return rotate_image(flip_image(x), theta)
    if rule_id == "v1":
        return reverse_clip(flip_image(_check_clip(x, seq_len)))
    if rule_id == "v2":
        return reverse_clip(rotate_image(flip_image(_check_clip(x, seq_len)), theta))
    x = _check_clip(x, 2 * seq_len)
    return x[..., slow_backward_indices(seq_len), :, :, :].copy()
