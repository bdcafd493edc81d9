"""
Pose Geometry - 姿态几何

定义 17 关节骨架、姿态空间与序列空间的关系变换, 以及全部评估指标 (MPJPE, PA-MPJPE, PCK, AUC)。

约定: 坐标单位为米, 以骨盆为根 (joints[0] == 0); x 为横向 (人物左侧为正), y 为竖直向上,
z 为朝向相机的深度。所有函数都是纯函数, 接受形如 (..., 17, 3) 的数组并支持批量前导维度。
"""

import json
import logging
from dataclasses import dataclass
from typing import Literal, Tuple, Union

import numpy as np

from .errors import AlignmentDegenerateError, LengthError, ShapeError
from .models import MetricReport, SkeletonSpec

logger = logging.getLogger(__name__)

N_JOINTS = 17
SEQ_LEN = 30
FRAME_RATE = 30.0
DEFAULT_THETA = 15.0

JOINT_NAMES = [
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "neck", "nose", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
]
PARENT_INDEX = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
LEFT_RIGHT_PAIRS = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)]
BONE_LENGTHS = [
    0.0, 0.12, 0.44, 0.42, 0.12, 0.44, 0.42,
    0.24, 0.25, 0.11, 0.12,
    0.16, 0.28, 0.25, 0.16, 0.28, 0.25,
]

SKELETON = SkeletonSpec(
    joint_names=JOINT_NAMES,
    parent_index=PARENT_INDEX,
    left_right_pairs=LEFT_RIGHT_PAIRS,
    bone_lengths=BONE_LENGTHS,
)
FLIP_PERMUTATION = np.array(SKELETON.flip_permutation())
# 骨骼 (父, 子) 列表, 不含根关节自身
BONES = [(PARENT_INDEX[j], j) for j in range(1, N_JOINTS)]

AlignMode = Literal["none", "root", "procrustes"]


@dataclass(frozen=True)
class PoseSequence:
    """姿态序列: frames 形如 (T, 17, 3), 长序列为 2T"""
    frames: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self) -> None:
        check_pose_shape(self.frames)
        if self.frames.ndim != 3:
            raise ShapeError(f"PoseSequence 需要 (T, 17, 3), 当前: {self.frames.shape}")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


SequenceLike = Union[PoseSequence, np.ndarray]


def skeleton_to_json(skeleton: SkeletonSpec = SKELETON) -> str:
    """骨架序列化为 JSON 文档"""
    return skeleton.model_dump_json(indent=2)


def skeleton_from_json(document: str) -> SkeletonSpec:
    """从 JSON 文档恢复骨架"""
    return SkeletonSpec.model_validate(json.loads(document))


def check_pose_shape(y: np.ndarray) -> np.ndarray:
    """
    检查关节维度

    Args:
        y: 形如 (..., 17, 3) 的数组

    Returns:
        np.ndarray: 原数组

    Raises:
        ShapeError: 关节数或坐标维度错误
    """
    y = np.asarray(y)
    if y.ndim < 2 or y.shape[-2:] != (N_JOINTS, 3):
        raise ShapeError(f"姿态数组必须以 (17, 3) 结尾, 当前: {y.shape}")
    return y


def root_relative(y: np.ndarray) -> np.ndarray:
    """平移使骨盆位于原点"""
    y = check_pose_shape(y)
    return y - y[..., :1, :]


def bone_lengths(y: np.ndarray) -> np.ndarray:
    """
    计算每根骨骼的长度

    Returns:
        np.ndarray: 形如 (..., 16), 顺序与 BONES 一致
    """
    y = check_pose_shape(y)
    parents = np.array([p for p, _ in BONES])
    children = np.array([c for _, c in BONES])
    return np.linalg.norm(y[..., children, :] - y[..., parents, :], axis=-1)


def is_plausible(y: np.ndarray, low: float = 0.5, high: float = 2.0, atol: float = 1e-6) -> np.ndarray:
    """
    合理性检查: 坐标有限, 根关节在原点, 骨长在名义长度的 [low, high] 倍之间

    Returns:
        np.ndarray: 每个姿态一个布尔值
    """
    y = check_pose_shape(y)
    nominal = np.array([BONE_LENGTHS[c] for _, c in BONES])
    lengths = bone_lengths(y)
    finite = np.isfinite(y).all(axis=(-1, -2))
    rooted = np.abs(y[..., 0, :]).max(axis=-1) <= atol
    in_band = ((lengths >= low * nominal) & (lengths <= high * nominal)).all(axis=-1)
    return finite & rooted & in_band


# =================== 姿态空间变换 ===================

def _frames(seq: SequenceLike) -> np.ndarray:
    frames = seq.frames if isinstance(seq, PoseSequence) else np.asarray(seq)
    check_pose_shape(frames)
    if frames.ndim < 3:
        raise ShapeError(f"序列需要时间维度, 当前: {frames.shape}")
    return frames


def _like(seq: SequenceLike, frames: np.ndarray) -> SequenceLike:
    if isinstance(seq, PoseSequence):
        return PoseSequence(frames=frames, frame_rate=seq.frame_rate)
    return frames


def _rotation_2d(theta: float) -> Tuple[float, float]:
    """返回 (cos, sin); 90 度整数倍时取精确值"""
    quarter = theta / 90.0
    if float(quarter).is_integer():
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    rad = np.deg2rad(theta)
    return float(np.cos(rad)), float(np.sin(rad))


def flip_pose(y: np.ndarray) -> np.ndarray:
    """
    左右翻转 (T^y_1): x 取反后交换左右关节索引

    Args:
        y: 形如 (..., 17, 3)

    Returns:
        np.ndarray: 翻转后的姿态
    """
    y = check_pose_shape(y)
    mirrored = y * np.array([-1.0, 1.0, 1.0])
    return mirrored[..., FLIP_PERMUTATION, :]


def rotate_inplane_pose(y: np.ndarray, theta: float) -> np.ndarray:
    """
    绕相机视轴 (z 轴) 过根关节的平面内旋转 (T^y_2), theta 单位为度

    (x, y) -> (x cosθ - y sinθ, x sinθ + y cosθ), z 不变
    """
    y = check_pose_shape(y)
    if not np.isfinite(theta):
        raise ValueError(f"旋转角必须有限: {theta}")
    c, s = _rotation_2d(float(theta))
    out = np.empty_like(y, dtype=np.result_type(y, np.float64))
    out[..., 0] = y[..., 0] * c - y[..., 1] * s
    out[..., 1] = y[..., 0] * s + y[..., 1] * c
    out[..., 2] = y[..., 2]
    return out


def flip_inplane_pose(y: np.ndarray, theta: float) -> np.ndarray:
    """先翻转再平面内旋转 (T^y_3)"""
    return rotate_inplane_pose(flip_pose(y), theta)


# =================== 序列空间变换 ===================

def reverse_time(Y: SequenceLike) -> SequenceLike:
    """时间反转, 帧率不变"""
    frames = _frames(Y)
    return _like(Y, frames[..., ::-1, :, :].copy())


def flip_backward_seq(Y: SequenceLike) -> SequenceLike:
    """逐帧翻转后时间反转 (T^Y_1)"""
    frames = _frames(Y)
    return _like(Y, flip_pose(frames)[..., ::-1, :, :].copy())


def flip_inplane_backward_seq(Y: SequenceLike, theta: float) -> SequenceLike:
    """逐帧翻转+平面内旋转后时间反转 (T^Y_2)"""
    frames = _frames(Y)
    return _like(Y, flip_inplane_pose(frames, theta)[..., ::-1, :, :].copy())


def slow_anchor_seq(Y_long: SequenceLike, seq_len: int = SEQ_LEN) -> SequenceLike:
    """慢放反向关系的锚序列: 以步长 2 采样长序列 (相当于 15 FPS 观看)"""
    frames = _frames(Y_long)
    _check_long(frames, seq_len)
    return _like(Y_long, frames[..., ::2, :, :].copy())


def slow_backward_seq(Y_long: SequenceLike, seq_len: int = SEQ_LEN) -> SequenceLike:
    """
    慢放反向 (T^Y_3): 取长序列中间窗口 [T/2, 3T/2), 时间反转, 以 30 FPS 播放

    output[t] = Y_long[T/2 + (T - 1 - t)]

    Raises:
        LengthError: 输入长度不是 2T
    """
    frames = _frames(Y_long)
    _check_long(frames, seq_len)
    index = slow_backward_indices(seq_len)
    return _like(Y_long, frames[..., index, :, :].copy())


def slow_backward_indices(seq_len: int = SEQ_LEN) -> np.ndarray:
    """慢放反向使用的帧索引, 与图像端共享"""
    half = seq_len // 2
    return np.array([half + (seq_len - 1 - t) for t in range(seq_len)])


def _check_long(frames: np.ndarray, seq_len: int) -> None:
    if frames.shape[-3] != 2 * seq_len:
        raise LengthError(f"慢放反向需要长度为 {2 * seq_len} 的序列, 当前: {frames.shape[-3]}")


# =================== 评估指标 ===================

def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = check_pose_shape(np.asarray(pred, dtype=np.float64))
    gt = check_pose_shape(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ShapeError(f"预测与真值形状不匹配: {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors(pred: np.ndarray, gt: np.ndarray, mode: AlignMode = "root") -> np.ndarray:
    """
    每个关节的误差 (毫米)

    Args:
        pred: 预测, 形如 (..., 17, 3)
        gt: 真值, 形状相同
        mode: 对齐方式 none | root | procrustes

    Returns:
        np.ndarray: 形如 (..., 17)
    """
    pred, gt = _check_pair(pred, gt)
    if mode == "root":
        pred, gt = root_relative(pred), root_relative(gt)
    elif mode == "procrustes":
        pred = _procrustes_batch(pred, gt, with_scale=True)[3]
    elif mode != "none":
        raise ValueError(f"未知的对齐方式: {mode}")
    return np.linalg.norm(pred - gt, axis=-1) * 1000.0


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """根关节对齐后的平均关节位置误差 (毫米)"""
    return float(joint_errors(pred, gt, mode="root").mean())


def _procrustes_batch(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True):
    """带尺度的正交 Procrustes (排除反射), 支持批量"""
    mu_gt = gt.mean(axis=-2, keepdims=True)
    mu_pred = pred.mean(axis=-2, keepdims=True)
    gt0 = gt - mu_gt
    pred0 = pred - mu_pred

    gt_sv = np.linalg.svd(gt0, compute_uv=False)
    norm_pred = np.sum(pred0 ** 2, axis=(-1, -2))
    if np.any(gt_sv[..., 1] <= 1e-9 * np.maximum(gt_sv[..., 0], 1e-12)) or np.any(norm_pred <= 1e-18):
        raise AlignmentDegenerateError("Procrustes 对齐退化: 关节共线或重合")

    H = np.swapaxes(pred0, -1, -2) @ gt0
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.broadcast_to(np.eye(3), H.shape).copy()
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    if with_scale:
        trace = (S * np.diagonal(D, axis1=-2, axis2=-1)).sum(axis=-1)
        scale = np.asarray(trace / norm_pred)
    else:
        scale = np.ones(H.shape[:-2])
    translation = mu_gt - scale[..., None, None] * (mu_pred @ np.swapaxes(R, -1, -2))
    aligned = scale[..., None, None] * (pred @ np.swapaxes(R, -1, -2)) + translation
    return R, scale, translation[..., 0, :], aligned


def procrustes_align(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True):
    """
    求使 pred 变换后与 gt 的平方误差和最小的相似变换

    Args:
        pred: 单个姿态 (17, 3)
        gt: 单个姿态 (17, 3)
        with_scale: 是否包含均匀尺度

    Returns:
        tuple: (rotation 3x3, scale, translation (3,), aligned_pred (17, 3)),
               aligned_pred = scale * pred @ rotation.T + translation

    Raises:
        AlignmentDegenerateError: gt 关节共线或重合
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise ShapeError(f"procrustes_align 只接受单个姿态, 当前: {pred.shape}")
    R, scale, translation, aligned = _procrustes_batch(pred, gt, with_scale=with_scale)
    return R, float(scale), translation, aligned


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> float:
    """Procrustes 对齐后的 MPJPE (毫米)"""
    pred, gt = _check_pair(pred, gt)
    aligned = _procrustes_batch(pred, gt, with_scale=with_scale)[3]
    return float((np.linalg.norm(aligned - gt, axis=-1) * 1000.0).mean())


def pck_thresholds(threshold_max: float = 150.0, n_thresholds: int = 30) -> np.ndarray:
    """(0, threshold_max] 上等间距的阈值"""
    return np.linspace(threshold_max / n_thresholds, threshold_max, n_thresholds)


def pck_auc(
    preds: np.ndarray,
    gts: np.ndarray,
    threshold_max: float = 150.0,
    n_thresholds: int = 30,
    mode: AlignMode = "procrustes",
) -> Tuple[float, float]:
    """
    计算 PCK 与 AUC

    Args:
        preds: 预测姿态集合
        gts: 真值姿态集合
        threshold_max: PCK 阈值 (毫米)
        n_thresholds: AUC 的阈值个数
        mode: 对齐方式 none | root | procrustes

    Returns:
        Tuple[float, float]: (pck, auc), 百分比
    """
    preds = np.asarray(preds)
    if preds.size == 0:
        raise ValueError("PCK 输入为空")
    errors = joint_errors(preds, gts, mode=mode).ravel()
    pck = float((errors <= threshold_max).mean() * 100.0)
    curve = [(errors <= t).mean() * 100.0 for t in pck_thresholds(threshold_max, n_thresholds)]
    return pck, float(np.mean(curve))


def evaluate_poses(
    preds: np.ndarray,
    gts: np.ndarray,
    pck_threshold: float = 150.0,
    n_thresholds: int = 30,
) -> MetricReport:
    """汇总 MPJPE / PA-MPJPE / PCK / AUC"""
    preds, gts = _check_pair(preds, gts)
    pck, auc = pck_auc(preds, gts, pck_threshold, n_thresholds, mode="procrustes")
    n_samples = int(np.prod(preds.shape[:-2])) if preds.ndim > 2 else 1
    error, aligned_error = mpjpe(preds, gts), pa_mpjpe(preds, gts)
    if aligned_error > error + 1e-6:
        # 均值-范数形式下对齐误差可能略大于未对齐误差
        logger.warning(f"PA-MPJPE 大于 MPJPE: {aligned_error:.4f} > {error:.4f}")
    return MetricReport(
        mpjpe=error,
        pa_mpjpe=aligned_error,
        pck=pck,
        auc=min(auc, pck),
        n_samples=n_samples,
    )
