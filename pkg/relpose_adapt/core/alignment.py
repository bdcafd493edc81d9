"""
Alignment - 图像编码器与目标域适配

ImageEncoder G: 64x64x3 图像 -> [-1, 1]^32, 参数分为 stem / mid / head 三个块。
先在带标签源域上以 ‖D_p∘G(x) - y‖ 训练得到 G^s, 再在无标签目标视频上交替最小化五个关系能量:

    LCR  单帧对比损失 (InfoNCE, 正样本为光度增强)
    HCR  片段对比损失 (E_m∘G 上的 InfoNCE)
    Z3   姿态关系能量 ‖T^z(G(x)) - G(T^x(x))‖
    V2   运动关系能量 ‖T^v(E_m∘G(X)) - E_m∘G(T^X(X))‖
    V3   同 V2, 用于第二个运动规则 (默认慢放反向)

每个能量项拥有独立的优化器, 按固定顺序轮转, 只更新 adapt_mask 中的块;
D_p、E_m 与关系网络全程冻结, 前后校验和必须一致。
"""

import copy
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from ..utils.checkpoint_io import state_checksum
from ..utils.runtime import progress_enabled
from .config import ENERGY_TERMS, AdaptConfig, SourceConfig
from .errors import ConfigError, FrozenViolationError, ShapeError, StageOrderError, TrainingFailureError
from .latent_models import LATENT_DIM, MotionCoder, PoseCoder, loss_stalled
from .models import TrainLog
from .pose_geometry import N_JOINTS, mpjpe
from .relation_nets import RelationNetwork, RelationRule
from .synth_world import (
    IMAGE_SIZE,
    LabeledSourceSet,
    TargetVideoSet,
    UnlabeledTargetClips,
    augment_photometric,
)

logger = logging.getLogger(__name__)

BLOCKS = ("stem", "mid", "head")
PREDICT_CHUNK = 256


class ImageEncoder(nn.Module):
    """四个步长为 2 的卷积阶段 -> 全局池化 -> 两个全连接层 -> tanh"""

    def __init__(self, latent: int = LATENT_DIM):
        super().__init__()
        self.hparams = {"latent": latent, "image_size": IMAGE_SIZE}
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ELU(),
        )
        self.mid = nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ELU())
        self.head = nn.Sequential(
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ELU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(64, 128), nn.ELU(),
            nn.Linear(128, latent), nn.Tanh(),
        )
        self.adapt_mask: Tuple[str, ...] = BLOCKS

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.mid(self.stem(x)))

    def set_adapt_mask(self, mask: Sequence[str]) -> None:
        """只有 mask 中的块保留梯度"""
        unknown = [name for name in mask if name not in BLOCKS]
        if unknown:
            raise ConfigError(f"未知的参数块: {unknown}")
        self.adapt_mask = tuple(name for name in BLOCKS if name in mask)
        for name in BLOCKS:
            for param in getattr(self, name).parameters():
                param.requires_grad_(name in self.adapt_mask)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [param for param in self.parameters() if param.requires_grad]

    def block_checksums(self) -> Dict[str, str]:
        return {name: state_checksum(getattr(self, name)) for name in BLOCKS}

    def checksum(self) -> str:
        return state_checksum(self)


def images_to_tensor(x: Union[np.ndarray, torch.Tensor], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (..., 64, 64, 3) -> (N, 3, 64, 64), 取值范围 [-0.5, 0.5]"""
    if isinstance(x, torch.Tensor):
        array = x
    else:
        array = torch.from_numpy(np.ascontiguousarray(x))
    if array.ndim < 3 or tuple(array.shape[-3:]) != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"图像必须为 (..., {IMAGE_SIZE}, {IMAGE_SIZE}, 3), 当前: {tuple(array.shape)}")
    flat = array.reshape((-1, IMAGE_SIZE, IMAGE_SIZE, 3)).to(dtype) / 255.0 - 0.5
    return flat.permute(0, 3, 1, 2).contiguous()


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def embed_images(G: ImageEncoder, x: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """G 作用于任意前导维度的图像, 返回 (..., 32)"""
    lead = tuple(x.shape[:-3])
    out = G(images_to_tensor(x, _param_dtype(G)))
    return out.reshape(lead + (out.shape[-1],))


def embed_clips(G: ImageEncoder, motion_coder: MotionCoder, X: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """E_m∘G, G 逐帧作用; X 形如 (B, T, 64, 64, 3)"""
    if X.ndim != 5 or X.shape[1] != motion_coder.seq_len:
        raise ShapeError(f"片段必须为 (B, {motion_coder.seq_len}, 64, 64, 3), 当前: {tuple(X.shape)}")
    return motion_coder.encode(embed_images(G, X))


# =================== 源域训练与推理 ===================

def predict_poses(G: ImageEncoder, pose_coder: PoseCoder, images: np.ndarray) -> np.ndarray:
    """D_p∘G, 固定分块批量推理; images 形如 (..., 64, 64, 3)"""
    pose_coder.require_frozen("PoseCoder")
    images = np.asarray(images)
    lead = images.shape[:-3]
    flat = images.reshape((-1,) + images.shape[-3:])
    was_training = G.training
    G.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(flat), PREDICT_CHUNK):
            z = embed_images(G, flat[start:start + PREDICT_CHUNK])
            outputs.append(pose_coder.decode(z.float()).numpy())
    G.train(was_training)
    poses = np.concatenate(outputs) if outputs else np.zeros((0, N_JOINTS, 3), dtype=np.float32)
    return poses.reshape(lead + (N_JOINTS, 3))


def infer_pose(G: ImageEncoder, pose_coder: PoseCoder, x: np.ndarray) -> np.ndarray:
    """单帧推理 y = D_p(G(x))"""
    x = np.asarray(x)
    if x.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"单帧图像必须为 ({IMAGE_SIZE}, {IMAGE_SIZE}, 3), 当前: {x.shape}")
    return predict_poses(G, pose_coder, x)


def infer_sequence(G: ImageEncoder, pose_coder: PoseCoder, X: np.ndarray) -> np.ndarray:
    """逐帧推理, 输入 (T, 64, 64, 3), 输出 (T, 17, 3)"""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"片段必须为 (T, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), 当前: {X.shape}")
    return predict_poses(G, pose_coder, X)


def train_source_encoder(source_set: LabeledSourceSet, pose_coder: PoseCoder,
                         config: SourceConfig) -> Tuple[ImageEncoder, TrainLog]:
    """
    源域监督训练 G^s: 最小化 ‖D_p∘G(x^s) - y^s‖², D_p 冻结

    Returns:
        Tuple[ImageEncoder, TrainLog]: G^s 与训练日志 (metrics 含 train_mpjpe / val_mpjpe)

    Raises:
        StageOrderError: pose_coder 未冻结
        TrainingFailureError: 训练发散
    """
    pose_coder.require_frozen("PoseCoder")
    train_idx, val_idx = source_set.train_indices(), source_set.val_indices()
    if len(train_idx) == 0:
        train_idx = np.arange(len(source_set))
    if len(val_idx) == 0:
        val_idx = train_idx

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    G = ImageEncoder()
    opt = torch.optim.Adam(G.parameters(), lr=config.lr)
    log = TrainLog(stage="source", seed=config.seed)
    images = source_set.images[train_idx]
    targets = torch.as_tensor(source_set.poses[train_idx], dtype=torch.float32)

    logger.info(f"开始训练源域编码器: {len(train_idx)} 个训练样本, {config.epochs} 个 epoch")
    epochs = tqdm(range(config.epochs), desc="source", disable=not progress_enabled())
    for epoch in epochs:
        order = torch.randperm(len(images), generator=generator).numpy()
        total, n_batches = 0.0, 0
        for start in range(0, len(images), config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = pose_coder.decode(embed_images(G, images[idx]))
            loss = F.mse_loss(pred, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item())
            n_batches += 1
        value = total / max(n_batches, 1)
        log.append("regression", value)
        logger.debug(f"source epoch {epoch + 1}: loss={value:.6f}")
        if not np.isfinite(value):
            raise TrainingFailureError("源域编码器训练发散: 损失非有限", log=log)
        if loss_stalled(log.curves["regression"], config.patience):
            raise TrainingFailureError(f"源域编码器在 {config.patience} 个 epoch 内损失没有下降", log=log)

    G.eval()
    log.metrics["train_mpjpe"] = mpjpe(predict_poses(G, pose_coder, source_set.images[train_idx]),
                                       source_set.poses[train_idx])
    log.metrics["val_mpjpe"] = mpjpe(predict_poses(G, pose_coder, source_set.images[val_idx]),
                                     source_set.poses[val_idx])
    logger.info(f"源域编码器训练完成: train MPJPE={log.metrics['train_mpjpe']:.2f}mm, "
                f"val MPJPE={log.metrics['val_mpjpe']:.2f}mm")
    return G, log


# =================== 关系能量 ===================

@dataclass
class ContrastiveBatch:
    """对比批: anchors 与 positives 一一对应, 负样本取自其他序列的正样本"""
    anchors: np.ndarray
    positives: np.ndarray
    sequence_ids: np.ndarray


@dataclass
class RuleBatch:
    """非局部能量批: 正样本在能量内部由规则的图像变换生成"""
    inputs: np.ndarray
    sequence_ids: np.ndarray


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, tau: float, normalize: bool = True,
             sequence_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    批内负样本的 InfoNCE, 对每个三元组取 -log 再求均值

    anchor_i 的负样本是 positive_j (j != i), 与 anchor_i 同序列的 j 被排除。

    Raises:
        ConfigError: tau <= 0
        ShapeError: 某个锚没有负样本
    """
    if tau <= 0:
        raise ConfigError(f"温度必须为正: {tau}")
    if anchor.shape != positive.shape or anchor.ndim != 2:
        raise ShapeError(f"anchor/positive 形状必须一致且为 (B, D): {tuple(anchor.shape)} vs {tuple(positive.shape)}")
    if normalize:
        anchor = F.normalize(anchor, dim=-1)
        positive = F.normalize(positive, dim=-1)
    logits = anchor @ positive.T / tau
    n = len(anchor)
    eye = torch.eye(n, dtype=torch.bool)
    if sequence_ids is None:
        valid = ~eye
    else:
        ids = torch.as_tensor(np.asarray(sequence_ids))
        valid = ids[:, None] != ids[None, :]
    if not bool(valid.any(dim=1).all()):
        raise ShapeError("对比批中存在没有负样本的锚")
    masked = logits.masked_fill(~(valid | eye), float("-inf"))
    return (torch.logsumexp(masked, dim=1) - logits.diagonal()).mean()


def contrastive_pose_loss(G: ImageEncoder, batch: ContrastiveBatch, tau: float,
                          normalize: bool = True) -> torch.Tensor:
    """L_LCR: 单帧 InfoNCE, 嵌入为 G(x)"""
    return info_nce(embed_images(G, batch.anchors), embed_images(G, batch.positives), tau,
                    normalize, batch.sequence_ids)


def contrastive_motion_loss(G: ImageEncoder, motion_coder: MotionCoder, batch: ContrastiveBatch, tau: float,
                            normalize: bool = True) -> torch.Tensor:
    """L_HCR: 片段 InfoNCE, 嵌入为 E_m∘G(X)"""
    motion_coder.require_frozen("MotionCoder")
    return info_nce(embed_clips(G, motion_coder, batch.anchors), embed_clips(G, motion_coder, batch.positives),
                    tau, normalize, batch.sequence_ids)


def _distance(diff: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "l1":
        return diff.abs().sum(dim=-1)
    return torch.sqrt((diff * diff).sum(dim=-1) + 1e-12)


def _check_relation(relation_net: RelationNetwork, rule: RelationRule, space: str) -> None:
    if rule.space != space:
        raise ConfigError(f"规则 {rule.name} 属于 {rule.space} 空间, 不能用于 {space} 能量")
    if relation_net.rule.name != rule.name:
        raise ConfigError(f"关系网络 {relation_net.rule.name} 与规则 {rule.name} 不匹配")
    relation_net.require_frozen(f"关系网络 {rule.name}")


def nonlocal_pose_energy(G: ImageEncoder, relation_net: RelationNetwork, images: np.ndarray,
                         rule: RelationRule, norm: str = "l2") -> torch.Tensor:
    """平均 ‖T^z(G(x)) - G(T^x(x))‖, 梯度经两个分支流入 G"""
    _check_relation(relation_net, rule, "pose")
    anchor, positive = rule.image_pair(images)
    return _distance(relation_net(embed_images(G, anchor)) - embed_images(G, positive), norm).mean()


def nonlocal_motion_energy(G: ImageEncoder, motion_coder: MotionCoder, relation_net: RelationNetwork,
                           clips: np.ndarray, rule: RelationRule, norm: str = "l2") -> torch.Tensor:
    """
    平均 ‖T^v(E_m∘G(X)) - E_m∘G(X^+)‖

    慢放反向时 clips 为 2T 帧长片段, 锚为 15FPS 采样片段。
    """
    _check_relation(relation_net, rule, "motion")
    motion_coder.require_frozen("MotionCoder")
    anchor, positive = rule.image_pair(clips)
    v = embed_clips(G, motion_coder, anchor)
    v_plus = embed_clips(G, motion_coder, positive)
    return _distance(relation_net(v) - v_plus, norm).mean()


def equivariance_gap(G: ImageEncoder, relation_net: RelationNetwork, rule: RelationRule,
                     probe_images: np.ndarray) -> float:
    """探针集上的平均 ‖T^z(G(x)) - G(T^x(x))‖, 不计算梯度"""
    was_training = G.training
    G.eval()
    with torch.no_grad():
        value = float(nonlocal_pose_energy(G, relation_net, probe_images, rule).item())
    G.train(was_training)
    return value


# =================== 目标域批采样 ===================

class TargetBatchSampler:
    """
    目标域批采样器

    按轮转顺序为每个能量项生成批; 同一批内的样本来自不同序列。
    prefetch > 0 时由单个生产者线程提前生成批并放入有界队列, 顺序与串行完全一致。
    """

    def __init__(self, targets: UnlabeledTargetClips, config: AdaptConfig,
                 long_terms: Sequence[str] = (), seed: Optional[int] = None):
        self.targets = targets
        self.config = config
        self.long_terms = set(long_terms)
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.seq_len = targets.clips.shape[1]
        self._frame_ids = targets.frame_sequence_ids
        self._unique_ids = np.unique(targets.clip_sequence_ids)

    def _pick_sequences(self, size: int) -> np.ndarray:
        size = min(size, len(self._unique_ids))
        if size < 2:
            raise ShapeError("目标域至少需要两个不同序列才能构造批")
        return self.rng.choice(self._unique_ids, size=size, replace=False)

    def _frames(self, size: int) -> Tuple[np.ndarray, np.ndarray]:
        chosen = self._pick_sequences(size)
        index = [self.rng.choice(np.flatnonzero(self._frame_ids == sid)) for sid in chosen]
        return self.targets.frames[index], chosen

    def _clips(self, size: int, long: bool) -> Tuple[np.ndarray, np.ndarray]:
        chosen = self._pick_sequences(size)
        if long:
            rows = [int(np.flatnonzero(self.targets.long_sequence_ids == sid)[0]) for sid in chosen]
            return self.targets.long_clips[rows], chosen
        rows = [self.rng.choice(np.flatnonzero(self.targets.clip_sequence_ids == sid)) for sid in chosen]
        return self.targets.clips[rows], chosen

    def _augment(self, x: np.ndarray) -> np.ndarray:
        seeds = self.rng.integers(0, 2 ** 31 - 1, size=len(x))
        return np.stack([augment_photometric(item, int(s), self.config.augment_strength)
                         for item, s in zip(x, seeds)])

    def sample(self, term: str) -> Union[ContrastiveBatch, RuleBatch]:
        """为一个能量项生成一个新批"""
        if term == "LCR":
            frames, ids = self._frames(self.config.batch_frames)
            return ContrastiveBatch(frames, self._augment(frames), ids)
        if term == "HCR":
            clips, ids = self._clips(self.config.batch_clips, long=False)
            return ContrastiveBatch(clips, self._augment(clips), ids)
        if term == "Z3":
            frames, ids = self._frames(self.config.batch_frames)
            return RuleBatch(frames, ids)
        if term in ("V2", "V3"):
            clips, ids = self._clips(self.config.batch_clips, long=term in self.long_terms)
            return RuleBatch(clips, ids)
        raise ConfigError(f"未知能量项: {term}")

    def stream(self, schedule: Sequence[str]) -> Iterator[Union[ContrastiveBatch, RuleBatch]]:
        """按 schedule 顺序产出批"""
        if self.config.prefetch <= 0:
            for term in schedule:
                yield self.sample(term)
            return

        buffer: "queue.Queue" = queue.Queue(maxsize=self.config.prefetch)
        done = object()
        stop = threading.Event()

        def produce() -> None:
            try:
                for term in schedule:
                    if stop.is_set():
                        return
                    buffer.put(self.sample(term))
                buffer.put(done)
            except Exception as e:
                buffer.put(e)

        worker = threading.Thread(target=produce, name="target-batch-producer", daemon=True)
        worker.start()
        try:
            while True:
                item = buffer.get()
                if item is done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    buffer.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)


# =================== 适配 ===================

@dataclass
class FrozenComponents:
    """适配期间冻结的组件: D_p/E_p, E_m/D_m 与按能量槽位索引的关系网络"""
    pose_coder: PoseCoder
    motion_coder: MotionCoder
    relation_nets: Dict[str, RelationNetwork] = field(default_factory=dict)

    def checksums(self) -> Dict[str, str]:
        sums = {"pose_coder": self.pose_coder.checksum(), "motion_coder": self.motion_coder.checksum()}
        for slot, network in sorted(self.relation_nets.items()):
            sums[f"relation:{slot}"] = network.checksum()
        return sums

    def require_frozen(self) -> None:
        self.pose_coder.require_frozen("PoseCoder")
        self.motion_coder.require_frozen("MotionCoder")
        for slot, network in self.relation_nets.items():
            network.require_frozen(f"关系网络 {slot}")

    def verify(self, expected: Dict[str, str], when: str) -> None:
        actual = self.checksums()
        changed = [name for name, value in expected.items() if actual.get(name) != value]
        if changed:
            logger.error(f"冻结组件校验和变化 ({when}): {changed}")
            raise FrozenViolationError(f"冻结组件校验和变化 ({when}): {changed}", changed=changed)


@dataclass
class AdaptResult:
    encoder: ImageEncoder
    traces: List[Dict[str, Union[int, float, str]]]


def _energy(term: str, G: ImageEncoder, batch, frozen: FrozenComponents, config: AdaptConfig) -> torch.Tensor:
    if term == "LCR":
        return contrastive_pose_loss(G, batch, config.term_tau("LCR"), config.normalize_embeddings)
    if term == "HCR":
        return contrastive_motion_loss(G, frozen.motion_coder, batch, config.term_tau("HCR"),
                                       config.normalize_embeddings)
    network = frozen.relation_nets[term]
    if term == "Z3":
        return nonlocal_pose_energy(G, network, batch.inputs, network.rule, config.energy_norm)
    return nonlocal_motion_energy(G, frozen.motion_coder, network, batch.inputs, network.rule, config.energy_norm)


def adapt_target(
    G_init: ImageEncoder,
    targets: Union[UnlabeledTargetClips, TargetVideoSet],
    frozen: FrozenComponents,
    config: AdaptConfig,
    expected_checksums: Optional[Dict[str, str]] = None,
    energies: Optional[Sequence[str]] = None,
    seed: Optional[int] = None,
) -> AdaptResult:
    """
    目标域适配

    在 G_init 的副本上按 LCR, HCR, Z3, V2, V3 的固定顺序轮转, 每步采样新批、计算单个能量、
    用该能量自己的优化器更新 adapt_mask 中的参数块。共 config.iterations 步。

    Args:
        G_init: 源域编码器 G^s (不会被修改)
        targets: 目标域片段; 传入 TargetVideoSet 时只取其无标签视图
        frozen: 冻结组件
        config: 适配配置
        expected_checksums: 检查点记录的冻结组件校验和, 开始前核对
        energies: 覆盖 config.energies (消融使用)
        seed: 覆盖 config.seed

    Returns:
        AdaptResult: 适配后的编码器与损失轨迹 (iteration, term, value, seed)

    Raises:
        StageOrderError: 组件未冻结或缺少关系网络
        FrozenViolationError: 冻结组件校验和变化
        TrainingFailureError: 能量出现 NaN/Inf
    """
    if isinstance(targets, TargetVideoSet):
        targets = targets.unlabeled()
    seed = config.seed if seed is None else seed
    terms = [name for name in ENERGY_TERMS if name in (config.energies if energies is None else energies)]
    frozen.require_frozen()
    missing = [name for name in terms if name in ("Z3", "V2", "V3") and name not in frozen.relation_nets]
    if missing:
        raise StageOrderError(f"能量项 {missing} 缺少已训练的关系网络, 请先执行 train-relations")

    before = frozen.checksums()
    if expected_checksums:
        frozen.verify(expected_checksums, "适配前")

    G = copy.deepcopy(G_init)
    if config.iterations == 0 or not terms:
        logger.info("适配迭代数为 0 或未启用能量项, 返回 G_init 的副本")
        return AdaptResult(encoder=G, traces=[])

    torch.manual_seed(seed)
    G.set_adapt_mask(config.adapt_mask)
    G.train()
    fixed_blocks = {name: value for name, value in G.block_checksums().items() if name not in G.adapt_mask}
    params = G.trainable_parameters()
    optimizers = {name: torch.optim.Adam(params, lr=config.lr.get(name, 1e-4)) for name in terms}
    long_terms = [slot for slot in ("V2", "V3")
                  if slot in frozen.relation_nets and frozen.relation_nets[slot].rule.source_length > targets.clips.shape[1]]
    sampler = TargetBatchSampler(targets, config, long_terms=long_terms, seed=seed)
    schedule = [terms[i % len(terms)] for i in range(config.iterations)]

    traces: List[Dict[str, Union[int, float, str]]] = []
    logger.info(f"开始目标域适配: 能量项 {terms}, {config.iterations} 步, adapt_mask={list(G.adapt_mask)}")
    steps = tqdm(zip(range(config.iterations), schedule, sampler.stream(schedule)),
                 total=config.iterations, desc="adapt", disable=not progress_enabled())
    for iteration, term, batch in steps:
        energy = _energy(term, G, batch, frozen, config)
        value = float(energy.item())
        traces.append({"iteration": iteration, "term": term, "value": value, "seed": seed})
        if not np.isfinite(value):
            logger.error(f"能量 {term} 在第 {iteration} 步出现非有限值")
            raise TrainingFailureError(f"能量 {term} 在第 {iteration} 步出现非有限值", log=traces)
        optimizer = optimizers[term]
        optimizer.zero_grad()
        (config.weights.get(term, 1.0) * energy).backward()
        optimizer.step()
        if iteration % 100 == 0:
            logger.debug(f"adapt iter {iteration}: {term}={value:.5f}")

    frozen.verify(before, "适配后")
    changed_fixed = [name for name, value in G.block_checksums().items()
                     if name in fixed_blocks and fixed_blocks[name] != value]
    if changed_fixed:
        raise FrozenViolationError(f"adapt_mask 之外的参数块发生变化: {changed_fixed}")
    G.eval()
    logger.info("目标域适配完成")
    return AdaptResult(encoder=G, traces=traces)
