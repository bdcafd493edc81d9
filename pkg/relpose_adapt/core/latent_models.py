"""
Latent Models - 姿态与运动潜空间

PoseCoder (E_p, D_p): 姿态对抗自编码器, 潜变量 z ∈ [-1, 1]^32 被判别器推向均匀先验。
MotionCoder (E_m, D_m): 在姿态嵌入序列上工作的循环自编码器, 运动嵌入 v ∈ R^128。

两个编码器只从无配对姿态库学习, 训练结束后冻结; 冻结后的参数字节不可变。
"""

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from ..utils.checkpoint_io import state_checksum
from ..utils.runtime import progress_enabled
from .config import MotionAAEConfig, PoseAAEConfig
from .errors import LengthError, ShapeError, StageOrderError, TrainingFailureError
from .models import TrainLog
from .pose_geometry import N_JOINTS, SEQ_LEN, check_pose_shape, is_plausible, mpjpe, reverse_time, slow_anchor_seq
from .synth_world import UnpairedPoseBank

logger = logging.getLogger(__name__)

POSE_DIM = N_JOINTS * 3
LATENT_DIM = 32
MOTION_DIM = 128


def _mlp(sizes, activation=nn.ELU) -> nn.Sequential:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(n_in, n_out))
        if i < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class FreezableMixin:
    """冻结标记与校验和"""

    frozen: bool = False

    def freeze(self) -> "FreezableMixin":
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def checksum(self) -> str:
        return state_checksum(self)

    def require_frozen(self, what: str) -> None:
        if not self.frozen:
            raise StageOrderError(f"{what} 尚未冻结, 不能用于推理")


class PoseCoder(FreezableMixin, nn.Module):
    """E_p: R^51 -> [-1, 1]^32, D_p: [-1, 1]^32 -> 根相对姿态"""

    def __init__(self, hidden: int = 256, latent: int = LATENT_DIM):
        super().__init__()
        self.hparams = {"hidden": hidden, "latent": latent}
        self.encoder = nn.Sequential(_mlp([POSE_DIM, hidden, hidden, hidden, latent]), nn.Tanh())
        self.decoder = _mlp([latent, hidden, hidden, hidden, POSE_DIM])

    def encode(self, y: torch.Tensor) -> torch.Tensor:
        lead = y.shape[:-2]
        return self.encoder(y.reshape(lead + (POSE_DIM,)))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        out = self.decoder(z).reshape(z.shape[:-1] + (N_JOINTS, 3))
        # 重新以骨盆为根
        return out - out[..., :1, :]

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(y))


class PriorCritic(nn.Module):
    """潜变量判别器: 区分先验样本与编码结果, 只在训练期使用"""

    def __init__(self, dim: int = LATENT_DIM, hidden: int = 128):
        super().__init__()
        self.net = _mlp([dim, hidden, hidden, 1], activation=nn.LeakyReLU)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))


class MotionEncoder(nn.Module):
    """双向 GRU, 拼接两个方向的最终状态后投影到 128 维"""

    def __init__(self, latent: int = LATENT_DIM, hidden: int = 128, out: int = MOTION_DIM):
        super().__init__()
        self.rnn = nn.GRU(latent, hidden, num_layers=1, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, out)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        _, h_n = self.rnn(Z)
        return self.proj(torch.cat([h_n[0], h_n[1]], dim=-1))


class MotionDecoder(nn.Module):
    """以 v 为初始状态展开 T 步, 自回归输入上一步的输出"""

    def __init__(self, latent: int = LATENT_DIM, hidden: int = 128, motion: int = MOTION_DIM,
                 seq_len: int = SEQ_LEN):
        super().__init__()
        self.seq_len = seq_len
        self.init = nn.Linear(motion, hidden)
        self.cell = nn.GRUCell(latent + motion, hidden)
        self.out = nn.Linear(hidden, latent)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.init(v))
        z = v.new_zeros(v.shape[:-1] + (self.out.out_features,))
        steps = []
        for _ in range(self.seq_len):
            h = self.cell(torch.cat([z, v], dim=-1), h)
            z = torch.tanh(self.out(h))
            steps.append(z)
        return torch.stack(steps, dim=-2)


class MotionCoder(FreezableMixin, nn.Module):
    """E_m: 长度 T 的潜姿态序列 -> v, D_m: v -> 长度 T 的潜姿态序列"""

    def __init__(self, hidden: int = 128, seq_len: int = SEQ_LEN):
        super().__init__()
        self.hparams = {"hidden": hidden, "seq_len": seq_len, "latent": LATENT_DIM, "motion": MOTION_DIM}
        self.seq_len = seq_len
        self.encoder = MotionEncoder(hidden=hidden)
        self.decoder = MotionDecoder(hidden=hidden, seq_len=seq_len)

    def check_length(self, Z: torch.Tensor) -> None:
        if Z.ndim < 2 or Z.shape[-2] != self.seq_len or Z.shape[-1] != LATENT_DIM:
            raise LengthError(f"潜姿态序列必须为 (..., {self.seq_len}, {LATENT_DIM}), 当前: {tuple(Z.shape)}")

    def encode(self, Z: torch.Tensor) -> torch.Tensor:
        self.check_length(Z)
        lead = Z.shape[:-2]
        v = self.encoder(Z.reshape((-1, self.seq_len, LATENT_DIM)))
        return v.reshape(lead + (MOTION_DIM,))

    def decode(self, v: torch.Tensor) -> torch.Tensor:
        lead = v.shape[:-1]
        Z = self.decoder(v.reshape((-1, MOTION_DIM)))
        return Z.clamp(-1.0, 1.0).reshape(lead + (self.seq_len, LATENT_DIM))

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(Z))


# =================== 推理接口 ===================

def _as_tensor(x: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def encode_pose(coder: PoseCoder, y: np.ndarray) -> np.ndarray:
    """E_p, 输出 (..., 32) 且在 [-1, 1] 内"""
    coder.require_frozen("PoseCoder")
    check_pose_shape(y)
    with torch.no_grad():
        return coder.encode(_as_tensor(y)).numpy()


def decode_pose(coder: PoseCoder, z: np.ndarray) -> np.ndarray:
    """D_p, 输出根相对姿态 (..., 17, 3)"""
    coder.require_frozen("PoseCoder")
    z = np.asarray(z)
    if z.shape[-1] != LATENT_DIM:
        raise ShapeError(f"潜姿态维度必须为 {LATENT_DIM}, 当前: {z.shape}")
    with torch.no_grad():
        return coder.decode(_as_tensor(z)).numpy()


def encode_motion(coder: MotionCoder, Z: np.ndarray) -> np.ndarray:
    """E_m, 输入 (..., T, 32), 输出 (..., 128)"""
    coder.require_frozen("MotionCoder")
    with torch.no_grad():
        return coder.encode(_as_tensor(Z)).numpy()


def decode_motion(coder: MotionCoder, v: np.ndarray) -> np.ndarray:
    """D_m, 输出 (..., T, 32), 每个分量裁剪到 [-1, 1]"""
    coder.require_frozen("MotionCoder")
    v = np.asarray(v)
    if v.shape[-1] != MOTION_DIM:
        raise ShapeError(f"运动嵌入维度必须为 {MOTION_DIM}, 当前: {v.shape}")
    with torch.no_grad():
        return coder.decode(_as_tensor(v)).numpy()


def embed_sequences(pose_coder: PoseCoder, motion_coder: MotionCoder, Y: np.ndarray) -> np.ndarray:
    """E_m∘E_p, 输入 (..., T, 17, 3)"""
    return encode_motion(motion_coder, encode_pose(pose_coder, Y))


# =================== 训练 ===================

def _prior_sample(kind: str, shape, generator: torch.Generator) -> torch.Tensor:
    if kind == "uniform":
        return torch.rand(shape, generator=generator) * 2.0 - 1.0
    return torch.randn(shape, generator=generator)


def loss_stalled(curve: List[float], patience: int) -> bool:
    """最近 patience 个 epoch 的损失都没有低于此前的最好值"""
    if len(curve) <= patience:
        return False
    return min(curve[-patience:]) >= min(curve[:-patience])


def _check_divergence(log: TrainLog, name: str, patience: int, stage: str) -> None:
    curve = log.curves.get(name, [])
    if not curve:
        return
    if not np.isfinite(curve[-1]):
        logger.error(f"{stage} 损失出现 NaN/Inf (epoch {len(curve)})")
        raise TrainingFailureError(f"{stage} 训练发散: 损失非有限", log=log)
    if loss_stalled(curve, patience):
        best = min(curve[:-patience])
        logger.error(f"{stage} 最近 {patience} 个 epoch (至 epoch {len(curve)}) 损失没有低于此前最好值 {best:.6f}")
        raise TrainingFailureError(f"{stage} 训练发散: 损失在 {patience} 个 epoch 内没有下降", log=log)


def _adversarial_step(critic: PriorCritic, critic_opt: torch.optim.Optimizer, codes: torch.Tensor,
                      prior: torch.Tensor, steps: int) -> float:
    loss = torch.zeros(())
    for _ in range(steps):
        real = critic(prior)
        fake = critic(codes.detach())
        loss = F.binary_cross_entropy(real, torch.ones_like(real)) + F.binary_cross_entropy(fake, torch.zeros_like(fake))
        critic_opt.zero_grad()
        loss.backward()
        critic_opt.step()
    return float(loss.item())


def train_pose_aae(
    data: Union[UnpairedPoseBank, np.ndarray],
    config: PoseAAEConfig,
) -> Tuple[PoseCoder, TrainLog]:
    """
    训练姿态对抗自编码器

    重建损失与对抗损失 (鼓励 z 的聚合后验接近 Uniform([-1,1]^32)) 联合优化,
    判别器与生成器交替更新。

    Args:
        data: 姿态库 (使用其训练/验证划分) 或姿态数组 (全部用于训练, 验证取训练集)
        config: 训练配置

    Returns:
        Tuple[PoseCoder, TrainLog]: 冻结的编码器与训练日志

    Raises:
        TrainingFailureError: 损失 NaN 或在 patience 个 epoch 内不下降
    """
    if isinstance(data, UnpairedPoseBank):
        train, val = data.train_poses(), data.val_poses()
    else:
        train = check_pose_shape(np.asarray(data, dtype=np.float32)).reshape(-1, N_JOINTS, 3)
        val = train
    if len(train) == 0:
        raise TrainingFailureError("姿态库训练集为空")
    if len(val) == 0:
        val = train

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    coder = PoseCoder(hidden=config.hidden)
    critic = PriorCritic()
    opt = torch.optim.Adam(coder.parameters(), lr=config.lr)
    critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
    log = TrainLog(stage="pose_aae", seed=config.seed)
    Y = torch.as_tensor(train, dtype=torch.float32)

    logger.info(f"开始训练姿态 AAE: {len(train)} 个训练姿态, {config.epochs} 个 epoch")
    epochs = tqdm(range(config.epochs), desc="pose-aae", disable=not progress_enabled())
    for epoch in epochs:
        order = torch.randperm(len(Y), generator=generator)
        recon_total, adv_total, critic_total, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, len(Y), config.batch_size):
            batch = Y[order[start:start + config.batch_size]]
            codes = coder.encode(batch)
            if config.adv_weight > 0:
                prior = _prior_sample("uniform", codes.shape, generator)
                critic_total += _adversarial_step(critic, critic_opt, codes, prior, config.critic_steps)
            recon = F.mse_loss(coder.decode(codes), batch)
            loss = recon
            if config.adv_weight > 0:
                fooled = critic(codes)
                adv = F.binary_cross_entropy(fooled, torch.ones_like(fooled))
                loss = recon + config.adv_weight * adv
                adv_total += float(adv.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            recon_total += float(recon.item())
            n_batches += 1
        log.append("reconstruction", recon_total / n_batches)
        log.append("adversarial", adv_total / n_batches)
        log.append("critic", critic_total / n_batches)
        logger.debug(f"pose-aae epoch {epoch + 1}: recon={recon_total / n_batches:.6f}")
        _check_divergence(log, "reconstruction", config.patience, "pose_aae")

    coder.freeze()
    with torch.no_grad():
        train_pred = coder(Y).numpy()
        val_pred = coder(torch.as_tensor(val, dtype=torch.float32)).numpy()
    log.metrics["train_mpjpe"] = mpjpe(train_pred, train)
    log.metrics["val_mpjpe"] = mpjpe(val_pred, val)
    logger.info(f"姿态 AAE 训练完成: train MPJPE={log.metrics['train_mpjpe']:.2f}mm, "
                f"val MPJPE={log.metrics['val_mpjpe']:.2f}mm")
    return coder, log


def motion_training_sequences(bank: UnpairedPoseBank, long_views: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    运动 AAE 的训练/验证序列

    long_views 时训练集加入长序列的 15FPS 锚视图和中间窗口, 与慢放反向关系的输入分布一致。
    """
    train, val = bank.train_sequences(), bank.val_sequences()
    T = bank.seq_len
    long_train = bank.train_long_sequences()
    if long_views and len(long_train):
        anchors = slow_anchor_seq(long_train, T)
        middles = long_train[:, T // 2:T // 2 + T]
        train = np.concatenate([train, anchors, middles, reverse_time(middles)])
    return train.astype(np.float32), val.astype(np.float32)


def train_motion_aae(
    data: Union[UnpairedPoseBank, np.ndarray],
    pose_coder: PoseCoder,
    config: MotionAAEConfig,
) -> Tuple[MotionCoder, TrainLog]:
    """
    训练运动自编码器

    每条序列先经冻结的 E_p 得到 Z, 再最小化 ‖D_m∘E_m(Z) - Z‖,
    并可选地加入把 v 推向先验 (normal / uniform) 的对抗项。

    Args:
        data: 姿态库或形如 (M, T, 17, 3) 的序列数组
        pose_coder: 冻结的 PoseCoder
        config: 训练配置

    Raises:
        StageOrderError: pose_coder 未冻结
        TrainingFailureError: 训练发散
    """
    pose_coder.require_frozen("PoseCoder")
    if isinstance(data, UnpairedPoseBank):
        train, val = motion_training_sequences(data, config.long_views)
    else:
        train = check_pose_shape(np.asarray(data, dtype=np.float32))
        val = train
    if len(train) == 0:
        raise TrainingFailureError("运动训练序列为空")
    if len(val) == 0:
        val = train
    seq_len = train.shape[1]

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    coder = MotionCoder(hidden=config.hidden, seq_len=seq_len)
    critic = PriorCritic(dim=MOTION_DIM)
    opt = torch.optim.Adam(coder.parameters(), lr=config.lr)
    critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
    log = TrainLog(stage="motion_aae", seed=config.seed)
    use_adv = config.prior != "none" and config.adv_weight > 0

    with torch.no_grad():
        Z = pose_coder.encode(torch.as_tensor(train))
        Z_val = pose_coder.encode(torch.as_tensor(val))

    logger.info(f"开始训练运动 AAE: {len(Z)} 条序列, 先验={config.prior}, {config.epochs} 个 epoch")
    epochs = tqdm(range(config.epochs), desc="motion-aae", disable=not progress_enabled())
    for epoch in epochs:
        order = torch.randperm(len(Z), generator=generator)
        recon_total, n_batches = 0.0, 0
        for start in range(0, len(Z), config.batch_size):
            batch = Z[order[start:start + config.batch_size]]
            v = coder.encode(batch)
            if use_adv:
                _adversarial_step(critic, critic_opt, v, _prior_sample(config.prior, v.shape, generator), 1)
            recon = F.mse_loss(coder.decode(v), batch)
            loss = recon
            if use_adv:
                fooled = critic(v)
                loss = recon + config.adv_weight * F.binary_cross_entropy(fooled, torch.ones_like(fooled))
            opt.zero_grad()
            loss.backward()
            opt.step()
            recon_total += float(recon.item())
            n_batches += 1
        log.append("reconstruction", recon_total / n_batches)
        logger.debug(f"motion-aae epoch {epoch + 1}: recon={recon_total / n_batches:.6f}")
        _check_divergence(log, "reconstruction", config.patience, "motion_aae")

    coder.freeze()
    with torch.no_grad():
        Z_hat = coder(Z_val)
        decoded = pose_coder.decode(Z_hat).numpy()
    log.metrics["val_latent_error"] = float((Z_hat - Z_val).abs().mean().item())
    log.metrics["val_mpjpe"] = mpjpe(decoded, val)
    logger.info(f"运动 AAE 训练完成: val 潜序列误差={log.metrics['val_latent_error']:.5f}, "
                f"val MPJPE={log.metrics['val_mpjpe']:.2f}mm")
    return coder, log


# =================== 诊断 ===================

def prior_fit_stats(coder: PoseCoder, poses: np.ndarray) -> Dict[str, float]:
    """潜变量的逐分量统计, 衡量与均匀先验的贴合程度"""
    z = encode_pose(coder, poses).reshape(-1, LATENT_DIM)
    mean, std = z.mean(axis=0), z.std(axis=0)
    span = (z.max(axis=0) - z.min(axis=0)) / 2.0
    return {
        "max_abs_mean": float(np.abs(mean).max()),
        "min_std": float(std.min()),
        "max_std": float(std.max()),
        "min_span": float(span.min()),
        "mean_span": float(span.mean()),
        "max_abs_z": float(np.abs(z).max()),
    }


def decode_plausibility_rate(coder: PoseCoder, n: int = 100, seed: int = 0) -> Dict[str, float]:
    """从均匀先验采样 n 个 z 解码, 统计结构有效率与骨长合理率"""
    z = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, LATENT_DIM)).astype(np.float32)
    poses = decode_pose(coder, z)
    structural = np.isfinite(poses).all(axis=(-1, -2)) & (np.abs(poses[:, 0]).max(axis=-1) <= 1e-6)
    return {
        "structural_rate": float(structural.mean()),
        "plausible_rate": float(is_plausible(poses).mean()),
    }


def reversal_distinctness(pose_coder: PoseCoder, motion_coder: MotionCoder, sequences: np.ndarray,
                          tol: float = 1e-6) -> float:
    """非回文序列中 E_m(Z) 与 E_m(reverse(Z)) 不同的比例"""
    sequences = np.asarray(sequences)
    palindromic = np.all(np.isclose(sequences, sequences[:, ::-1]), axis=(1, 2, 3))
    candidates = sequences[~palindromic]
    if len(candidates) == 0:
        return 1.0
    v = embed_sequences(pose_coder, motion_coder, candidates)
    v_rev = embed_sequences(pose_coder, motion_coder, reverse_time(candidates))
    return float((np.linalg.norm(v - v_rev, axis=-1) > tol).mean())


def build_pose_coder(hparams: Optional[Dict] = None) -> PoseCoder:
    hparams = hparams or {}
    return PoseCoder(hidden=hparams.get("hidden", 256), latent=hparams.get("latent", LATENT_DIM))


def build_motion_coder(hparams: Optional[Dict] = None) -> MotionCoder:
    hparams = hparams or {}
    return MotionCoder(hidden=hparams.get("hidden", 128), seq_len=hparams.get("seq_len", SEQ_LEN))
