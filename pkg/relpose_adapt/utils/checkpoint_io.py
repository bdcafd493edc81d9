"""
Checkpoint IO - 检查点读写

检查点是一个目录: manifest.json (结构超参数、阶段名、训练种子、参数张量名/形状、校验和)
加上每个命名参数张量一个小端 float32 文件。
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from ..core.errors import CheckpointError, FrozenViolationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def state_checksum(module: nn.Module) -> str:
    """按参数名排序后对 float32 小端字节做 sha256"""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_checkpoint(
    module: nn.Module,
    directory: Union[str, Path],
    stage: str,
    seed: int,
    hparams: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    """
    保存检查点

    Args:
        module: 待保存的模块
        directory: 目标目录 (不存在时创建)
        stage: 阶段名称
        seed: 训练随机种子
        hparams: 结构超参数
        extra: 附加的清单字段 (例如拟合报告)

    Returns:
        str: 参数校验和
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in sorted(module.state_dict().items()):
        array = tensor.detach().cpu().contiguous().numpy().astype("<f4")
        (directory / _blob_name(name)).write_bytes(array.tobytes(order="C"))
        tensors[name] = {"shape": list(array.shape), "file": _blob_name(name)}
    checksum = state_checksum(module)
    manifest = {
        "stage": stage,
        "seed": seed,
        "hparams": hparams or {},
        "tensors": tensors,
        "dtype": "<f4",
        "checksum": checksum,
    }
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"检查点已保存: {directory} (stage={stage}, checksum={checksum[:12]})")
    return checksum


def read_manifest(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise CheckpointError(f"检查点清单不存在: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_state(directory: Union[str, Path], module: nn.Module, verify: bool = True) -> Dict[str, Any]:
    """
    把检查点参数载入 module

    Returns:
        dict: 清单内容

    Raises:
        FrozenViolationError: 载入后的校验和与清单不一致
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = {}
    for name, meta in manifest["tensors"].items():
        data = np.fromfile(directory / meta["file"], dtype="<f4").reshape(meta["shape"])
        state[name] = torch.from_numpy(data.astype(np.float32))
    module.load_state_dict(state)
    if verify:
        checksum = state_checksum(module)
        if checksum != manifest["checksum"]:
            raise FrozenViolationError(
                f"检查点校验和不一致: {directory} ({checksum[:12]} != {manifest['checksum'][:12]})"
            )
    logger.debug(f"检查点已载入: {directory}")
    return manifest


def verify_checkpoint(directory: Union[str, Path]) -> bool:
    """不构建模型, 直接对文件重新计算校验和"""
    directory = Path(directory)
    try:
        manifest = read_manifest(directory)
    except CheckpointError:
        return False
    digest = hashlib.sha256()
    for name in sorted(manifest["tensors"]):
        meta = manifest["tensors"][name]
        path = directory / meta["file"]
        if not path.exists():
            return False
        digest.update(name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest() == manifest["checksum"]
