"""
Bundle IO - 数据集目录读写

目录结构: manifest.json (形状、dtype、划分、风格参数、种子) + 小端 float32 姿态文件 + uint8 图像文件。
目标域真值单独写入 sealed_gt.bin, 只在清单的 eval 节中引用。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from ..core.config import RenderStyle
from ..core.errors import CheckpointError
from ..core.synth_world import LabeledSourceSet, SealedGroundTruth, TargetVideoSet, UnpairedPoseBank
from .validators import validate_image_array, validate_pose_array

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SEALED_NAME = "sealed_gt.bin"

_BANK_ARRAYS = (
    "poses", "pose_split", "sequences", "sequence_ids", "sequence_split",
    "long_sequences", "long_sequence_ids", "long_split",
    "source_sequences", "source_ids", "target_ids",
)
_DTYPES = {"float32": "<f4", "uint8": "|u1", "int64": "<i8"}


def _dtype_name(array: np.ndarray) -> str:
    if array.dtype == np.uint8:
        return "uint8"
    if np.issubdtype(array.dtype, np.integer):
        return "int64"
    return "float32"


def _write_array(directory: Path, name: str, array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array)
    kind = _dtype_name(array)
    data = np.ascontiguousarray(array.astype(_DTYPES[kind]))
    (directory / f"{name}.bin").write_bytes(data.tobytes(order="C"))
    return {"file": f"{name}.bin", "shape": list(array.shape), "dtype": kind}


def _read_array(directory: Path, meta: Dict[str, Any]) -> np.ndarray:
    path = directory / meta["file"]
    if not path.exists():
        raise CheckpointError(f"数据文件缺失: {path}")
    data = np.fromfile(path, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
    return data.astype({"float32": np.float32, "uint8": np.uint8, "int64": np.int64}[meta["dtype"]])


def _read_manifest(directory: Path) -> Dict[str, Any]:
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise CheckpointError(f"数据清单不存在: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _check_images(images: np.ndarray, size: int, directory: Path) -> None:
    valid, errors = validate_image_array(images, size)
    if not valid:
        raise CheckpointError(f"图像数据无效 {directory}: {errors}")


def _write_manifest(directory: Path, manifest: Dict[str, Any]) -> None:
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def save_bank(bank: UnpairedPoseBank, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {name: _write_array(directory, name, getattr(bank, name)) for name in _BANK_ARRAYS}
    _write_manifest(directory, {"kind": "pose_bank", "seed": bank.seed, "seq_len": bank.seq_len, "arrays": arrays})
    logger.info(f"姿态库已保存: {directory}")
    return directory


def load_bank(directory: Union[str, Path]) -> UnpairedPoseBank:
    """载入姿态库; 目标域姿态不在姿态库目录中, 载入后 target_sequences 为 None"""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    arrays = {name: _read_array(directory, meta) for name, meta in manifest["arrays"].items() if name in _BANK_ARRAYS}
    valid, errors = validate_pose_array(arrays["poses"])
    if not valid:
        raise CheckpointError(f"姿态库数据无效: {errors}")
    return UnpairedPoseBank(seed=manifest["seed"], seq_len=manifest["seq_len"], **arrays)


def bank_seq_len(directory: Union[str, Path]) -> int:
    """只读清单中的 T, 不载入任何数组"""
    return int(_read_manifest(Path(directory))["seq_len"])


def save_source_set(source_set: LabeledSourceSet, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: _write_array(directory, name, getattr(source_set, name))
        for name in ("images", "poses", "sequence_ids", "style_index", "split")
    }
    manifest = {
        "kind": "source_set",
        "arrays": arrays,
        "styles": [style.model_dump(mode="json") for style in source_set.styles],
    }
    _write_manifest(directory, manifest)
    logger.info(f"源域数据集已保存: {directory} ({len(source_set)} 个样本)")
    return directory


def load_source_set(directory: Union[str, Path]) -> LabeledSourceSet:
    directory = Path(directory)
    manifest = _read_manifest(directory)
    arrays = {name: _read_array(directory, meta) for name, meta in manifest["arrays"].items()}
    styles = [RenderStyle.model_validate(style) for style in manifest["styles"]]
    _check_images(arrays["images"], styles[0].image_size, directory)
    return LabeledSourceSet(styles=styles, **arrays)


def save_target_set(target_set: TargetVideoSet, directory: Union[str, Path]) -> Path:
    """保存目标域视频; 真值写入单独的 sealed_gt.bin, 只在清单 eval 节中出现"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: _write_array(directory, name, getattr(target_set, name))
        for name in ("clips", "long_clips", "clip_sequence_ids", "long_sequence_ids")
    }
    ground_truth = np.ascontiguousarray(target_set.sealed_gt.unseal().astype("<f4"))
    (directory / SEALED_NAME).write_bytes(ground_truth.tobytes(order="C"))
    manifest = {
        "kind": "target_set",
        "arrays": arrays,
        "style": target_set.style.model_dump(mode="json"),
        "eval": {"sealed_gt": {"file": SEALED_NAME, "shape": list(ground_truth.shape), "dtype": "float32"}},
    }
    _write_manifest(directory, manifest)
    logger.info(f"目标域视频已保存: {directory}")
    return directory


def load_target_set(directory: Union[str, Path]) -> TargetVideoSet:
    """载入目标域视频; 真值保持密封, 只记录路径"""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    arrays = {name: _read_array(directory, meta) for name, meta in manifest["arrays"].items()}
    style = RenderStyle.model_validate(manifest["style"])
    _check_images(arrays["clips"], style.image_size, directory)
    sealed = manifest["eval"]["sealed_gt"]
    return TargetVideoSet(
        style=style,
        sealed_gt=SealedGroundTruth(path=directory / sealed["file"], shape=sealed["shape"]),
        **arrays,
    )


def bundle_shapes(directory: Union[str, Path]) -> Dict[str, Tuple[int, ...]]:
    manifest = _read_manifest(Path(directory))
    return {name: tuple(meta["shape"]) for name, meta in manifest["arrays"].items()}
