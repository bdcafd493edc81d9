"""
Runtime - 运行时工具

随机种子、单线程确定性模式、进度条开关与 CSV 轨迹读写
"""

import csv
import logging
import os
import random
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "term", "value", "seed")
ABLATION_COLUMNS = ("stage", "seed", "mpjpe", "pa_mpjpe")
SWEEP_COLUMNS = ("rule", "latent_distance", "mpjpe", "pa_mpjpe")


def progress_enabled() -> bool:
    """RELPOSE_PROGRESS=false 或日志级别高于 INFO 时关闭进度条"""
    if os.getenv("RELPOSE_PROGRESS", "true").lower() in ("false", "0", "no"):
        return False
    return logging.getLogger().getEffectiveLevel() <= logging.INFO


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def configure_threads(single_threaded: bool) -> None:
    """单线程确定性模式: 一个 intra-op 线程 + 确定性算法"""
    if single_threaded:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        logger.info("已启用单线程确定性模式")
    else:
        torch.use_deterministic_algorithms(False)


def write_rows(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: (repr(value) if isinstance(value, float) else value) for key, value in row.items()})
    return path


def read_rows(path: Union[str, Path], numeric: Sequence[str] = ()) -> List[Dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            for key in numeric:
                value = float(row[key])
                row[key] = int(value) if key in ("iteration", "seed") else value
            rows.append(row)
    return rows


def write_trace_csv(path: Union[str, Path], traces: Iterable[Dict]) -> Path:
    """损失轨迹 CSV: iteration, term, value, seed"""
    return write_rows(path, TRACE_COLUMNS, traces)


def read_trace_csv(path: Union[str, Path]) -> List[Dict]:
    return read_rows(path, numeric=("iteration", "value", "seed"))


def write_ablation_csv(path: Union[str, Path], rows: Iterable[Dict]) -> Path:
    """消融 CSV: stage, seed, mpjpe, pa_mpjpe"""
    return write_rows(path, ABLATION_COLUMNS, rows)


def read_ablation_csv(path: Union[str, Path]) -> List[Dict]:
    return read_rows(path, numeric=("seed", "mpjpe", "pa_mpjpe"))


def write_sweep_csv(path: Union[str, Path], rows: Iterable[Dict]) -> Path:
    """关系扫描 CSV: rule, latent_distance, mpjpe, pa_mpjpe"""
    return write_rows(path, SWEEP_COLUMNS, rows)
