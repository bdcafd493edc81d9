"""
Plot Tools - 图表工具

生成五个固定文件名的 PNG:
    latent_distance_pose.png / latent_distance_motion.png  各空间的潜空间距离条形图
    loss_traces.png                                         各能量项的损失轨迹
    ablation.png                                            消融中位数条形图
    relation_sweep.png                                      关系扫描: 潜空间距离与目标域 MPJPE 散点图
每张图的数值以 JSON 写入 PNG 的 Description 元数据。
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..core.models import ExperimentReport  # noqa: E402
from ..utils.runtime import read_trace_csv  # noqa: E402
from .evaluation_tools import ablation_medians  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_FILES = (
    "latent_distance_pose.png",
    "latent_distance_motion.png",
    "loss_traces.png",
    "ablation.png",
    "relation_sweep.png",
)


def _save(fig, path: Path, values: Dict) -> Path:
    metadata = {"Description": json.dumps(values, sort_keys=True)}
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata=metadata)
    plt.close(fig)
    logger.info(f"图表已保存: {path}")
    return path


def _bar_chart(path: Path, values: Dict[str, float], title: str, ylabel: str,
               errors: Dict[str, float] = None) -> Path:
    names = list(values)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 4.0))
    yerr = [errors[name] for name in names] if errors else None
    ax.bar(np.arange(len(names)), [values[name] for name in names], yerr=yerr, capsize=3, color="#4878a8")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path, values)


def plot_latent_distances(report: ExperimentReport, plots_dir: Path) -> List[Path]:
    paths = []
    for space, symbol in (("pose", "d^z"), ("motion", "d^v")):
        rows = [row for row in report.latent_distances if row.space == space]
        if not rows:
            logger.warning(f"报告中没有 {space} 空间的潜空间距离, 跳过")
            continue
        values = {row.rule: row.mean for row in rows}
        errors = {row.rule: row.std for row in rows}
        path = plots_dir / f"latent_distance_{space}.png"
        paths.append(_bar_chart(path, values, f"latent distance ({space})", symbol, errors))
    return paths


def plot_loss_traces(report: ExperimentReport, out_dir: Path, plots_dir: Path) -> List[Path]:
    relative = report.loss_traces.get("adapt")
    if relative is None or not (out_dir / relative).exists():
        logger.warning("报告中没有损失轨迹, 跳过")
        return []
    rows = read_trace_csv(out_dir / relative)
    if not rows:
        logger.warning("损失轨迹为空, 跳过")
        return []

    terms: Dict[str, List[tuple]] = {}
    for row in rows:
        terms.setdefault(row["term"], []).append((row["iteration"], row["value"]))
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for term, points in terms.items():
        iterations, values = zip(*points)
        ax.plot(iterations, values, label=term, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    ax.set_title("adaptation loss traces")
    ax.legend()
    final = {term: points[-1][1] for term, points in terms.items()}
    return [_save(fig, plots_dir / "loss_traces.png", final)]


def plot_ablation(report: ExperimentReport, plots_dir: Path) -> List[Path]:
    if not report.ablation:
        logger.warning("报告中没有消融结果, 跳过")
        return []
    medians = {stage: values["mpjpe"] for stage, values in ablation_medians(report.ablation).items()}
    return [_bar_chart(plots_dir / "ablation.png", medians, "target MPJPE by energy set", "median MPJPE (mm)")]


def plot_relation_sweep(report: ExperimentReport, plots_dir: Path) -> List[Path]:
    if not report.relation_sweep:
        logger.warning("报告中没有关系扫描结果, 跳过")
        return []
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    values = {}
    for row in report.relation_sweep:
        ax.scatter(row.latent_distance, row.mpjpe, color="#4878a8")
        ax.annotate(row.rule, (row.latent_distance, row.mpjpe), textcoords="offset points", xytext=(4, 4))
        values[row.rule] = [row.latent_distance, row.mpjpe]
    ax.set_xlabel("d^z")
    ax.set_ylabel("target MPJPE (mm)")
    ax.set_title("single pose relation sweep")
    return [_save(fig, plots_dir / "relation_sweep.png", values)]


def emit_plots(report: ExperimentReport, out_dir: Union[str, Path]) -> List[Path]:
    """
    生成全部图表

    Args:
        report: 实验报告
        out_dir: 产物目录, 图表写入 out_dir/plots

    Returns:
        List[Path]: 写出的文件; 空报告时不写任何文件
    """
    out_dir = Path(out_dir)
    if report.is_empty():
        logger.warning("实验报告为空, 不生成图表")
        return []
    plots_dir = out_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    paths = plot_latent_distances(report, plots_dir)
    paths += plot_loss_traces(report, out_dir, plots_dir)
    paths += plot_ablation(report, plots_dir)
    paths += plot_relation_sweep(report, plots_dir)
    return paths
