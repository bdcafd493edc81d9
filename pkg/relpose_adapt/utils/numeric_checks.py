"""
Numeric Checks - 数值梯度检查

用中心差分核对自动微分梯度, 在 float64 下对随机抽取的参数标量逐个比较。
"""

import logging
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.nn.Parameter],
    n_points: int = 10,
    eps: float = 1e-6,
    seed: int = 0,
    atol: float = 1e-8,
) -> Dict[str, float]:
    """
    比较解析梯度与中心差分

    Args:
        loss_fn: 无参数闭包, 每次调用都以相同输入重新计算标量损失
        params: 参与检查的参数 (建议先转换为 float64)
        n_points: 随机抽取的标量个数
        eps: 差分步长
        seed: 抽样种子
        atol: 相对误差分母的下限, 避免梯度接近 0 时放大误差

    Returns:
        dict: max_rel_error / max_abs_error / n_points
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    probs = sizes / sizes.sum()
    rel_errors: List[float] = []
    abs_errors: List[float] = []
    with torch.no_grad():
        for _ in range(n_points):
            k = int(rng.choice(len(params), p=probs))
            index = int(rng.integers(0, sizes[k]))
            flat = params[k].view(-1)
            original = flat[index].item()
            flat[index] = original + eps
            plus = float(loss_fn().item())
            flat[index] = original - eps
            minus = float(loss_fn().item())
            flat[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[k].view(-1)[index].item())
            abs_err = abs(numeric - exact)
            abs_errors.append(abs_err)
            rel_errors.append(abs_err / max(abs(numeric), abs(exact), atol))
    result = {"max_rel_error": max(rel_errors), "max_abs_error": max(abs_errors), "n_points": n_points}
    logger.debug(f"梯度检查: {result}")
    return result
