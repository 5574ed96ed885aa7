#!/usr/bin/env python3
"""
数值基础模块
马氏距离、样本协方差、正则化逆、L∞截断与各类范数
全部为64位浮点纯函数
"""

from typing import Sequence

import numpy as np
import scipy.linalg

from core.errors import ShapeMismatchError

DEFAULT_LAMBDA_REG = 1e-3


def _as_finite(name: str, array) -> np.ndarray:
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} 含非有限值")
    return arr


def mahalanobis_sq(x, y, s_inv) -> float:
    """平方马氏距离 (x−y)ᵀ S⁻¹ (x−y)"""
    x = _as_finite("x", x)
    y = _as_finite("y", y)
    s_inv = _as_finite("s_inv", s_inv)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeMismatchError(f"向量长度不一致: {x.shape} vs {y.shape}")
    if s_inv.shape != (x.size, x.size):
        raise ShapeMismatchError(f"S⁻¹ 形状 {s_inv.shape} 与维度 {x.size} 不匹配")
    diff = x - y
    value = float(diff @ s_inv @ diff)
    # 正定矩阵下舍入误差可能给出极小负数
    return max(value, 0.0)


def mahalanobis_sq_rows(points: np.ndarray, y: np.ndarray, s_inv: np.ndarray) -> np.ndarray:
    """批量版本：points 每一行到 y 的平方马氏距离"""
    diff = np.asarray(points, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    values = np.einsum('ij,jk,ik->i', diff, s_inv, diff)
    return np.maximum(values, 0.0)


def covariance(features: Sequence) -> np.ndarray:
    """无偏样本协方差（除以 n−1）"""
    data = _as_finite("features", np.asarray(features, dtype=np.float64))
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("协方差至少需要2个等长向量")
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (data.shape[0] - 1)
    return (cov + cov.T) / 2.0


def regularized_inverse(s, lambda_reg: float = DEFAULT_LAMBDA_REG) -> np.ndarray:
    """(S + λI)⁻¹，经 Cholesky 分解求解"""
    s = _as_finite("S", s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatchError(f"S 必须是方阵, 实际 {s.shape}")
    if lambda_reg < 0:
        raise ValueError("lambda_reg 不能为负")
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(s).max(initial=0.0)))):
        raise ValueError("S 不对称")
    n = s.shape[0]
    regularized = s + lambda_reg * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(regularized, lower=True)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"正则化后仍无法分解: {e}") from e
    inverse = scipy.linalg.cho_solve(factor, np.eye(n))
    return (inverse + inverse.T) / 2.0


def linf_clip(v, bound: float) -> np.ndarray:
    """逐元素截断到 [−bound, +bound]"""
    if bound <= 0:
        raise ValueError("bound 必须为正")
    return np.clip(np.asarray(v, dtype=np.float64), -bound, bound)


def l0_norm(v) -> int:
    return int(np.count_nonzero(np.asarray(v)))


def l1_norm(v) -> float:
    return float(np.abs(np.asarray(v, dtype=np.float64)).sum())


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel()))
