#!/usr/bin/env python3
"""
检索与攻击指标
- CMC / Rank-k、mAP（平铺协议，无摄像头过滤，欧氏特征距离）
- 攻击成功率：Top-1 近邻身份不一致
- 诊断量：适应度、互补性 α、α 运行最大值存档
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from core.embedder import ModalityModel, forward_batch
from core.numerics import l0_norm

BASELINE_ZERO = "baseline-zero"
SUCCESS_MODES = ("rank1-mismatch",)
DEFAULT_RANKS = (1, 5, 10)

Alpha = Union[float, str]


@dataclass(eq=False)
class DistanceMatrix:
    """行为查询，列为图库"""

    distances: np.ndarray
    query_labels: np.ndarray
    gallery_labels: np.ndarray
    flat_protocol: bool = True

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.distances.ndim != 2:
            raise ValueError("距离矩阵必须是二维")
        if self.distances.shape != (len(self.query_labels), len(self.gallery_labels)):
            raise ValueError(f"距离矩阵 {self.distances.shape} 与标签长度 "
                             f"({len(self.query_labels)}, {len(self.gallery_labels)}) 不符")
        if not np.all(np.isfinite(self.distances)):
            raise ValueError("距离矩阵含非有限值")


def pairwise_euclidean(query_features: np.ndarray, gallery_features: np.ndarray) -> np.ndarray:
    return cdist(np.asarray(query_features, dtype=np.float64), np.asarray(gallery_features, dtype=np.float64))


def _ranked_matches(dm: DistanceMatrix) -> np.ndarray:
    """按距离升序（并列取图库下标小者）排列后的命中矩阵"""
    if dm.distances.shape[1] == 0:
        raise ValueError("图库为空")
    missing = np.setdiff1d(dm.query_labels, dm.gallery_labels)
    if missing.size:
        raise ValueError(f"查询身份 {missing.tolist()} 不在图库中")
    order = np.argsort(dm.distances, axis=1, kind='stable')
    return dm.gallery_labels[order] == dm.query_labels[:, np.newaxis]


def cmc_rank(dm: DistanceMatrix, ks: Iterable[int] = DEFAULT_RANKS) -> Dict[int, float]:
    matches = _ranked_matches(dm)
    first_hit = matches.argmax(axis=1)
    result = {}
    for k in ks:
        if k < 1:
            raise ValueError(f"rank 必须 ≥ 1, 实际 {k}")
        result[int(k)] = float(np.mean(first_hit < k))
    return result


def mean_ap(dm: DistanceMatrix) -> float:
    matches = _ranked_matches(dm)
    positions = np.arange(1, matches.shape[1] + 1)
    aps = []
    for row in matches:
        hits = np.cumsum(row)
        precision = hits[row] / positions[row]
        aps.append(precision.mean())
    return float(np.mean(aps))


def _perturbed(images: np.ndarray, perturbation: Optional[np.ndarray]) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if perturbation is None:
        return images
    return np.clip(images + perturbation, 0.0, 255.0)


def retrieval_distances(model: ModalityModel, query_images: np.ndarray, query_labels: np.ndarray,
                        gallery_images: np.ndarray, gallery_labels: np.ndarray,
                        perturbation: Optional[np.ndarray] = None) -> DistanceMatrix:
    """扰动只加在查询图像上，图库保持干净"""
    query_features = forward_batch(model, _perturbed(query_images, perturbation))
    gallery_features = forward_batch(model, np.asarray(gallery_images, dtype=np.float64))
    return DistanceMatrix(pairwise_euclidean(query_features, gallery_features), query_labels, gallery_labels)


def attack_success(model: ModalityModel, query_images: np.ndarray, query_labels: np.ndarray,
                   gallery_images: np.ndarray, gallery_labels: np.ndarray,
                   perturbation: Optional[np.ndarray] = None,
                   mode: str = "rank1-mismatch") -> Tuple[np.ndarray, float]:
    """逐查询成功标记与成功率；成功 = Top-1 图库近邻身份与查询不同"""
    if mode not in SUCCESS_MODES:
        raise ValueError(f"未知成功判定模式: {mode}")
    if len(gallery_labels) == 0:
        raise ValueError("图库为空")
    dm = retrieval_distances(model, query_images, query_labels, gallery_images, gallery_labels, perturbation)
    return success_from_distances(dm)


def success_from_distances(dm: DistanceMatrix) -> Tuple[np.ndarray, float]:
    if dm.distances.shape[1] == 0:
        raise ValueError("图库为空")
    top1 = np.argsort(dm.distances, axis=1, kind='stable')[:, 0]
    success = dm.gallery_labels[top1] != dm.query_labels
    return success, float(success.mean()) if success.size else 0.0


def majority_success(rate: float) -> int:
    """按多数阈值把单模型成功率二值化"""
    return int(rate > 0.5)


@dataclass
class RetrievalMetrics:
    ranks: Dict[int, float]
    mean_ap: float
    success_rate: float


def evaluate_retrieval(model: ModalityModel, query_images: np.ndarray, query_labels: np.ndarray,
                       gallery_images: np.ndarray, gallery_labels: np.ndarray,
                       perturbation: Optional[np.ndarray] = None,
                       ks: Sequence[int] = DEFAULT_RANKS) -> RetrievalMetrics:
    dm = retrieval_distances(model, query_images, query_labels, gallery_images, gallery_labels, perturbation)
    _, rate = success_from_distances(dm)
    return RetrievalMetrics(cmc_rank(dm, ks), mean_ap(dm), rate)


def complementarity(r_base: float, r_combined: float) -> Alpha:
    """α = (r_comb − r_base) / r_base；基线为0时返回 BASELINE_ZERO"""
    if r_base == 0:
        return BASELINE_ZERO
    if r_base < 0:
        raise ValueError("基线成功率不能为负")
    return (r_combined - r_base) / r_base


@dataclass
class FitnessParams:
    weights: Tuple[float, ...]
    lambda_sparsity: float = 0.0

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ValueError("权重必须非负且至少一个为正")
        if self.lambda_sparsity < 0:
            raise ValueError("lambda_sparsity 不能为负")

    @classmethod
    def uniform(cls, n_models: int, lambda_sparsity: float = 0.0) -> "FitnessParams":
        return cls(tuple([1.0 / n_models] * n_models), lambda_sparsity)


def fitness(rates: Sequence[float], params: FitnessParams, eta=None) -> float:
    """Σ w_i·r_i − λ‖η‖₀，仅作诊断"""
    if len(rates) != len(params.weights):
        raise ValueError(f"成功率数量 {len(rates)} 与权重数量 {len(params.weights)} 不符")
    if eta is None:
        sparsity = 0
    elif hasattr(eta, "l0"):
        sparsity = eta.l0
    else:
        sparsity = l0_norm(eta)
    return float(np.dot(params.weights, rates) - params.lambda_sparsity * sparsity)


@dataclass
class AlphaArchive:
    """每个模型的最佳 α；基线为0的模型记为 BASELINE_ZERO 且不参与更新

    初始值 0.0 对应 η = 0（组合成功率等于基线）
    """

    baselines: Tuple[float, ...]
    best: List[Alpha] = field(default_factory=list)
    generation: int = 0

    def __post_init__(self):
        self.baselines = tuple(float(r) for r in self.baselines)
        if not self.best:
            self.best = [BASELINE_ZERO if r == 0 else 0.0 for r in self.baselines]
        if len(self.best) != len(self.baselines):
            raise ValueError("存档长度与基线数量不符")


def update_archive(archive: AlphaArchive, observed: Sequence[Alpha]) -> AlphaArchive:
    if len(observed) != len(archive.best):
        raise ValueError("观测 α 数量与存档不符")
    best: List[Alpha] = []
    for current, value in zip(archive.best, observed):
        if current == BASELINE_ZERO or value == BASELINE_ZERO:
            best.append(current)
        else:
            best.append(max(current, float(value)))
    return AlphaArchive(archive.baselines, best, archive.generation + 1)
