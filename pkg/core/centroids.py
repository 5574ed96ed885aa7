#!/usr/bin/env python3
"""
每个模态的聚类结构
k-means++ 初始化 + Lloyd 迭代得到簇中心，图库特征协方差的正则化逆作为马氏度量
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from core.embedder import ModalityModel, forward_batch
from core.errors import ShapeMismatchError
from core.logger_helper import logger
from core.numerics import DEFAULT_LAMBDA_REG, covariance, mahalanobis_sq_rows, regularized_inverse


@dataclass(eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    n_iter: int
    objective_history: List[float] = field(default_factory=list)


@dataclass(eq=False)
class CentroidBank:
    modality_id: int
    centroids: np.ndarray
    s_inv: np.ndarray

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("簇中心表为空")
        d = self.centroids.shape[1]
        if self.s_inv.shape != (d, d):
            raise ShapeMismatchError(f"s_inv 形状 {self.s_inv.shape} 与特征维度 {d} 不符")

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def d_feat(self) -> int:
        return self.centroids.shape[1]


def _sq_euclidean(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) 平方欧氏距离矩阵"""
    return ((points[:, np.newaxis, :] - centers[np.newaxis, :, :]) ** 2).sum(axis=2)


def _kmeans_plus_plus(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_euclidean(points, points[chosen])[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # 所有点都已与某中心重合
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_euclidean(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def fit_kmeans(features, n_clusters: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd 迭代；分配不再变化或达到 max_iters 时停止；空簇重置为离所属中心最远的点"""
    points = np.asarray(features, dtype=np.float64)
    if n_clusters < 2:
        raise ValueError("n_clusters 至少为2")
    if points.ndim != 2 or points.shape[0] < n_clusters:
        raise ValueError(f"特征数 {points.shape[0] if points.ndim == 2 else 0} 少于簇数 {n_clusters}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, n_clusters, rng)
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        distances = _sq_euclidean(points, centroids)
        new_labels = distances.argmin(axis=1)
        history.append(float(distances[np.arange(len(points)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for c in range(n_clusters):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)

        # 空簇重置
        for c in range(n_clusters):
            if np.any(labels == c):
                continue
            own = _sq_euclidean(points, centroids)[np.arange(len(points)), labels]
            far = int(own.argmax())
            centroids[c] = points[far]
            labels[far] = c

    return KMeansResult(centroids, labels, n_iter, history)


def kmeans(features, n_clusters: int, max_iters: int = 100, seed: int = 0) -> np.ndarray:
    return fit_kmeans(features, n_clusters, max_iters, seed).centroids


def build_bank(model: ModalityModel, gallery_images: np.ndarray, n_clusters: int,
               lambda_reg: float = DEFAULT_LAMBDA_REG, seed: int = 0, max_iters: int = 100) -> CentroidBank:
    """图库特征 → k-means 中心 + (S + λI)⁻¹"""
    gallery_images = np.asarray(gallery_images, dtype=np.float64)
    if gallery_images.shape[0] == 0:
        raise ValueError("图库为空")
    features = forward_batch(model, gallery_images)
    centroids = kmeans(features, n_clusters, max_iters, seed)
    s_inv = regularized_inverse(covariance(features), lambda_reg)
    logger.debug(f"模态{model.modality_id} 聚类库: {n_clusters} 个中心, 图库 {len(features)} 张")
    return CentroidBank(model.modality_id, centroids, s_inv)


def nearest_farthest(f, bank: CentroidBank) -> Tuple[np.ndarray, np.ndarray]:
    """按马氏距离返回 (最近中心 C_p, 最远中心 C_n)，并列时取下标小者"""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (bank.d_feat,):
        raise ShapeMismatchError(f"特征长度 {f.shape} 与聚类库维度 {bank.d_feat} 不符")
    distances = mahalanobis_sq_rows(bank.centroids, f, bank.s_inv)
    return bank.centroids[int(distances.argmin())], bank.centroids[int(distances.argmax())]


def nearest_farthest_batch(features: np.ndarray, bank: CentroidBank) -> Tuple[np.ndarray, np.ndarray]:
    """批量版本，返回 (n, d) 的 C_p 与 C_n"""
    features = np.asarray(features, dtype=np.float64)
    diff = features[:, np.newaxis, :] - bank.centroids[np.newaxis, :, :]
    distances = np.einsum('nkd,de,nke->nk', diff, bank.s_inv, diff)
    return bank.centroids[distances.argmin(axis=1)], bank.centroids[distances.argmax(axis=1)]
