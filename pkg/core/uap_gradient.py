#!/usr/bin/env python3
"""
第一层优化：梯度层通用扰动 δ
马氏三元组元损失 + L1归一化动量 + 符号步长 + L∞截断
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.centroids import CentroidBank, nearest_farthest_batch
from core.dataset import SPLIT_TRAIN, ReidDataset
from core.embedder import ModalityModel, forward_batch, input_gradient_batch
from core.errors import ArtifactFormatError, ConfigError, ConstraintViolationError, ShapeMismatchError
from core.logger_helper import logger
from core.numerics import l1_norm, linf_clip
from core.performance_debug import measure_time
from debug_control.debug_manager import debug_manager

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0

PERTURBATION_MAGIC = b"MMUAP01"
_PERTURBATION_HEADER = struct.Struct("<3Id")


@dataclass(eq=False)
class UniversalPerturbation:
    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon 必须为正")
        if np.abs(self.delta).max(initial=0.0) > self.epsilon:
            raise ConstraintViolationError(f"‖δ‖∞ = {np.abs(self.delta).max()} 超过 ε = {self.epsilon}")

    @classmethod
    def zeros(cls, shape, epsilon: float) -> "UniversalPerturbation":
        return cls(np.zeros(tuple(shape)), float(epsilon))


@dataclass(eq=False)
class MomentumState:
    v: np.ndarray
    beta: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta 必须在 [0, 1) 内")

    @classmethod
    def zeros(cls, shape, beta: float = 0.9) -> "MomentumState":
        return cls(np.zeros(tuple(shape)), beta)


@dataclass
class UapConfig:
    epochs: int = 40
    batch_size: int = 16
    epsilon: float = 8.0
    rho: float = 0.5
    beta: float = 0.9
    alpha: Optional[float] = None
    seed: int = 0

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha else self.epsilon / 10.0

    def validate(self):
        errors = []
        if self.epochs < 0:
            errors.append("uap.epochs 不能为负")
        if self.batch_size <= 0:
            errors.append("uap.batch_size 必须为正")
        if self.epsilon <= 0:
            errors.append("uap.epsilon 必须为正")
        if self.rho < 0:
            errors.append("uap.rho 不能为负")
        if not 0.0 <= self.beta < 1.0:
            errors.append("uap.beta 必须在 [0, 1) 内")
        if self.alpha is not None and self.alpha < 0:
            errors.append("uap.alpha 不能为负")
        if errors:
            raise ConfigError("; ".join(errors))


def _hinge_terms(features: np.ndarray, cp: np.ndarray, cn: np.ndarray, s_inv: np.ndarray,
                 rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """逐行 [D(C_n,f) − D(C_p,f) + ρ]_+ 及其对 f 的梯度"""
    to_n = features - cn
    to_p = features - cp
    d_n = np.einsum('bi,ij,bj->b', to_n, s_inv, to_n)
    d_p = np.einsum('bi,ij,bj->b', to_p, s_inv, to_p)
    margin = d_n - d_p + rho
    active = margin > 0
    loss = np.where(active, margin, 0.0)
    grad = 2.0 * (to_n - to_p) @ s_inv
    grad[~active] = 0.0
    return loss, grad


def triplet_loss(f_adv, banks: Sequence[CentroidBank], cp_cn: Sequence[Tuple[np.ndarray, np.ndarray]],
                 rho: float) -> Tuple[float, np.ndarray]:
    """马氏三元组损失，对每个模态项求和

    f_adv 为 (d,) 时所有项共用同一特征；为 (项数, d) 时第 m 行对应第 m 个聚类库
    返回 (损失, 与 f_adv 同形的梯度)
    """
    if rho < 0:
        raise ValueError("rho 不能为负")
    if len(banks) != len(cp_cn) or not banks:
        raise ShapeMismatchError("聚类库与中心对数量不一致")
    f_adv = np.asarray(f_adv, dtype=np.float64)
    shared = f_adv.ndim == 1
    rows = np.broadcast_to(f_adv, (len(banks), f_adv.shape[-1])) if shared else f_adv
    if rows.shape[0] != len(banks):
        raise ShapeMismatchError("特征行数与聚类库数量不一致")

    total = 0.0
    grads = np.zeros(rows.shape)
    for m, (bank, (cp, cn)) in enumerate(zip(banks, cp_cn)):
        if rows.shape[1] != bank.d_feat:
            raise ShapeMismatchError(f"特征维度 {rows.shape[1]} 与聚类库 {bank.d_feat} 不符")
        loss, grad = _hinge_terms(rows[m:m + 1], np.asarray(cp)[np.newaxis], np.asarray(cn)[np.newaxis],
                                  bank.s_inv, rho)
        total += float(loss[0])
        grads[m] = grad[0]
    return total, (grads.sum(axis=0) if shared else grads)


@dataclass(eq=False)
class Anchors:
    """按原始（未扰动）特征冻结的 C_p / C_n，键为聚类库模态，每项为 (样本数, d) 数组"""

    cp: Dict[int, np.ndarray]
    cn: Dict[int, np.ndarray]

    def take(self, rows: np.ndarray) -> "Anchors":
        return Anchors({m: a[rows] for m, a in self.cp.items()}, {m: a[rows] for m, a in self.cn.items()})


def _check_routing(modality_ids: np.ndarray, models: Mapping[int, ModalityModel]):
    unknown = set(np.unique(modality_ids).tolist()) - set(models)
    if unknown:
        raise ShapeMismatchError(f"批次中的模态 {sorted(unknown)} 没有对应模型")


def compute_anchors(images: np.ndarray, modality_ids: np.ndarray, models: Mapping[int, ModalityModel],
                    banks: Mapping[int, CentroidBank]) -> Anchors:
    """每个样本经自身模态的模型取原始特征，再在每个聚类库里找最近/最远中心"""
    images = np.asarray(images, dtype=np.float64)
    modality_ids = np.asarray(modality_ids)
    _check_routing(modality_ids, models)
    cp, cn = {}, {}
    for b, bank in sorted(banks.items()):
        cp[b] = np.zeros((len(images), bank.d_feat))
        cn[b] = np.zeros((len(images), bank.d_feat))
    for m in np.unique(modality_ids).tolist():
        rows = modality_ids == m
        features = forward_batch(models[m], images[rows])
        for b, bank in sorted(banks.items()):
            cp[b][rows], cn[b][rows] = nearest_farthest_batch(features, bank)
    return Anchors(cp, cn)


def meta_loss_and_grad(delta: np.ndarray, images: np.ndarray, modality_ids: np.ndarray,
                       models: Mapping[int, ModalityModel], banks: Mapping[int, CentroidBank],
                       rho: float, anchors: Optional[Anchors] = None) -> Tuple[float, np.ndarray]:
    """元损失 𝓛_meta = (1/n) Σ 𝓛_tri(δ, x_i) 及其对 δ 的梯度

    样本只经自身模态的模型前向，三元组项对每个聚类库求和；
    像素截断到 [0,255] 处按直通处理，饱和像素梯度为0
    """
    images = np.asarray(images, dtype=np.float64)
    modality_ids = np.asarray(modality_ids)
    if images.shape[0] == 0:
        raise ValueError("批次为空")
    if images.shape[1:] != delta.shape:
        raise ShapeMismatchError(f"δ 形状 {delta.shape} 与图像 {images.shape[1:]} 不符")
    _check_routing(modality_ids, models)
    if anchors is None:
        anchors = compute_anchors(images, modality_ids, models, banks)

    raw = images + delta
    perturbed = np.clip(raw, PIXEL_MIN, PIXEL_MAX)
    interior = (raw > PIXEL_MIN) & (raw < PIXEL_MAX)

    batch = images.shape[0]
    losses = np.zeros(batch)
    grad_images = np.zeros_like(images)
    for m in np.unique(modality_ids).tolist():
        rows = modality_ids == m
        model = models[m]
        features = forward_batch(model, perturbed[rows])
        grad_f = np.zeros_like(features)
        for b, bank in sorted(banks.items()):
            loss_b, grad_b = _hinge_terms(features, anchors.cp[b][rows], anchors.cn[b][rows], bank.s_inv, rho)
            losses[rows] += loss_b
            grad_f += grad_b
        grad_images[rows] = input_gradient_batch(model, perturbed[rows], grad_f)

    grad_images *= interior
    return float(losses.mean()), grad_images.sum(axis=0) / batch


def momentum_step(state: MomentumState, grad: np.ndarray) -> MomentumState:
    """v ← βv + (1−β)·g/‖g‖₁，‖g‖₁ = 0 时归一化项取0"""
    grad = np.asarray(grad, dtype=np.float64)
    norm = l1_norm(grad)
    normalized = grad / norm if norm > 0 else np.zeros_like(grad)
    return MomentumState(state.beta * state.v + (1.0 - state.beta) * normalized, state.beta)


def update_delta(up: UniversalPerturbation, state: MomentumState, alpha: float) -> UniversalPerturbation:
    """δ ← clip(δ + α·sign(v), −ε, ε)"""
    if alpha <= 0:
        raise ValueError("alpha 必须为正")
    delta = linf_clip(up.delta + alpha * np.sign(state.v), up.epsilon)
    return UniversalPerturbation(delta, up.epsilon)


def uap_step(up: UniversalPerturbation, state: MomentumState, images: np.ndarray, modality_ids: np.ndarray,
             models: Mapping[int, ModalityModel], banks: Mapping[int, CentroidBank], rho: float,
             alpha: float, anchors: Optional[Anchors] = None):
    """一步: 元损失梯度 → 动量 → 符号更新

    三元组损失需要最小化，因此把 −∇𝓛 送入动量，δ + α·sign(v) 即为下降方向
    """
    loss, grad = meta_loss_and_grad(up.delta, images, modality_ids, models, banks, rho, anchors)
    state = momentum_step(state, -grad)
    up = update_delta(up, state, alpha)
    if debug_manager.are_constraint_checks_enabled() and np.abs(up.delta).max() > up.epsilon:
        raise ConstraintViolationError("δ 更新后越过 L∞ 上界")
    return up, state, loss


def run_frozen_batch(up: UniversalPerturbation, state: MomentumState, images: np.ndarray,
                     modality_ids: np.ndarray, models: Mapping[int, ModalityModel],
                     banks: Mapping[int, CentroidBank], rho: float, alpha: float,
                     n_steps: int) -> Tuple[UniversalPerturbation, MomentumState, List[float]]:
    """在固定批次上连续迭代，返回每步更新后的元损失轨迹"""
    anchors = compute_anchors(images, modality_ids, models, banks)
    trajectory = [meta_loss_and_grad(up.delta, images, modality_ids, models, banks, rho, anchors)[0]]
    for _ in range(n_steps):
        up, state, _ = uap_step(up, state, images, modality_ids, models, banks, rho, alpha, anchors)
        trajectory.append(meta_loss_and_grad(up.delta, images, modality_ids, models, banks, rho, anchors)[0])
    return up, state, trajectory


@measure_time("uap", "learn_uap")
def learn_uap(models: Mapping[int, ModalityModel], banks: Mapping[int, CentroidBank], dataset: ReidDataset,
              config: UapConfig, history: Optional[List[float]] = None) -> UniversalPerturbation:
    """在给定模态的训练样本上学习通用扰动

    models / banks 以模态编号为键；只有一个模态时三元组损失只保留该模态的项
    history 若给出，每轮追加该轮批次元损失的均值
    """
    config.validate()
    if not models:
        raise ConfigError("至少需要一个模型")
    missing = sorted(set(models) - set(banks))
    if missing:
        raise ConfigError(f"模态 {missing} 缺少聚类库")
    for m, model in models.items():
        if tuple(model.shape) != tuple(dataset.shape):
            raise ConfigError(f"模态{m} 模型输入形状 {model.shape} 与数据集 {dataset.shape} 不符")
        if m >= dataset.n_modalities:
            raise ConfigError(f"数据集中不存在模态{m}")

    sample_idx = np.concatenate([dataset.indices(m, SPLIT_TRAIN) for m in sorted(models)])
    if sample_idx.size == 0:
        raise ConfigError("源模态没有训练样本")
    images = dataset.images[sample_idx]
    modality_ids = dataset.modality_ids[sample_idx]

    up = UniversalPerturbation.zeros(dataset.shape, config.epsilon)
    state = MomentumState.zeros(dataset.shape, config.beta)
    alpha = config.step_size
    rng = np.random.default_rng(config.seed)
    term_banks = {m: banks[m] for m in sorted(models)}

    # 原始特征不随 δ 变化，C_p / C_n 整个学习过程冻结
    anchors = compute_anchors(images, modality_ids, models, term_banks)
    for epoch in range(config.epochs):
        order = rng.permutation(len(sample_idx))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            up, state, loss = uap_step(up, state, images[batch], modality_ids[batch], models, term_banks,
                                       config.rho, alpha, anchors.take(batch))
            epoch_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses))
        if history is not None:
            history.append(mean_loss)
        if epoch % debug_manager.get_search_setting("log_every_uap_epochs", 5) == 0:
            logger.search_debug("uap", f"第{epoch + 1}轮 元损失={mean_loss:.4f} ‖δ‖∞={np.abs(up.delta).max():.2f}")

    logger.info(f"通用扰动学习完成: {config.epochs}轮, ε={config.epsilon}, α={alpha}")
    return up


def save_perturbation(up: UniversalPerturbation, path) -> None:
    """写出 MMUAP01: 魔数, (H, W, C, ε), 原始 float64"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, channels = up.delta.shape
    header = _PERTURBATION_HEADER.pack(height, width, channels, float(up.epsilon))
    path.write_bytes(PERTURBATION_MAGIC + header + np.ascontiguousarray(up.delta, dtype='<f8').tobytes())


def load_perturbation(path) -> UniversalPerturbation:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(PERTURBATION_MAGIC)] != PERTURBATION_MAGIC:
        raise ArtifactFormatError("扰动文件魔数错误", 0, path)
    offset = len(PERTURBATION_MAGIC)
    if len(data) < offset + _PERTURBATION_HEADER.size:
        raise ArtifactFormatError("扰动文件头被截断", offset, path)
    height, width, channels, epsilon = _PERTURBATION_HEADER.unpack_from(data, offset)
    offset += _PERTURBATION_HEADER.size
    expected = height * width * channels * 8
    if len(data) - offset != expected:
        raise ArtifactFormatError(f"像素区长度 {len(data) - offset} 与形状要求 {expected} 不符", offset, path)
    delta = np.frombuffer(data, dtype='<f8', offset=offset).reshape(height, width, channels).copy()
    try:
        return UniversalPerturbation(delta, epsilon)
    except (ValueError, ConstraintViolationError) as e:
        raise ArtifactFormatError(f"扰动内容无效: {e}", offset, path) from e
