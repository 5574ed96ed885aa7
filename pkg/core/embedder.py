#!/usr/bin/env python3
"""
每个模态一个小型可微嵌入模型
结构: 输入 → 展平 → ÷255 → 仿射(d_hidden) → tanh → 仿射(d_feat)
分类头（仿射 d_feat→身份数）只在训练时使用，攻击阶段只看特征
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import ArtifactFormatError, ShapeMismatchError
from core.logger_helper import logger
from core.performance_debug import measure_time

CHECKPOINT_MAGIC = b"MMEMB01"
_CHECKPOINT_HEADER = struct.Struct("<8I")
PIXEL_SCALE = 255.0

ACTIVATIONS = ("tanh", "identity")
PARAMETER_ORDER = ("w1", "b1", "w2", "b2", "wc", "bc")


@dataclass(eq=False)
class ModalityModel:
    """权重按 (输出维, 输入维) 存放"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    shape: Tuple[int, int, int]
    modality_id: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"未知激活函数: {self.activation}")
        d_in = int(np.prod(self.shape))
        d_hidden, d_feat, n_ids = self.b1.size, self.b2.size, self.bc.size
        expected = {
            "w1": (d_hidden, d_in), "b1": (d_hidden,),
            "w2": (d_feat, d_hidden), "b2": (d_feat,),
            "wc": (n_ids, d_feat), "bc": (n_ids,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatchError(f"{name} 形状 {getattr(self, name).shape} 应为 {shape}")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.b1.size

    @property
    def d_feat(self) -> int:
        return self.b2.size

    @property
    def n_identities(self) -> int:
        return self.bc.size

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_ORDER}

    def copy(self) -> "ModalityModel":
        params = {name: value.copy() for name, value in self.parameters().items()}
        return ModalityModel(**params, shape=tuple(self.shape), modality_id=self.modality_id,
                             activation=self.activation)

    def equals(self, other: "ModalityModel") -> bool:
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.modality_id == other.modality_id
            and self.activation == other.activation
            and all(np.array_equal(a, b) for a, b in zip(self.parameters().values(), other.parameters().values()))
        )


def init_model(shape, d_hidden: int, d_feat: int, n_identities: int, seed: int,
               modality_id: int = 0, activation: str = "tanh") -> ModalityModel:
    """权重取 U(−1/√fan_in, 1/√fan_in)，偏置为0"""
    shape = tuple(int(s) for s in shape)
    d_in = int(np.prod(shape))
    if min(d_in, d_hidden, d_feat, n_identities) <= 0:
        raise ValueError("模型维度必须为正")
    rng = np.random.default_rng(seed)

    def uniform(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    return ModalityModel(
        w1=uniform(d_hidden, d_in), b1=np.zeros(d_hidden),
        w2=uniform(d_feat, d_hidden), b2=np.zeros(d_feat),
        wc=uniform(n_identities, d_feat), bc=np.zeros(n_identities),
        shape=shape, modality_id=modality_id, activation=activation,
    )


def _activate(model: ModalityModel, pre: np.ndarray) -> np.ndarray:
    return np.tanh(pre) if model.activation == "tanh" else pre


def _activation_slope(model: ModalityModel, hidden: np.ndarray) -> np.ndarray:
    return 1.0 - hidden ** 2 if model.activation == "tanh" else np.ones_like(hidden)


def _flatten(model: ModalityModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != tuple(model.shape):
        raise ShapeMismatchError(f"图像形状 {images.shape[-3:]} 与模型 {model.shape} 不符")
    return images.reshape(-1, model.d_in) / PIXEL_SCALE


def _hidden(model: ModalityModel, x: np.ndarray) -> np.ndarray:
    return _activate(model, x @ model.w1.T + model.b1)


def forward_batch(model: ModalityModel, images: np.ndarray) -> np.ndarray:
    """(N,H,W,C) → (N,d_feat)"""
    hidden = _hidden(model, _flatten(model, images))
    return hidden @ model.w2.T + model.b2


def forward(model: ModalityModel, img: np.ndarray) -> np.ndarray:
    """单张图像的特征向量"""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(model.shape):
        raise ShapeMismatchError(f"图像形状 {img.shape} 与模型 {model.shape} 不符")
    return forward_batch(model, img[np.newaxis])[0]


def input_gradient_batch(model: ModalityModel, images: np.ndarray, grad_wrt_features: np.ndarray) -> np.ndarray:
    """∂(gᵀ𝓕(x))/∂x，逐样本；返回与 images 同形"""
    images = np.asarray(images, dtype=np.float64)
    hidden = _hidden(model, _flatten(model, images))
    grad_f = np.asarray(grad_wrt_features, dtype=np.float64).reshape(-1, model.d_feat)
    if grad_f.shape[0] != hidden.shape[0]:
        raise ShapeMismatchError("特征梯度数量与图像数量不符")
    grad_pre = (grad_f @ model.w2) * _activation_slope(model, hidden)
    grad_x = grad_pre @ model.w1 / PIXEL_SCALE
    return grad_x.reshape(images.shape)


def input_gradient(model: ModalityModel, img: np.ndarray, grad_wrt_feature: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    grad_wrt_feature = np.asarray(grad_wrt_feature, dtype=np.float64)
    if img.shape != tuple(model.shape):
        raise ShapeMismatchError(f"图像形状 {img.shape} 与模型 {model.shape} 不符")
    if grad_wrt_feature.shape != (model.d_feat,):
        raise ShapeMismatchError(f"特征梯度长度 {grad_wrt_feature.shape} 应为 ({model.d_feat},)")
    return input_gradient_batch(model, img[np.newaxis], grad_wrt_feature[np.newaxis])[0]


def lipschitz_bound(model: ModalityModel) -> float:
    """单像素扰动 Δ 引起的特征变化上界系数: ‖W2‖₂·‖W1‖₂/255 （tanh 斜率 ≤ 1）"""
    return float(np.linalg.norm(model.w2, 2) * np.linalg.norm(model.w1, 2) / PIXEL_SCALE)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def classification_loss(model: ModalityModel, images: np.ndarray, labels: np.ndarray) -> float:
    """分类头上的平均交叉熵"""
    features = forward_batch(model, images)
    probs = _softmax(features @ model.wc.T + model.bc)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def _backprop(model: ModalityModel, x: np.ndarray, labels: np.ndarray) -> Dict[str, np.ndarray]:
    batch = x.shape[0]
    hidden = _hidden(model, x)
    features = hidden @ model.w2.T + model.b2
    probs = _softmax(features @ model.wc.T + model.bc)

    grad_logits = probs.copy()
    grad_logits[np.arange(batch), labels] -= 1.0
    grad_logits /= batch

    grad_features = grad_logits @ model.wc
    grad_hidden = grad_features @ model.w2
    grad_pre = grad_hidden * _activation_slope(model, hidden)
    return {
        "wc": grad_logits.T @ features, "bc": grad_logits.sum(axis=0),
        "w2": grad_features.T @ hidden, "b2": grad_features.sum(axis=0),
        "w1": grad_pre.T @ x, "b1": grad_pre.sum(axis=0),
    }


@measure_time("embedder", "train")
def train(model: ModalityModel, images: np.ndarray, labels: np.ndarray, epochs: int,
          learning_rate: float, batch_size: int, seed: int,
          history: Optional[List[float]] = None) -> ModalityModel:
    """小批量梯度下降训练身份分类；返回新模型，不修改输入模型

    history 若给出，每轮结束后追加全训练集上的交叉熵
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("训练集为空")
    if len(np.unique(labels)) < 2:
        raise ValueError("训练集至少需要2个身份")
    if labels.min() < 0 or labels.max() >= model.n_identities:
        raise ValueError(f"身份标签超出分类头范围 [0, {model.n_identities})")
    if batch_size <= 0 or learning_rate <= 0 or epochs < 0:
        raise ValueError("训练超参数无效")

    trained = model.copy()
    x_all = _flatten(trained, images)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            grads = _backprop(trained, x_all[batch], labels[batch])
            for name, grad in grads.items():
                setattr(trained, name, getattr(trained, name) - learning_rate * grad)
        if history is not None:
            history.append(classification_loss(trained, images, labels))
        if epoch % 20 == 0 or epoch == epochs - 1:
            logger.debug(f"模态{trained.modality_id} 训练第{epoch + 1}/{epochs}轮")
    return trained


def save_model(model: ModalityModel, path) -> None:
    """写出 MMEMB01 检查点"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, channels = model.shape
    header = _CHECKPOINT_HEADER.pack(height, width, channels, model.d_hidden, model.d_feat,
                                     model.n_identities, model.modality_id,
                                     ACTIVATIONS.index(model.activation))
    blocks = [np.ascontiguousarray(getattr(model, name), dtype='<f8').tobytes() for name in PARAMETER_ORDER]
    path.write_bytes(CHECKPOINT_MAGIC + header + b"".join(blocks))


def load_model(path) -> ModalityModel:
    """读取 MMEMB01 检查点"""
    path = Path(path)
    data = path.read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ArtifactFormatError("检查点魔数错误", 0, path)
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + _CHECKPOINT_HEADER.size:
        raise ArtifactFormatError("检查点文件头被截断", offset, path)
    height, width, channels, d_hidden, d_feat, n_ids, modality_id, act_code = \
        _CHECKPOINT_HEADER.unpack_from(data, offset)
    offset += _CHECKPOINT_HEADER.size
    if act_code >= len(ACTIVATIONS):
        raise ArtifactFormatError(f"激活函数编码无效: {act_code}", offset - 4, path)

    d_in = height * width * channels
    shapes = {
        "w1": (d_hidden, d_in), "b1": (d_hidden,),
        "w2": (d_feat, d_hidden), "b2": (d_feat,),
        "wc": (n_ids, d_feat), "bc": (n_ids,),
    }
    params = {}
    for name in PARAMETER_ORDER:
        n_bytes = int(np.prod(shapes[name])) * 8
        if offset + n_bytes > len(data):
            raise ArtifactFormatError(f"参数块 {name} 被截断", offset, path)
        params[name] = np.frombuffer(data, dtype='<f8', count=n_bytes // 8, offset=offset).reshape(shapes[name]).copy()
        offset += n_bytes
    if offset != len(data):
        raise ArtifactFormatError(f"检查点末尾多出 {len(data) - offset} 字节", offset, path)
    return ModalityModel(**params, shape=(height, width, channels), modality_id=modality_id,
                         activation=ACTIVATIONS[act_code])
