#!/usr/bin/env python3
"""
合成跨模态检索基准
- 每个身份一个低频随机原型（若干二维余弦场叠加）
- 四种模态变换：原样、随机通道混合、灰度塌缩、亮度反转
- MMREID01 二进制容器的确定性读写
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ArtifactFormatError, ShapeMismatchError
from core.logger_helper import logger

DATASET_MAGIC = b"MMREID01"
_HEADER = struct.Struct("<5I")
_SPEC_RECORD = struct.Struct("<B9dQ")
_IMAGE_RECORD = struct.Struct("<IHB")

SPLIT_TRAIN = 0
SPLIT_QUERY = 1
SPLIT_GALLERY = 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_QUERY: "query", SPLIT_GALLERY: "gallery"}

ImageShape = Tuple[int, int, int]


class ModalityKind(IntEnum):
    IDENTITY_PASS = 0
    CHANNEL_MIX = 1
    GRAYSCALE_COLLAPSE = 2
    INTENSITY_INVERT = 3

    @property
    def label(self) -> str:
        return self.name.lower().replace('_', '-')

    @classmethod
    def from_label(cls, label: str) -> "ModalityKind":
        for kind in cls:
            if kind.label == label.strip().lower():
                return kind
        raise ValueError(f"未知模态类型: {label}")


@dataclass(frozen=True)
class ModalitySpec:
    """模态描述；mix_matrix 仅对通道混合有意义，其余类型为单位阵"""

    kind: ModalityKind
    mix_matrix: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.mix_matrix) != 9:
            raise ValueError("mix_matrix 需要9个元素")
        rows = np.asarray(self.mix_matrix, dtype=np.float64).reshape(3, 3).sum(axis=1)
        if not np.all(np.abs(rows - 1.0) <= 1e-9):
            raise ValueError(f"mix_matrix 行和必须为1, 实际 {rows}")
        if self.seed < 0:
            raise ValueError("seed 不能为负")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.mix_matrix, dtype=np.float64).reshape(3, 3)

    @classmethod
    def random_channel_mix(cls, seed: int) -> "ModalitySpec":
        """每个模态抽一次随机行随机矩阵，整个数据集共用"""
        rng = np.random.default_rng(seed)
        raw = rng.random((3, 3)) + 1e-3
        matrix = raw / raw.sum(axis=1, keepdims=True)
        return cls(ModalityKind.CHANNEL_MIX, tuple(float(v) for v in matrix.ravel()), seed)

    @classmethod
    def from_label(cls, label: str, seed: int) -> "ModalitySpec":
        kind = ModalityKind.from_label(label)
        if kind is ModalityKind.CHANNEL_MIX:
            return cls.random_channel_mix(seed)
        return cls(kind, seed=seed)


@dataclass(frozen=True, eq=False)
class Identity:
    id: int
    prototype: np.ndarray


@dataclass(eq=False)
class ReidDataset:
    """扁平存储的数据集：第 i 张图像的身份、模态、划分分别在对应数组的第 i 位"""

    images: np.ndarray
    identities: np.ndarray
    modality_ids: np.ndarray
    splits: np.ndarray
    modalities: List[ModalitySpec]
    shape: ImageShape
    prototypes: Optional[List[Identity]] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.images.shape[0]
        if self.images.shape[1:] != tuple(self.shape):
            raise ShapeMismatchError(f"图像形状 {self.images.shape[1:]} 与声明 {self.shape} 不符")
        for name in ("identities", "modality_ids", "splits"):
            if getattr(self, name).shape != (n,):
                raise ShapeMismatchError(f"{name} 长度与图像数不符")

    def __len__(self):
        return int(self.images.shape[0])

    def __eq__(self, other):
        if not isinstance(other, ReidDataset):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.modalities == other.modalities
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.identities, other.identities)
            and np.array_equal(self.modality_ids, other.modality_ids)
            and np.array_equal(self.splits, other.splits)
        )

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def indices(self, modality: Optional[int] = None, split: Optional[int] = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if modality is not None:
            mask &= self.modality_ids == modality
        if split is not None:
            mask &= self.splits == split
        return np.flatnonzero(mask)

    def select(self, modality: Optional[int] = None, split: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (图像, 身份标签)"""
        idx = self.indices(modality, split)
        return self.images[idx], self.identities[idx]

    def identity_ids(self, split: Optional[int] = None) -> np.ndarray:
        if split is None:
            return np.unique(self.identities)
        return np.unique(self.identities[self.splits == split])


def split_sizes(per_identity: int, train_fraction: float, query_fraction: float) -> Tuple[int, int, int]:
    """每个身份的 (训练, 查询, 图库) 图像数；查询与图库至少各1张"""
    gallery_fraction = 1.0 - train_fraction - query_fraction
    n_query = max(1, int(round(query_fraction * per_identity)))
    n_gallery = max(1, int(round(gallery_fraction * per_identity)))
    n_train = per_identity - n_query - n_gallery
    if n_train < 0:
        n_train = 0
        n_gallery = per_identity - n_query
    return n_train, n_query, n_gallery


def _smooth_prototype(rng: np.random.Generator, shape: ImageShape, amplitude: float, n_bumps: int) -> np.ndarray:
    height, width, channels = shape
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing='ij')
    proto = np.empty(shape, dtype=np.float64)
    for c in range(channels):
        offset = rng.normal(0.0, amplitude)
        field_c = np.zeros((height, width))
        for _ in range(n_bumps):
            fy, fx = rng.uniform(0.0, 1.5, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            weight = rng.uniform(0.5, 1.5)
            field_c += weight * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        proto[:, :, c] = 128.0 + offset + amplitude * field_c / np.sqrt(n_bumps)
    return np.clip(proto, 0.0, 255.0)


def generate_identities(n_identities: int, images_per_identity: int, shape: ImageShape,
                        noise_sigma: float, seed: int, *, prototype_amplitude: float = 4.0,
                        n_bumps: int = 4, train_fraction: float = 0.6,
                        query_fraction: float = 0.2) -> ReidDataset:
    """生成单模态基础数据集"""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) <= 0:
        raise ValueError(f"图像形状退化: {shape}")
    if n_identities < 2:
        raise ValueError("至少需要2个身份")
    if images_per_identity < 2:
        raise ValueError("每个身份至少需要2张图像")
    if noise_sigma < 0:
        raise ValueError("noise_sigma 不能为负")

    rng = np.random.default_rng(seed)
    n_train, n_query, n_gallery = split_sizes(images_per_identity, train_fraction, query_fraction)
    split_pattern = np.array([SPLIT_TRAIN] * n_train + [SPLIT_QUERY] * n_query + [SPLIT_GALLERY] * n_gallery,
                             dtype=np.uint8)

    prototypes: List[Identity] = []
    images = np.empty((n_identities * images_per_identity,) + shape, dtype=np.float64)
    for identity in range(n_identities):
        proto = _smooth_prototype(rng, shape, prototype_amplitude, n_bumps)
        prototypes.append(Identity(identity, proto))
        start = identity * images_per_identity
        for j in range(images_per_identity):
            if noise_sigma > 0:
                noisy = proto + rng.normal(0.0, noise_sigma, size=shape)
            else:
                noisy = proto.copy()
            images[start + j] = np.clip(noisy, 0.0, 255.0)

    identities = np.repeat(np.arange(n_identities, dtype=np.int64), images_per_identity)
    splits = np.tile(split_pattern, n_identities)
    modality_ids = np.zeros(len(identities), dtype=np.int64)
    logger.debug(f"生成身份 {n_identities} 个, 每个 {images_per_identity} 张 (训练/查询/图库 = "
                 f"{n_train}/{n_query}/{n_gallery})")
    return ReidDataset(images, identities, modality_ids, splits,
                       [ModalitySpec(ModalityKind.IDENTITY_PASS, seed=0)], shape, prototypes)


def apply_modality(img: np.ndarray, spec: ModalitySpec) -> np.ndarray:
    """把一张（或一批，通道在最后一维）图像变换到指定模态"""
    img = np.asarray(img, dtype=np.float64)
    kind = spec.kind
    if kind is ModalityKind.IDENTITY_PASS:
        return img.copy()
    if kind is ModalityKind.CHANNEL_MIX:
        if img.shape[-1] != 3:
            raise ShapeMismatchError(f"通道混合需要3通道, 实际 {img.shape[-1]}")
        return np.clip(img @ spec.matrix.T, 0.0, 255.0)
    if kind is ModalityKind.GRAYSCALE_COLLAPSE:
        return np.broadcast_to(img.mean(axis=-1, keepdims=True), img.shape).copy()
    if kind is ModalityKind.INTENSITY_INVERT:
        return 255.0 - img
    raise ValueError(f"未知模态类型: {kind}")


def build_multimodal(base: ReidDataset, specs: Sequence[ModalitySpec]) -> ReidDataset:
    """每个模态复制一份基础图像并打上模态标签，划分保持不变"""
    if not specs:
        raise ValueError("模态列表为空")
    if base.n_modalities != 1 or np.any(base.modality_ids != 0):
        raise ValueError("基础数据集必须是单模态")

    images = np.concatenate([apply_modality(base.images, spec) for spec in specs], axis=0)
    n = len(base)
    modality_ids = np.repeat(np.arange(len(specs), dtype=np.int64), n)
    return ReidDataset(
        images=images,
        identities=np.tile(base.identities, len(specs)),
        modality_ids=modality_ids,
        splits=np.tile(base.splits, len(specs)),
        modalities=list(specs),
        shape=base.shape,
        prototypes=base.prototypes,
    )


def save_dataset(ds: ReidDataset, path) -> None:
    """写出 MMREID01 容器"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, channels = ds.shape
    parts = [DATASET_MAGIC, _HEADER.pack(height, width, channels, len(ds), ds.n_modalities)]
    for spec in ds.modalities:
        parts.append(_SPEC_RECORD.pack(int(spec.kind), *spec.mix_matrix, int(spec.seed)))
    for i in range(len(ds)):
        parts.append(_IMAGE_RECORD.pack(int(ds.identities[i]), int(ds.modality_ids[i]), int(ds.splits[i])))
        parts.append(np.ascontiguousarray(ds.images[i], dtype='<f8').tobytes())
    path.write_bytes(b"".join(parts))


def load_dataset(path) -> ReidDataset:
    """读取 MMREID01 容器，任何格式错误都带字节偏移拒绝"""
    path = Path(path)
    data = path.read_bytes()
    offset = 0

    def take(n_bytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + n_bytes > len(data):
            raise ArtifactFormatError(f"{what} 被截断 (需要 {n_bytes} 字节, 剩余 {len(data) - offset})", offset, path)
        chunk = data[offset:offset + n_bytes]
        offset += n_bytes
        return chunk

    magic = take(len(DATASET_MAGIC), "魔数")
    if magic != DATASET_MAGIC:
        raise ArtifactFormatError(f"魔数错误: {magic!r}", 0, path)
    height, width, channels, count, n_modalities = _HEADER.unpack(take(_HEADER.size, "文件头"))
    if min(height, width, channels) == 0:
        raise ArtifactFormatError("图像形状退化", len(DATASET_MAGIC), path)

    modalities = []
    for _ in range(n_modalities):
        record_offset = offset
        kind, *values = _SPEC_RECORD.unpack(take(_SPEC_RECORD.size, "模态表"))
        seed = values.pop()
        try:
            modalities.append(ModalitySpec(ModalityKind(kind), tuple(values), seed))
        except ValueError as e:
            raise ArtifactFormatError(f"模态记录无效: {e}", record_offset, path) from e

    shape = (height, width, channels)
    pixel_bytes = height * width * channels * 8
    images = np.empty((count,) + shape, dtype=np.float64)
    identities = np.empty(count, dtype=np.int64)
    modality_ids = np.empty(count, dtype=np.int64)
    splits = np.empty(count, dtype=np.uint8)
    for i in range(count):
        record_offset = offset
        identity, modality, split = _IMAGE_RECORD.unpack(take(_IMAGE_RECORD.size, f"第{i}张图像记录"))
        if modality >= n_modalities:
            raise ArtifactFormatError(f"模态编号越界: {modality}", record_offset, path)
        if split not in SPLIT_NAMES:
            raise ArtifactFormatError(f"划分标记无效: {split}", record_offset, path)
        identities[i] = identity
        modality_ids[i] = modality
        splits[i] = split
        images[i] = np.frombuffer(take(pixel_bytes, f"第{i}张图像像素"), dtype='<f8').reshape(shape)

    if offset != len(data):
        raise ArtifactFormatError(f"文件末尾多出 {len(data) - offset} 字节", offset, path)
    return ReidDataset(images, identities, modality_ids, splits, modalities, shape)
