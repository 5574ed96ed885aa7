"""测试共用夹具：微型多模态数据集、已训练模型与聚类库（会话级缓存）"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.centroids import build_bank  # noqa: E402
from core.dataset import (SPLIT_GALLERY, SPLIT_TRAIN, ModalitySpec, build_multimodal,  # noqa: E402
                          generate_identities)
from core.embedder import init_model, train  # noqa: E402

TINY_SHAPE = (8, 4, 3)
TINY_KINDS = ("identity-pass", "channel-mix", "grayscale-collapse", "intensity-invert")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    base = generate_identities(6, 6, TINY_SHAPE, 2.0, seed=3, prototype_amplitude=12.0)
    specs = [ModalitySpec.from_label(kind, seed=10 + m) for m, kind in enumerate(TINY_KINDS)]
    return build_multimodal(base, specs)


@pytest.fixture(scope="session")
def tiny_models(tiny_dataset):
    models = {}
    for m in range(tiny_dataset.n_modalities):
        images, labels = tiny_dataset.select(m, SPLIT_TRAIN)
        model = init_model(TINY_SHAPE, 16, 8, 6, seed=20 + m, modality_id=m)
        models[m] = train(model, images, labels, epochs=30, learning_rate=0.1, batch_size=8, seed=30 + m)
    return models


@pytest.fixture(scope="session")
def tiny_banks(tiny_dataset, tiny_models):
    banks = {}
    for m, model in tiny_models.items():
        gallery, _ = tiny_dataset.select(m, SPLIT_GALLERY)
        banks[m] = build_bank(model, gallery, n_clusters=4, lambda_reg=1e-3, seed=40 + m)
    return banks
