#!/usr/bin/env python3
"""
第二层优化：稀疏三值扰动 η 的多目标进化搜索
目标向量 (d̃, s̃, ‖η‖₂)，按自定义支配关系做非支配排序
"""

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.centroids import CentroidBank, nearest_farthest_batch
from core.dataset import SPLIT_GALLERY, SPLIT_QUERY, ReidDataset
from core.embedder import ModalityModel, forward_batch
from core.errors import ArtifactFormatError, ConfigError, ConstraintViolationError, ShapeMismatchError
from core.eval_metrics import (BASELINE_ZERO, AlphaArchive, complementarity, majority_success,
                               pairwise_euclidean, update_archive)
from core.logger_helper import logger
from core.numerics import linf_clip
from core.performance_debug import measure_time
from debug_control.debug_manager import debug_manager

ETA_MAGIC = b"MMETA01"
_ETA_HEADER = struct.Struct("<IdI")
_ETA_RECORD = struct.Struct("<HHBb")
TERNARY = (-1, 0, 1)
_TINY = np.finfo(np.float64).tiny


@dataclass(eq=False)
class SparseIndividual:
    """positions 为 (n, 3) 的 (h, w, c)，values 与之对齐，取值 {−1, 0, +1}"""

    positions: np.ndarray
    values: np.ndarray
    step_scale: float = 1.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.int8).reshape(-1)
        if len(self.positions) != len(self.values):
            raise ShapeMismatchError("positions 与 values 长度不一致")
        if self.step_scale <= 0:
            raise ValueError("step_scale 必须为正")
        if not np.all(np.isin(self.values, TERNARY)):
            raise ConstraintViolationError("η 取值必须在 {−1, 0, +1} 中")
        if len(np.unique(self.positions, axis=0)) != len(self.positions):
            raise ConstraintViolationError("η 位置重复")

    @classmethod
    def empty(cls, step_scale: float = 1.0) -> "SparseIndividual":
        return cls(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int8), step_scale)

    def __len__(self):
        return len(self.values)

    @property
    def l0(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def l2(self) -> float:
        return float(self.step_scale * np.sqrt(self.l0))

    def copy(self) -> "SparseIndividual":
        return SparseIndividual(self.positions.copy(), self.values.copy(), self.step_scale)

    def equals(self, other: "SparseIndividual") -> bool:
        return (self.step_scale == other.step_scale
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.values, other.values))

    def dense(self, shape) -> np.ndarray:
        """展开为与图像同形的 step_scale·η"""
        shape = tuple(shape)
        if len(self) and (np.any(self.positions < 0) or np.any(self.positions >= np.asarray(shape))):
            raise ShapeMismatchError(f"η 像素下标越界 (图像形状 {shape})")
        out = np.zeros(shape)
        if len(self):
            out[tuple(self.positions.T)] = self.values * self.step_scale
        return out


@dataclass
class ObjectiveVector:
    """d_tilde = exp(−𝓓)，s_tilde = 1 − 成功率；total_distance 保留 𝓓 以免下溢后无法比较"""

    d_tilde: float
    s_tilde: float
    eta_l2: float
    total_distance: Optional[float] = None
    success_rate: Optional[float] = None
    model_rates: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.success_rate is None:
            self.success_rate = 1.0 - self.s_tilde

    @property
    def success(self) -> float:
        return self.success_rate

    @property
    def fooled_rate(self) -> float:
        """各模型未阈值化的 Top-1 失配率均值；没有逐模型数据时退回成功率"""
        return float(np.mean(self.model_rates)) if self.model_rates else self.success

    @property
    def distance(self) -> float:
        return self.total_distance if self.total_distance is not None else -float(np.log(self.d_tilde))


@dataclass
class EvoConfig:
    pop_size: int = 2
    generations: int = 150
    k: int = 64
    p_c: float = 0.8
    p_m: float = 0.1
    step_scale: float = 1.0
    seed: int = 0
    # 初始种群第0个个体取 η = 0
    seed_with_empty: bool = True

    def validate(self):
        errors = []
        if self.pop_size < 2:
            errors.append("evo.pop_size 至少为2")
        if self.generations < 1:
            errors.append("evo.generations 至少为1")
        if self.k < 0:
            errors.append("evo.k 不能为负")
        for name in ("p_c", "p_m"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                errors.append(f"evo.{name} 必须在 [0, 1] 内")
        if self.step_scale <= 0:
            errors.append("evo.step_scale 必须为正")
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass(eq=False)
class Constraints:
    """可行域: ‖η‖₀ ≤ k 且 ‖δ + step_scale·η‖∞ ≤ ε"""

    k: int
    delta: np.ndarray
    epsilon: float

    @property
    def shape(self):
        return self.delta.shape

    def violations(self, ind: SparseIndividual) -> np.ndarray:
        """逐基因判断是否越过 L∞ 上界"""
        if not len(ind):
            return np.zeros(0, dtype=bool)
        base = self.delta[tuple(ind.positions.T)]
        return np.abs(base + ind.step_scale * ind.values) > self.epsilon

    def check(self, ind: SparseIndividual):
        if ind.l0 > self.k:
            raise ConstraintViolationError(f"‖η‖₀ = {ind.l0} 超过 k = {self.k}")
        if np.any(self.violations(ind)):
            raise ConstraintViolationError("‖δ + η‖∞ 超过 ε")


@dataclass(eq=False)
class EvalTarget:
    """一个辅助模态的评估材料：模型、聚类库、查询样本、图库特征与原始特征的最近中心"""

    model: ModalityModel
    bank: CentroidBank
    images: np.ndarray
    labels: np.ndarray
    gallery_features: np.ndarray
    gallery_labels: np.ndarray
    home_centroids: np.ndarray

    @property
    def modality_id(self) -> int:
        return self.model.modality_id

    @classmethod
    def build(cls, model: ModalityModel, bank: CentroidBank, images: np.ndarray, labels: np.ndarray,
              gallery_images: np.ndarray, gallery_labels: np.ndarray) -> "EvalTarget":
        if model.modality_id != bank.modality_id:
            raise ShapeMismatchError(f"模型模态{model.modality_id} 与聚类库模态{bank.modality_id} 不一致")
        images = np.asarray(images, dtype=np.float64)
        if len(images) == 0 or len(gallery_images) == 0:
            raise ValueError(f"模态{model.modality_id} 的评估批次或图库为空")
        home, _ = nearest_farthest_batch(forward_batch(model, images), bank)
        return cls(model, bank, images, np.asarray(labels), forward_batch(model, gallery_images),
                   np.asarray(gallery_labels), home)

    @classmethod
    def from_dataset(cls, model: ModalityModel, bank: CentroidBank, dataset: ReidDataset, modality: int,
                     max_queries: int = 0) -> "EvalTarget":
        """查询取该模态查询划分，图库取图库划分"""
        if model.modality_id != modality:
            raise ShapeMismatchError(f"模型模态{model.modality_id} 与评估模态{modality} 不一致")
        images, labels = dataset.select(modality, SPLIT_QUERY)
        if max_queries > 0:
            images, labels = images[:max_queries], labels[:max_queries]
        gallery_images, gallery_labels = dataset.select(modality, SPLIT_GALLERY)
        return cls.build(model, bank, images, labels, gallery_images, gallery_labels)


def apply_eta(img: np.ndarray, delta: np.ndarray, eta: SparseIndividual, epsilon: float) -> np.ndarray:
    """clamp(img + clip(δ + step_scale·η, ε), 0, 255)；img 可以是单张或一批"""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3:] != delta.shape:
        raise ShapeMismatchError(f"图像形状 {img.shape[-3:]} 与 δ {delta.shape} 不符")
    combined = linf_clip(delta + eta.dense(delta.shape), epsilon)
    return np.clip(img + combined, 0.0, 255.0)


def evaluate(eta: SparseIndividual, delta: np.ndarray, epsilon: float,
             targets: Sequence[EvalTarget]) -> ObjectiveVector:
    """计算目标向量

    𝓓_i 为该模态样本对抗特征到原始特征最近中心的马氏距离均值，𝓓 = Σ𝓓_i；
    𝓢_i 为该模态检索 Top-1 失配率按多数阈值二值化
    """
    if not targets:
        raise ConfigError("没有可用于进化评估的辅助模型")
    combined = linf_clip(delta + eta.dense(delta.shape), epsilon)
    total = 0.0
    rates = []
    indicators = []
    for target in targets:
        adv = np.clip(target.images + combined, 0.0, 255.0)
        features = forward_batch(target.model, adv)
        diff = features - target.home_centroids
        distances = np.maximum(np.einsum('bi,ij,bj->b', diff, target.bank.s_inv, diff), 0.0)
        total += float(distances.mean())

        nearest = np.argsort(pairwise_euclidean(features, target.gallery_features), axis=1, kind='stable')[:, 0]
        rate = float(np.mean(target.gallery_labels[nearest] != target.labels))
        rates.append(rate)
        indicators.append(majority_success(rate))

    success_rate = float(np.mean(indicators))
    return ObjectiveVector(
        d_tilde=max(float(np.exp(-total)), _TINY),
        s_tilde=1.0 - success_rate,
        eta_l2=eta.l2,
        total_distance=total,
        success_rate=success_rate,
        model_rates=tuple(rates),
    )


def _objective(item) -> ObjectiveVector:
    return item[1] if isinstance(item, tuple) else item


def dominates(a, b) -> bool:
    """a 支配 b 当且仅当
    1) S_a > S_b；或
    2) S_a = S_b > 0 且按 (未阈值化失配率大, 𝓓 大, ‖η_a‖₂ 小) 字典序更优；或
    3) S_a = S_b = 0 且 d̃_a < d̃_b
    其中 S = 1 − s̃；参数可以是 ObjectiveVector 或 (个体, ObjectiveVector)

    多数阈值让 S 很快饱和，2) 里的失配率与 𝓓 只在双方都带逐模型数据时参与比较
    """
    a, b = _objective(a), _objective(b)
    if a.success > b.success:
        return True
    if a.success != b.success:
        return False
    if a.success > 0:
        if a.model_rates and b.model_rates:
            if a.fooled_rate != b.fooled_rate:
                return a.fooled_rate > b.fooled_rate
            if a.total_distance is not None and b.total_distance is not None \
                    and a.total_distance != b.total_distance:
                return a.total_distance > b.total_distance
        return a.eta_l2 < b.eta_l2
    if a.total_distance is not None and b.total_distance is not None:
        return a.total_distance > b.total_distance
    return a.d_tilde < b.d_tilde


def preference_key(obj: ObjectiveVector):
    """与 dominates 一致的全序键，越小越好"""
    if obj.success > 0 and obj.model_rates:
        return -obj.success, -obj.fooled_rate, -obj.distance, obj.eta_l2
    if obj.success > 0:
        return -obj.success, 0.0, 0.0, obj.eta_l2
    return -obj.success, 0.0, -obj.distance, 0.0


def nondominated_sort(objectives: Sequence) -> List[List[int]]:
    """快速非支配排序，返回按层排列的下标列表"""
    n = len(objectives)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    fronts: List[List[int]] = [[]]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if dominates(objectives[p], objectives[q]):
                dominated_by[p].append(q)
            elif dominates(objectives[q], objectives[p]):
                counts[p] += 1
        if counts[p] == 0:
            fronts[0].append(p)

    i = 0
    while fronts[i]:
        next_front = []
        for p in fronts[i]:
            for q in dominated_by[p]:
                counts[q] -= 1
                if counts[q] == 0:
                    next_front.append(q)
        i += 1
        fronts.append(sorted(next_front))
    return fronts[:-1]


def repair(ind: SparseIndividual, constraints: Constraints, rng: np.random.Generator) -> SparseIndividual:
    """先把越过 L∞ 上界的基因置0，再随机把多余的非零基因置0直到 ‖η‖₀ ≤ k"""
    values = ind.values.copy()
    values[constraints.violations(ind)] = 0
    nonzero = np.flatnonzero(values)
    excess = len(nonzero) - constraints.k
    if excess > 0:
        values[rng.choice(nonzero, size=excess, replace=False)] = 0
    return SparseIndividual(ind.positions.copy(), values, ind.step_scale)


def _checked(ind: SparseIndividual, constraints: Optional[Constraints]) -> SparseIndividual:
    if constraints is not None and debug_manager.are_constraint_checks_enabled():
        constraints.check(ind)
    return ind


def random_individual(rng: np.random.Generator, constraints: Constraints, step_scale: float) -> SparseIndividual:
    """k 个不重复像素，取值 ±1"""
    shape = constraints.shape
    n_pixels = int(np.prod(shape))
    count = min(constraints.k, n_pixels)
    flat = rng.choice(n_pixels, size=count, replace=False)
    positions = np.stack(np.unravel_index(flat, shape), axis=1)
    values = rng.choice(np.array([-1, 1], dtype=np.int8), size=count)
    return _checked(repair(SparseIndividual(positions, values, step_scale), constraints, rng), constraints)


def _dedupe(positions: List[np.ndarray], values: List[int], step_scale: float) -> SparseIndividual:
    seen = set()
    keep_pos, keep_val = [], []
    for pos, value in zip(positions, values):
        key = tuple(int(v) for v in pos)
        if key in seen:
            continue
        seen.add(key)
        keep_pos.append(key)
        keep_val.append(value)
    if not keep_pos:
        return SparseIndividual.empty(step_scale)
    return SparseIndividual(np.array(keep_pos), np.array(keep_val), step_scale)


def crossover(p1: SparseIndividual, p2: SparseIndividual, p_c: float, rng: np.random.Generator,
              constraints: Optional[Constraints] = None) -> Tuple[SparseIndividual, SparseIndividual]:
    """以概率 p_c 均匀混合双亲的 (位置, 取值) 基因，按位置去重；否则克隆"""
    if rng.random() >= p_c:
        return p1.copy(), p2.copy()
    genes_pos = list(p1.positions) + list(p2.positions)
    genes_val = [int(v) for v in p1.values] + [int(v) for v in p2.values]
    to_first = rng.random(len(genes_val)) < 0.5
    c1 = _dedupe([p for p, f in zip(genes_pos, to_first) if f], [v for v, f in zip(genes_val, to_first) if f],
                 p1.step_scale)
    c2 = _dedupe([p for p, f in zip(genes_pos, to_first) if not f],
                 [v for v, f in zip(genes_val, to_first) if not f], p1.step_scale)
    if constraints is not None:
        c1 = _checked(repair(c1, constraints, rng), constraints)
        c2 = _checked(repair(c2, constraints, rng), constraints)
    return c1, c2


def mutate(ind: SparseIndividual, p_m: float, rng: np.random.Generator,
           constraints: Optional[Constraints] = None, shape=None) -> SparseIndividual:
    """每个基因以概率 p_m 变异：一半翻转取值，一半迁移到未占用像素"""
    if p_m <= 0 or not len(ind):
        return ind.copy()
    shape = tuple(shape) if shape is not None else (constraints.shape if constraints is not None else None)
    positions = ind.positions.copy()
    values = ind.values.copy()
    occupied = {tuple(int(v) for v in pos) for pos in positions}
    n_pixels = int(np.prod(shape)) if shape is not None else 0
    for i in range(len(values)):
        if rng.random() >= p_m:
            continue
        if shape is None or rng.random() < 0.5 or len(occupied) >= n_pixels:
            values[i] = rng.choice([v for v in TERNARY if v != values[i]])
            continue
        while True:
            candidate = tuple(int(v) for v in np.unravel_index(int(rng.integers(n_pixels)), shape))
            if candidate not in occupied:
                break
        occupied.discard(tuple(int(v) for v in positions[i]))
        occupied.add(candidate)
        positions[i] = candidate
    child = SparseIndividual(positions, values, ind.step_scale)
    if constraints is not None:
        child = _checked(repair(child, constraints, rng), constraints)
    return child


def _selection_key(obj: ObjectiveVector, rank: int):
    """前沿层次优先，同层时 d̃ 小者（𝓓 大者）优先"""
    return rank, -obj.distance


def _tournament(rng: np.random.Generator, ranks: List[int], objectives: List[ObjectiveVector]) -> int:
    a, b = (int(i) for i in rng.choice(len(objectives), size=2, replace=False))
    return a if _selection_key(objectives[a], ranks[a]) <= _selection_key(objectives[b], ranks[b]) else b


def _ranks(fronts: List[List[int]], n: int) -> List[int]:
    ranks = [0] * n
    for level, front in enumerate(fronts):
        for i in front:
            ranks[i] = level
    return ranks


def select_best(individuals: Sequence[SparseIndividual],
                objectives: Sequence[ObjectiveVector]) -> Tuple[SparseIndividual, ObjectiveVector]:
    """第0层中按 preference_key 最优者，完全并列取下标小者"""
    front0 = nondominated_sort(objectives)[0]
    best = min(front0, key=lambda i: (preference_key(objectives[i]), i))
    return individuals[best], objectives[best]


@dataclass
class TraceRow:
    generation: int
    best_success: float
    best_d_tilde: float
    best_eta_l2: float
    mean_success: float
    alphas: List[object] = field(default_factory=list)


@dataclass(eq=False)
class Population:
    individuals: List[SparseIndividual]
    objectives: List[ObjectiveVector]
    generation: int
    archive: AlphaArchive


@dataclass(eq=False)
class EvoResult:
    best: SparseIndividual
    objective: ObjectiveVector
    trace: List[TraceRow]
    archive: AlphaArchive
    baseline_rates: Tuple[float, ...]


def _observe(population: Population, baselines: Tuple[float, ...]) -> Tuple[AlphaArchive, TraceRow]:
    observed = []
    for i, base in enumerate(baselines):
        values = [complementarity(base, obj.model_rates[i]) for obj in population.objectives]
        numeric = [v for v in values if v != BASELINE_ZERO]
        observed.append(max(numeric) if numeric else BASELINE_ZERO)
    archive = update_archive(population.archive, observed)
    _, best_obj = select_best(population.individuals, population.objectives)
    row = TraceRow(
        generation=population.generation,
        best_success=best_obj.success,
        best_d_tilde=best_obj.d_tilde,
        best_eta_l2=best_obj.eta_l2,
        mean_success=float(np.mean([obj.success for obj in population.objectives])),
        alphas=list(archive.best),
    )
    return archive, row


Observer = Callable[[Population], None]


@measure_time("evo", "evolve")
def evolve(delta: np.ndarray, epsilon: float, targets: Sequence[EvalTarget], config: EvoConfig,
           observer: Optional[Observer] = None) -> EvoResult:
    """代际循环: 评估 → 非支配排序 → 二元锦标赛 → 交叉 → 变异 → (μ+λ) 精英保留

    第1代只评估初始随机种群，此后每代产生 pop_size 个子代
    """
    config.validate()
    if not targets:
        raise ConfigError("进化层至少需要一个辅助模态")
    if np.abs(delta).max(initial=0.0) > epsilon:
        raise ConstraintViolationError("δ 本身已越过 ε")
    constraints = Constraints(config.k, np.asarray(delta, dtype=np.float64), float(epsilon))
    rng = np.random.default_rng(config.seed)

    baseline = evaluate(SparseIndividual.empty(config.step_scale), constraints.delta, epsilon, targets)
    baselines = baseline.model_rates
    for target, rate in zip(targets, baselines):
        if rate == 0:
            logger.search_debug("evo", f"模态{target.modality_id} 基线成功率为0, 不计入 α 存档")

    individuals = [random_individual(rng, constraints, config.step_scale) for _ in range(config.pop_size)]
    if config.seed_with_empty:
        individuals[0] = SparseIndividual.empty(config.step_scale)
    objectives = [evaluate(ind, constraints.delta, epsilon, targets) for ind in individuals]
    population = Population(individuals, objectives, 1, AlphaArchive(baselines))
    trace: List[TraceRow] = []

    log_every = debug_manager.get_search_setting("log_every_generations", 10)
    for generation in range(1, config.generations + 1):
        if generation > 1:
            ranks = _ranks(nondominated_sort(population.objectives), config.pop_size)
            offspring: List[SparseIndividual] = []
            while len(offspring) < config.pop_size:
                p1 = population.individuals[_tournament(rng, ranks, population.objectives)]
                p2 = population.individuals[_tournament(rng, ranks, population.objectives)]
                for child in crossover(p1, p2, config.p_c, rng, constraints):
                    offspring.append(mutate(child, config.p_m, rng, constraints))
            offspring = offspring[:config.pop_size]
            merged = population.individuals + offspring
            merged_obj = population.objectives + [evaluate(c, constraints.delta, epsilon, targets)
                                                  for c in offspring]
            merged_ranks = _ranks(nondominated_sort(merged_obj), len(merged))
            order = sorted(range(len(merged)),
                           key=lambda i: (_selection_key(merged_obj[i], merged_ranks[i]), merged_obj[i].eta_l2, i))
            survivors = order[:config.pop_size]
            population = Population([merged[i] for i in survivors], [merged_obj[i] for i in survivors],
                                    generation, population.archive)

        archive, row = _observe(population, baselines)
        population = replace(population, archive=archive)
        trace.append(row)
        if observer is not None:
            observer(population)
        if generation % log_every == 0 or generation == 1:
            logger.search_debug("evo", f"第{generation}代 最佳成功率={row.best_success:.3f} "
                                       f"d̃={row.best_d_tilde:.3e} ‖η‖₂={row.best_eta_l2:.2f}")
            if debug_manager.get_search_setting("log_individuals", False):
                for i, obj in enumerate(population.objectives):
                    logger.search_debug("evo", f"  个体{i}: 𝓓={obj.total_distance:.4f} 成功率={obj.success:.3f} "
                                               f"单模型={list(obj.model_rates)} ‖η‖₂={obj.eta_l2:.2f}")

    best, best_obj = select_best(population.individuals, population.objectives)
    logger.info(f"进化搜索完成: {config.generations}代, 最佳成功率 {best_obj.success:.3f}, ‖η‖₀ = {best.l0}")
    return EvoResult(best, best_obj, trace, population.archive, baselines)


def save_eta(eta: SparseIndividual, k: int, path) -> None:
    """写出 MMETA01: 魔数, (k, step_scale, 条数), 每条 (h:u16, w:u16, c:u8, 值:i8)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [ETA_MAGIC, _ETA_HEADER.pack(int(k), float(eta.step_scale), len(eta))]
    for (h, w, c), value in zip(eta.positions, eta.values):
        parts.append(_ETA_RECORD.pack(int(h), int(w), int(c), int(value)))
    path.write_bytes(b"".join(parts))


def load_eta(path) -> Tuple[SparseIndividual, int]:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(ETA_MAGIC)] != ETA_MAGIC:
        raise ArtifactFormatError("η 文件魔数错误", 0, path)
    offset = len(ETA_MAGIC)
    if len(data) < offset + _ETA_HEADER.size:
        raise ArtifactFormatError("η 文件头被截断", offset, path)
    k, step_scale, count = _ETA_HEADER.unpack_from(data, offset)
    offset += _ETA_HEADER.size
    if len(data) - offset != count * _ETA_RECORD.size:
        raise ArtifactFormatError(f"记录区长度与条数 {count} 不符", offset, path)
    records = list(_ETA_RECORD.iter_unpack(data[offset:]))
    positions = np.array([r[:3] for r in records], dtype=np.int64).reshape(-1, 3)
    values = np.array([r[3] for r in records], dtype=np.int8)
    try:
        eta = SparseIndividual(positions, values, step_scale)
    except (ValueError, ConstraintViolationError) as e:
        raise ArtifactFormatError(f"η 记录无效: {e}", offset, path) from e
    if eta.l0 > k:
        raise ArtifactFormatError(f"‖η‖₀ = {eta.l0} 超过文件声明的 k = {k}", len(ETA_MAGIC), path)
    return eta, k


def write_trace_csv(trace: Sequence[TraceRow], modality_ids: Sequence[int], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["generation", "best_success", "best_d_tilde", "best_eta_l2", "mean_success"]
                        + [f"alpha_m{m}" for m in modality_ids])
        for row in trace:
            writer.writerow([row.generation, repr(row.best_success), repr(row.best_d_tilde), repr(row.best_eta_l2),
                             repr(row.mean_success)]
                            + [a if a == BASELINE_ZERO else repr(float(a)) for a in row.alphas])
