#!/usr/bin/env python3
"""
实验编排
数据生成 → 逐模态训练 → 梯度层 δ → 进化层 η → 迁移评估 → 消融网格 → 汇总报告

运行目录结构:
    data/dataset.mmreid
    models/model_m{i}.mmemb, models/train_metrics.csv
    attack/<mode>/delta.mmuap, eta.mmeta, trace.csv, metrics.csv, summary.json
    ablate/ablation.csv, ablate/summary.json
    report.csv, summary.json
    logs/
"""

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.centroids import CentroidBank, build_bank
from core.config_manager import ConfigManager, ExperimentConfig
from core.dataset import (SPLIT_GALLERY, SPLIT_QUERY, SPLIT_TRAIN, ModalitySpec, ReidDataset,
                          build_multimodal, generate_identities, load_dataset, save_dataset)
from core.embedder import ModalityModel, init_model, load_model, save_model, train
from core.errors import ConfigError, MissingArtifactError
from core.eval_metrics import (BASELINE_ZERO, FitnessParams, complementarity, evaluate_retrieval, fitness)
from core.evo_search import (EvalTarget, EvoResult, SparseIndividual, evolve, save_eta, write_trace_csv)
from core.logger_helper import logger
from core.numerics import linf_clip
from core.performance_monitor import PhaseTimer
from core.uap_gradient import UniversalPerturbation, learn_uap, save_perturbation
from core.version_helper import version_helper

DATASET_FILE = Path("data") / "dataset.mmreid"
MODELS_DIR = Path("models")
ATTACK_DIR = Path("attack")
ABLATE_DIR = Path("ablate")

# 各随机阶段的种子编号
STAGE_DATA = 1
STAGE_MODALITY = 100
STAGE_TRAIN = 200
STAGE_BANK = 300
STAGE_UAP = 400
STAGE_EVO = 500

ABLATE_AXES = ("k", "n_models", "p_c", "p_m", "pop_size", "generations")


def stage_seed(seed: int, stage: int) -> int:
    """由实验种子和阶段编号派生独立子种子"""
    return int(np.random.SeedSequence([int(seed), int(stage)]).generate_state(1)[0])


def model_path(run_dir: Path, modality: int) -> Path:
    return Path(run_dir) / MODELS_DIR / f"model_m{modality}.mmemb"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, what)
    return path


def _write_csv(rows: List[Dict[str, Any]], path: Path, fieldnames: Optional[Sequence[str]] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


class ModelStore:
    """按需从运行目录加载模型，并记录每次访问发生在哪个阶段"""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.phase = "setup"
        self.access_log: List[Tuple[str, int]] = []
        self._cache: Dict[int, ModalityModel] = {}

    def get(self, modality: int) -> ModalityModel:
        self.access_log.append((self.phase, modality))
        if modality not in self._cache:
            self._cache[modality] = load_model(_require(model_path(self.run_dir, modality), f"模态{modality} 检查点"))
        return self._cache[modality]

    def accessed_in(self, phase: str) -> List[int]:
        return sorted({m for p, m in self.access_log if p == phase})


@dataclass
class RunReport:
    run_id: str
    mode: str
    seed: int
    version: str
    config: Dict[str, Any]
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    trace: List[Dict[str, Any]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    uap_loss_history: List[float] = field(default_factory=list)
    model_access: List[Tuple[str, int]] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, ensure_ascii=False, sort_keys=True)

    def metric(self, phase: str, modality: int) -> Optional[Dict[str, Any]]:
        for row in self.metrics:
            if row["phase"] == phase and row["modality"] == modality:
                return row
        return None


def cmd_gen_data(cfg: ExperimentConfig, run_dir) -> Path:
    """生成多模态合成数据集；同一种子重复调用得到相同文件"""
    run_dir = Path(run_dir)
    logger.phase_status("数据生成", "开始", f"{cfg.dataset.n_identities} 个身份, {len(cfg.modality_kinds)} 个模态")
    d = cfg.dataset
    base = generate_identities(d.n_identities, d.images_per_identity, d.shape, d.noise_sigma,
                               stage_seed(cfg.seed, STAGE_DATA), prototype_amplitude=d.prototype_amplitude,
                               n_bumps=d.n_bumps, train_fraction=d.train_fraction, query_fraction=d.query_fraction)
    specs = [ModalitySpec.from_label(kind, stage_seed(cfg.seed, STAGE_MODALITY + m))
             for m, kind in enumerate(cfg.modality_kinds)]
    dataset = build_multimodal(base, specs)
    path = run_dir / DATASET_FILE
    save_dataset(dataset, path)
    logger.phase_status("数据生成", "完成", f"{len(dataset)} 张图像 → {path}")
    return path


def _load_run_dataset(run_dir: Path) -> ReidDataset:
    return load_dataset(_require(Path(run_dir) / DATASET_FILE, "数据集"))


def _n_identities(dataset: ReidDataset) -> int:
    return int(dataset.identities.max()) + 1


def cmd_train(cfg: ExperimentConfig, run_dir) -> List[Dict[str, Any]]:
    """每个模态训练一个嵌入模型并报告干净 Rank-1"""
    run_dir = Path(run_dir)
    dataset = _load_run_dataset(run_dir)
    timer = PhaseTimer()
    rows = []
    for m in range(dataset.n_modalities):
        images, labels = dataset.select(m, SPLIT_TRAIN)
        with timer.measure("train"):
            model = init_model(dataset.shape, cfg.model.d_hidden, cfg.model.d_feat, _n_identities(dataset),
                               stage_seed(cfg.seed, STAGE_TRAIN + m), modality_id=m)
            history: List[float] = []
            model = train(model, images, labels, cfg.model.epochs, cfg.model.learning_rate,
                          cfg.model.batch_size, stage_seed(cfg.seed, STAGE_TRAIN + m), history)
        save_model(model, model_path(run_dir, m))

        query, query_labels = dataset.select(m, SPLIT_QUERY)
        gallery, gallery_labels = dataset.select(m, SPLIT_GALLERY)
        clean = evaluate_retrieval(model, query, query_labels, gallery, gallery_labels, ks=cfg.ranks)
        logger.metric_summary("clean", m, clean.ranks[min(cfg.ranks)], clean.mean_ap, clean.success_rate)
        row = {"modality": m, "kind": cfg.modality_kinds[m] if m < len(cfg.modality_kinds) else "",
               "final_loss": _format(history[-1] if history else None)}
        row.update({f"rank-{k}": _format(v) for k, v in clean.ranks.items()})
        row["mAP"] = _format(clean.mean_ap)
        rows.append(row)
    _write_csv(rows, run_dir / MODELS_DIR / "train_metrics.csv")
    logger.phase_status("训练", "完成", timer.get_performance_summary())
    return rows


def _n_clusters(cfg: ExperimentConfig, dataset: ReidDataset) -> int:
    return cfg.bank.n_clusters or len(dataset.identity_ids(SPLIT_TRAIN))


def _build_banks(cfg: ExperimentConfig, dataset: ReidDataset, store: ModelStore,
                 modalities: Sequence[int]) -> Dict[int, CentroidBank]:
    banks = {}
    for m in modalities:
        gallery, _ = dataset.select(m, SPLIT_GALLERY)
        banks[m] = build_bank(store.get(m), gallery, _n_clusters(cfg, dataset), cfg.bank.lambda_reg,
                              stage_seed(cfg.seed, STAGE_BANK + m), cfg.bank.max_iters)
    return banks


@dataclass(eq=False)
class AttackOutcome:
    report: RunReport
    delta: UniversalPerturbation
    eta: Optional[SparseIndividual]
    evo: Optional[EvoResult]
    aux_modalities: Tuple[int, ...]


def _validate_modalities(cfg: ExperimentConfig, dataset: ReidDataset):
    if len(cfg.modality_kinds) != dataset.n_modalities:
        raise ConfigError(f"配置有 {len(cfg.modality_kinds)} 个模态, 数据集有 {dataset.n_modalities} 个")


def learn_delta(cfg: ExperimentConfig, dataset: ReidDataset, store: ModelStore, timer: PhaseTimer,
                history: Optional[List[float]] = None) -> UniversalPerturbation:
    """梯度层；evo-only 模式下 δ = 0"""
    if cfg.mode == "evo-only":
        return UniversalPerturbation.zeros(dataset.shape, cfg.uap.epsilon)
    store.phase = "uap"
    models = {m: store.get(m) for m in cfg.source_modalities}
    banks = _build_banks(cfg, dataset, store, cfg.source_modalities)
    uap_cfg = replace(cfg.uap, seed=stage_seed(cfg.seed, STAGE_UAP))
    logger.phase_status("梯度层", "开始", f"源模态 {list(cfg.source_modalities)}, ε={uap_cfg.epsilon}")
    with timer.measure("uap"):
        up = learn_uap(models, banks, dataset, uap_cfg, history)
    return up


def run_attack(cfg: ExperimentConfig, dataset: ReidDataset, store: ModelStore,
               aux_modalities: Optional[Sequence[int]] = None,
               delta: Optional[UniversalPerturbation] = None,
               uap_history: Optional[List[float]] = None) -> AttackOutcome:
    """一次完整攻击，不写文件；δ 可由调用方预先给出以便在消融网格间复用"""
    _validate_modalities(cfg, dataset)
    timer = PhaseTimer()
    aux = tuple(cfg.auxiliary_modalities if aux_modalities is None else aux_modalities)
    history = list(uap_history or [])
    if delta is None:
        delta = learn_delta(cfg, dataset, store, timer, history)

    eta = None
    evo_result = None
    if cfg.mode in ("dual-layer", "evo-only"):
        if not aux:
            raise ConfigError("进化层需要至少一个辅助模态")
        store.phase = "evolve"
        banks = _build_banks(cfg, dataset, store, aux)
        targets = [EvalTarget.from_dataset(store.get(m), banks[m], dataset, m, cfg.eval_queries_per_model)
                   for m in aux]
        evo_cfg = replace(cfg.evo, seed=stage_seed(cfg.seed, STAGE_EVO))
        logger.phase_status("进化层", "开始", f"辅助模态 {list(aux)}, k={evo_cfg.k}, {evo_cfg.generations}代")
        with timer.measure("evolve"):
            evo_result = evolve(delta.delta, delta.epsilon, targets, evo_cfg)
        eta = evo_result.best

    store.phase = "evaluate"
    report = RunReport(run_id=f"{cfg.mode}-seed{cfg.seed}", mode=cfg.mode, seed=cfg.seed,
                       version=version_helper.get_version(), config={}, uap_loss_history=history)
    with timer.measure("evaluate"):
        report.metrics = evaluate_phases(cfg, dataset, store, delta, eta, aux)
    if evo_result is not None:
        report.trace = [
            {"generation": row.generation, "best_success": row.best_success, "best_d_tilde": row.best_d_tilde,
             "best_eta_l2": row.best_eta_l2, "mean_success": row.mean_success, "alphas": list(row.alphas)}
            for row in evo_result.trace
        ]
    report.timings = timer.as_dict()
    report.model_access = list(store.access_log)
    logger.info(timer.get_performance_summary())
    return AttackOutcome(report, delta, eta, evo_result, aux)


def evaluate_phases(cfg: ExperimentConfig, dataset: ReidDataset, store: ModelStore, delta: UniversalPerturbation,
                    eta: Optional[SparseIndividual], aux: Sequence[int]) -> List[Dict[str, Any]]:
    """clean / uap / uap+eta 三个阶段在源、辅助、留出模态上的检索与攻击指标"""
    phases: List[Tuple[str, Optional[np.ndarray]]] = [("clean", None)]
    if cfg.mode != "evo-only":
        phases.append(("uap", delta.delta))
    if eta is not None:
        combined = linf_clip(delta.delta + eta.dense(delta.delta.shape), delta.epsilon)
        phases.append(("uap+eta", combined))

    modalities = list(cfg.source_modalities) + list(aux) + [cfg.held_out_modality]
    rows: List[Dict[str, Any]] = []
    base_rates: Dict[int, float] = {}
    eta_rates: Dict[int, float] = {}
    for m in modalities:
        model = store.get(m)
        query, query_labels = dataset.select(m, SPLIT_QUERY)
        gallery, gallery_labels = dataset.select(m, SPLIT_GALLERY)
        for phase, perturbation in phases:
            result = evaluate_retrieval(model, query, query_labels, gallery, gallery_labels, perturbation, cfg.ranks)
            logger.metric_summary(phase, m, result.ranks[min(cfg.ranks)], result.mean_ap, result.success_rate)
            row: Dict[str, Any] = {"run_id": f"{cfg.mode}-seed{cfg.seed}", "phase": phase, "modality": m,
                                   "role": _role(cfg, m, aux)}
            row.update({f"rank-{k}": v for k, v in result.ranks.items()})
            row.update({"mAP": result.mean_ap, "success_rate": result.success_rate, "alpha": None,
                        "fitness": None})
            rows.append(row)
            if phase != "uap+eta":
                base_rates[m] = result.success_rate
            else:
                eta_rates[m] = result.success_rate

    if eta is not None:
        aux_rates = [eta_rates[m] for m in aux]
        value = fitness(aux_rates, FitnessParams.uniform(len(aux)), eta)
        for row in rows:
            if row["phase"] == "uap+eta":
                row["alpha"] = complementarity(base_rates[row["modality"]], row["success_rate"])
                row["fitness"] = value
    return rows


def _role(cfg: ExperimentConfig, modality: int, aux: Sequence[int]) -> str:
    if modality in cfg.source_modalities:
        return "source"
    if modality == cfg.held_out_modality:
        return "held-out"
    return "auxiliary" if modality in aux else "unused"


def _metric_fieldnames(cfg: ExperimentConfig) -> List[str]:
    return (["run_id", "phase", "modality", "role"] + [f"rank-{k}" for k in cfg.ranks]
            + ["mAP", "success_rate", "alpha", "fitness"])


def _metric_csv_rows(rows: List[Dict[str, Any]]) -> List[Dict[str, str]]:
    return [{key: (value if value == BASELINE_ZERO else _format(value)) for key, value in row.items()} for row in rows]


def cmd_attack(cfg: ExperimentConfig, run_dir, config_manager: Optional[ConfigManager] = None) -> RunReport:
    """执行攻击并写出 δ、η、进化轨迹、指标表与 JSON 汇总"""
    run_dir = Path(run_dir)
    dataset = _load_run_dataset(run_dir)
    for m in range(dataset.n_modalities):
        _require(model_path(run_dir, m), f"模态{m} 检查点")
    store = ModelStore(run_dir)
    outcome = run_attack(cfg, dataset, store)
    report = outcome.report

    out_dir = run_dir / ATTACK_DIR / cfg.mode
    out_dir.mkdir(parents=True, exist_ok=True)
    if config_manager is not None:
        config_manager.echo(out_dir)
        report.config = config_manager.as_dict()
    save_perturbation(outcome.delta, out_dir / "delta.mmuap")
    report.artifacts["delta"] = str(out_dir / "delta.mmuap")
    if outcome.eta is not None:
        save_eta(outcome.eta, cfg.evo.k, out_dir / "eta.mmeta")
        write_trace_csv(outcome.evo.trace, outcome.aux_modalities, out_dir / "trace.csv")
        report.artifacts["eta"] = str(out_dir / "eta.mmeta")
        report.artifacts["trace"] = str(out_dir / "trace.csv")
    _write_csv(_metric_csv_rows(report.metrics), out_dir / "metrics.csv", _metric_fieldnames(cfg))
    report.artifacts["metrics"] = str(out_dir / "metrics.csv")
    (out_dir / "summary.json").write_text(report.to_json(), encoding='utf-8')
    logger.phase_status("攻击", "完成", f"模式 {cfg.mode} → {out_dir}")
    return report


def ablation_cells(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    """网格笛卡尔积，按固定轴顺序展开"""
    axes = [(name, cfg.ablate[name]) for name in ABLATE_AXES if cfg.ablate.get(name)]
    if not axes:
        raise ConfigError("消融网格为空：至少设置一个 ablate.* 取值列表")
    names = [name for name, _ in axes]
    return [dict(zip(names, values)) for values in itertools.product(*(v for _, v in axes))]


def cmd_ablate(cfg: ExperimentConfig, run_dir, config_manager: Optional[ConfigManager] = None) -> List[Dict[str, Any]]:
    """在 {k, n_models, p_c, p_m, pop_size, generations} 网格上重复进化层"""
    if cfg.mode == "grad-only":
        raise ConfigError("消融网格作用于进化层，mode 不能为 grad-only")
    cells = ablation_cells(cfg)
    run_dir = Path(run_dir)
    dataset = _load_run_dataset(run_dir)
    _validate_modalities(cfg, dataset)
    store = ModelStore(run_dir)
    all_aux = cfg.auxiliary_modalities

    timer = PhaseTimer()
    uap_history: List[float] = []
    delta = learn_delta(cfg, dataset, store, timer, uap_history)
    rows = []
    for index, cell in enumerate(cells):
        evo_overrides = {key: value for key, value in cell.items() if key != "n_models"}
        cell_cfg = replace(cfg, evo=replace(cfg.evo, **evo_overrides))
        n_models = cell.get("n_models", len(all_aux))
        if n_models > len(all_aux):
            raise ConfigError(f"n_models = {n_models} 超过可用辅助模态数 {len(all_aux)}")
        logger.phase_status("消融", f"第{index + 1}/{len(cells)}格", str(cell))
        outcome = run_attack(cell_cfg, dataset, store, all_aux[:n_models], delta, uap_history)
        report = outcome.report
        held = report.metric("uap+eta", cfg.held_out_modality)
        aux_success = [report.metric("uap+eta", m)["success_rate"] for m in outcome.aux_modalities]
        row = {axis: _format(cell.get(axis, _cell_default(cell_cfg, axis, len(all_aux)))) for axis in ABLATE_AXES}
        row.update({
            "best_success": _format(outcome.evo.objective.success),
            "final_mean_success": _format(outcome.evo.trace[-1].mean_success),
            "aux_success_rate": _format(float(np.mean(aux_success))),
            "held_out_success_rate": _format(held["success_rate"]),
            f"held_out_rank-{min(cfg.ranks)}": _format(held[f"rank-{min(cfg.ranks)}"]),
            "eta_l0": outcome.eta.l0,
            "evolve_seconds": _format(report.timings.get("evolve", 0.0)),
        })
        rows.append(row)

    out_dir = run_dir / ABLATE_DIR
    _write_csv(rows, out_dir / "ablation.csv")
    if config_manager is not None:
        config_manager.echo(out_dir)
    summary = {**version_helper.provenance(), "seed": cfg.seed, "mode": cfg.mode,
               "cells": len(rows), "uap_seconds": timer.seconds("uap")}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, ensure_ascii=False), encoding='utf-8')
    logger.phase_status("消融", "完成", f"{len(rows)} 格 → {out_dir / 'ablation.csv'}")
    return rows


def _cell_default(cfg: ExperimentConfig, axis: str, n_aux: int):
    if axis == "n_models":
        return n_aux
    return getattr(cfg.evo, axis)


def cmd_report(run_dir) -> Dict[str, Any]:
    """汇总运行目录中所有指标表到 report.csv 与 summary.json，并打印 阶段 × 模态 表"""
    run_dir = Path(run_dir)
    metric_files = sorted((run_dir / ATTACK_DIR).glob("*/metrics.csv"))
    ablation_file = run_dir / ABLATE_DIR / "ablation.csv"
    if not metric_files and not ablation_file.exists():
        raise MissingArtifactError(run_dir / ATTACK_DIR, "攻击指标表")

    rows: List[Dict[str, str]] = []
    fieldnames: List[str] = ["source"]
    for path in metric_files:
        with open(path, newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            for name in reader.fieldnames or []:
                if name not in fieldnames:
                    fieldnames.append(name)
            for row in reader:
                rows.append({"source": str(path.relative_to(run_dir)), **row})
    _write_csv(rows, run_dir / "report.csv", fieldnames)

    summary: Dict[str, Any] = {**version_helper.provenance(), "runs": {}}
    for path in metric_files:
        run_summary = path.parent / "summary.json"
        if run_summary.exists():
            data = json.loads(run_summary.read_text(encoding='utf-8'))
            summary["runs"][path.parent.name] = {"timings": data.get("timings", {}), "seed": data.get("seed")}
    if ablation_file.exists():
        with open(ablation_file, newline='', encoding='utf-8') as f:
            summary["ablation"] = list(csv.DictReader(f))
    summary["metrics"] = rows
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, ensure_ascii=False), encoding='utf-8')

    # 这些print保留，因为是命令行工具的输出
    if rows:
        rank_key = next((name for name in fieldnames if name.startswith("rank-")), None)
        print(f"{'运行':<12}{'阶段':<10}{'模态':<6}{'角色':<10}{rank_key or '':<12}{'mAP':<10}")
        for row in rows:
            print(f"{Path(row['source']).parent.name:<12}{row['phase']:<10}{row['modality']:<6}{row['role']:<10}"
                  f"{float(row[rank_key]) if rank_key else 0:<12.4f}{float(row['mAP']):<10.4f}")
    logger.phase_status("报告", "完成", f"{len(rows)} 行 → {run_dir / 'report.csv'}")
    return summary
