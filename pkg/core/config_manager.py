#!/usr/bin/env python3
"""
实验配置管理
内置默认值 ← --config 文件 (key=value, 点号分节) ← 命令行参数
"""

import copy
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from core.dataset import split_sizes
from core.errors import ConfigError
from core.evo_search import EvoConfig
from core.logger_helper import logger
from core.uap_gradient import UapConfig

ATTACK_MODES = ("grad-only", "dual-layer", "evo-only")
LOG_LEVELS = ("debug", "info", "warning", "error")
ECHO_FILENAME = "config_echo.conf"

# 列表型配置项的元素类型
_LIST_ELEMENT_TYPES = {
    "modalities.kinds": str,
    "experiment.source_modalities": int,
    "experiment.ranks": int,
    "ablate.k": int,
    "ablate.n_models": int,
    "ablate.p_c": float,
    "ablate.p_m": float,
    "ablate.pop_size": int,
    "ablate.generations": int,
}


@dataclass
class DatasetConfig:
    n_identities: int = 16
    images_per_identity: int = 10
    height: int = 16
    width: int = 8
    channels: int = 3
    noise_sigma: float = 1.0
    prototype_amplitude: float = 4.0
    n_bumps: int = 4
    train_fraction: float = 0.6
    query_fraction: float = 0.2

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels


@dataclass
class ModelConfig:
    d_hidden: int = 64
    d_feat: int = 16
    epochs: int = 60
    learning_rate: float = 0.1
    batch_size: int = 16


@dataclass
class BankConfig:
    n_clusters: int = 0
    lambda_reg: float = 1e-3
    max_iters: int = 100


@dataclass
class ExperimentConfig:
    """配置的类型化视图，各阶段只读取这里的字段"""

    dataset: DatasetConfig
    modality_kinds: List[str]
    model: ModelConfig
    bank: BankConfig
    uap: UapConfig
    evo: EvoConfig
    eval_queries_per_model: int
    seed: int
    source_modalities: Tuple[int, ...]
    held_out_modality: int
    mode: str
    ranks: Tuple[int, ...]
    ablate: Dict[str, List[Any]] = field(default_factory=dict)
    out_dir: Optional[Path] = None
    log_level: str = "info"
    max_log_files: int = 5

    @property
    def auxiliary_modalities(self) -> Tuple[int, ...]:
        """既不是源模态也不是留出模态的其余模态"""
        excluded = set(self.source_modalities) | {self.held_out_modality}
        return tuple(m for m in range(len(self.modality_kinds)) if m not in excluded)


class ConfigManager:
    """配置文件管理器"""

    def __init__(self, config_file=None):
        self.config_file = str(config_file) if config_file is not None else None
        self.config = self._load_default_config()
        if self.config_file is not None:
            self.load()

    def _load_default_config(self):
        """加载默认配置"""
        return {
            "_comment_dataset": "合成基准：每个身份一个平滑原型 + 高斯噪声",
            "dataset": {
                "n_identities": 16,
                "_comment_n_identities": "身份数 (至少2)",
                "images_per_identity": 10,
                "_comment_images_per_identity": "每个身份的图像数 (至少2)",
                "height": 16,
                "width": 8,
                "channels": 3,
                "noise_sigma": 1.0,
                "_comment_noise_sigma": "像素噪声标准差",
                "prototype_amplitude": 4.0,
                "_comment_prototype_amplitude": "原型亮度起伏幅度，需与 uap.epsilon 同一量级，否则 ε 内的扰动推不动特征",
                "n_bumps": 4,
                "train_fraction": 0.6,
                "query_fraction": 0.2,
                "_comment_fractions": "训练/查询比例，剩余为图库"
            },
            "_comment_modalities": "模态列表，顺序即模态编号",
            "modalities": {
                "kinds": ["identity-pass", "channel-mix", "grayscale-collapse", "intensity-invert"],
                "_comment_kinds": "可选: identity-pass, channel-mix, grayscale-collapse, intensity-invert"
            },
            "_comment_model": "每个模态一个两层嵌入模型",
            "model": {
                "d_hidden": 64,
                "d_feat": 16,
                "epochs": 60,
                "learning_rate": 0.1,
                "batch_size": 16
            },
            "_comment_bank": "聚类库与马氏度量",
            "bank": {
                "n_clusters": 0,
                "_comment_n_clusters": "0 表示取训练身份数",
                "lambda_reg": 1e-3,
                "_comment_lambda_reg": "协方差正则项 λ (必须为正)",
                "max_iters": 100
            },
            "_comment_uap": "第一层：梯度通用扰动",
            "uap": {
                "epochs": 40,
                "batch_size": 16,
                "epsilon": 8.0,
                "_comment_epsilon": "L∞ 上界 (像素值 0-255)",
                "rho": 0.5,
                "beta": 0.9,
                "_comment_beta": "动量衰减系数 [0, 1)",
                "alpha": 0.0,
                "_comment_alpha": "步长，0 表示 ε/10"
            },
            "_comment_evo": "第二层：稀疏三值扰动进化搜索",
            "evo": {
                "pop_size": 2,
                "generations": 150,
                "k": 64,
                "_comment_k": "‖η‖₀ 上界",
                "p_c": 0.8,
                "p_m": 0.1,
                "step_scale": 1.0,
                "_comment_step_scale": "η 取值乘以该系数后叠加到 δ 上",
                "seed_with_empty": True,
                "_comment_seed_with_empty": "初始种群放入一个 η = 0 的个体",
                "eval_queries_per_model": 0,
                "_comment_eval_queries": "0 表示使用该模态全部查询图像"
            },
            "_comment_experiment": "实验设计",
            "experiment": {
                "seed": 0,
                "source_modalities": [0],
                "_comment_source": "梯度层使用的模态编号 (逗号分隔)",
                "held_out_modality": 3,
                "_comment_held_out": "留出模态，不参与任何优化",
                "mode": "dual-layer",
                "_comment_mode": "grad-only, dual-layer, evo-only",
                "ranks": [1, 5, 10]
            },
            "_comment_ablate": "消融网格，留空表示该维度不变",
            "ablate": {
                "k": [],
                "n_models": [],
                "p_c": [],
                "p_m": [],
                "pop_size": [],
                "generations": []
            },
            "_comment_logging": "日志设置：记录程序运行日志",
            "logging": {
                "level": "info",
                "_comment_level": "日志级别: debug, info, warning, error",
                "max_log_files": 5,
                "_comment_max_files": "保留的最大日志文件数"
            }
        }

    def load(self):
        """从文件加载配置"""
        if not os.path.exists(self.config_file):
            raise ConfigError("配置文件不存在", self.config_file)
        with open(self.config_file, 'r', encoding='utf-8') as f:
            loaded = self._parse_lines(f.read().splitlines(), self.config_file)
        self._merge_config(self.config, loaded)
        logger.debug(f"已加载配置文件: {self.config_file}")

    def _parse_lines(self, lines, source) -> Dict[str, Any]:
        """逐行解析 key=value，返回嵌套字典"""
        loaded: Dict[str, Any] = {}
        for line_no, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(f"缺少 '=': {line}", source, line_no)
            key, value = (part.strip() for part in line.split('=', 1))
            default = self.get(key, _MISSING)
            if default is _MISSING or isinstance(default, dict) or key.split('.')[-1].startswith('_comment'):
                raise ConfigError(f"未知配置项: {key}", source, line_no)
            try:
                parsed = self._parse_value(key, value, default)
            except ValueError as e:
                raise ConfigError(f"{key} 的值无法解析: {value!r} ({e})", source, line_no) from e
            node = loaded
            parts = key.split('.')
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = parsed
        return loaded

    @staticmethod
    def _parse_value(key: str, text: str, default):
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError("布尔值只能是 true 或 false")
            return lowered == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            element = _LIST_ELEMENT_TYPES.get(key, str)
            return [element(item.strip()) for item in text.split(',') if item.strip()]
        return text

    def _merge_config(self, default, loaded):
        """递归合并配置，保留默认值"""
        for key, value in loaded.items():
            if key in default:
                if isinstance(value, dict) and isinstance(default[key], dict):
                    self._merge_config(default[key], value)
                else:
                    default[key] = value

    def get(self, key_path, default=None):
        """获取配置值

        Args:
            key_path: 配置路径，如 "uap.epsilon" 或 "logging.level"
            default: 默认值
        """
        value = self.config
        try:
            for key in key_path.split('.'):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key_path, value):
        """设置配置值，只允许已有配置项"""
        keys = key_path.split('.')
        config = self.config
        for key in keys[:-1]:
            if not isinstance(config.get(key), dict):
                raise ConfigError(f"未知配置项: {key_path}")
            config = config[key]
        if keys[-1] not in config or isinstance(config[keys[-1]], dict):
            raise ConfigError(f"未知配置项: {key_path}")
        config[keys[-1]] = value

    def apply_overrides(self, seed: Optional[int] = None, mode: Optional[str] = None):
        """命令行参数覆盖配置文件"""
        if seed is not None:
            self.set("experiment.seed", int(seed))
        if mode is not None:
            self.set("experiment.mode", mode)

    def items(self):
        """按默认值顺序展开为 (点号路径, 值)，跳过注释项"""
        def walk(node, prefix):
            for key, value in node.items():
                if key.startswith('_comment'):
                    continue
                path = f"{prefix}.{key}" if prefix else key
                if isinstance(value, dict):
                    yield from walk(value, path)
                else:
                    yield path, value
        return list(walk(self.config, ""))

    def validate(self) -> List[str]:
        """收集全部错误后返回，不在第一个错误处停止"""
        errors = []
        g = self.get

        def positive(key):
            if not g(key) > 0:
                errors.append(f"{key} 必须为正")

        if g("dataset.n_identities") < 2:
            errors.append("dataset.n_identities 至少为2")
        if g("dataset.images_per_identity") < 2:
            errors.append("dataset.images_per_identity 至少为2")
        for key in ("dataset.height", "dataset.width", "dataset.channels"):
            positive(key)
        if g("dataset.noise_sigma") < 0:
            errors.append("dataset.noise_sigma 不能为负")
        if not (0 <= g("dataset.train_fraction") and 0 < g("dataset.query_fraction")
                and g("dataset.train_fraction") + g("dataset.query_fraction") < 1):
            errors.append("dataset 划分比例无效")
        elif g("dataset.images_per_identity") >= 2:
            n_train, _, n_gallery = split_sizes(g("dataset.images_per_identity"), g("dataset.train_fraction"),
                                                g("dataset.query_fraction"))
            if n_train < 1:
                errors.append(f"dataset.images_per_identity = {g('dataset.images_per_identity')} 时训练划分为空")
            gallery_size = g("dataset.n_identities") * n_gallery
            if g("bank.n_clusters") > gallery_size:
                errors.append(f"bank.n_clusters = {g('bank.n_clusters')} 超过每个模态的图库图像数 {gallery_size}")

        kinds = g("modalities.kinds")
        valid_kinds = ("identity-pass", "channel-mix", "grayscale-collapse", "intensity-invert")
        for kind in kinds:
            if kind not in valid_kinds:
                errors.append(f"未知模态类型: {kind}")
        if "channel-mix" in kinds and g("dataset.channels") != 3:
            errors.append("channel-mix 模态要求 dataset.channels = 3")

        for key in ("model.d_hidden", "model.d_feat", "model.learning_rate", "model.batch_size"):
            positive(key)
        if g("model.epochs") < 0:
            errors.append("model.epochs 不能为负")
        if g("bank.n_clusters") < 0 or g("bank.n_clusters") == 1:
            errors.append("bank.n_clusters 必须为0或至少为2")
        positive("bank.lambda_reg")
        positive("bank.max_iters")

        positive("uap.epsilon")
        positive("uap.batch_size")
        if g("uap.epochs") < 0:
            errors.append("uap.epochs 不能为负")
        if g("uap.rho") < 0:
            errors.append("uap.rho 不能为负")
        if not 0 <= g("uap.beta") < 1:
            errors.append("uap.beta 必须在 [0, 1) 内")
        if g("uap.alpha") < 0:
            errors.append("uap.alpha 不能为负")

        if g("evo.pop_size") < 2:
            errors.append("evo.pop_size 至少为2")
        if g("evo.generations") < 1:
            errors.append("evo.generations 至少为1")
        if g("evo.k") < 1:
            errors.append("evo.k 至少为1")
        for key in ("evo.p_c", "evo.p_m"):
            if not 0 <= g(key) <= 1:
                errors.append(f"{key} 必须在 [0, 1] 内")
        positive("evo.step_scale")
        if g("evo.eval_queries_per_model") < 0:
            errors.append("evo.eval_queries_per_model 不能为负")

        n_modalities = len(kinds)
        sources = g("experiment.source_modalities")
        held_out = g("experiment.held_out_modality")
        if not sources:
            errors.append("experiment.source_modalities 不能为空")
        for m in sources:
            if not 0 <= m < n_modalities:
                errors.append(f"源模态 {m} 不在模态列表内")
        if len(set(sources)) != len(sources):
            errors.append("experiment.source_modalities 有重复")
        if not 0 <= held_out < n_modalities:
            errors.append(f"留出模态 {held_out} 不在模态列表内")
        if held_out in sources:
            errors.append("留出模态不能同时作为源模态")
        if g("experiment.mode") not in ATTACK_MODES:
            errors.append(f"experiment.mode 必须是 {', '.join(ATTACK_MODES)} 之一")
        if not g("experiment.ranks") or min(g("experiment.ranks")) < 1:
            errors.append("experiment.ranks 必须是正整数列表")

        for n in g("ablate.n_models"):
            if not 1 <= n <= n_modalities - 1 - len(sources):
                errors.append(f"ablate.n_models = {n} 超出可用辅助模态数")
        for value in g("ablate.k"):
            if value < 1:
                errors.append("ablate.k 的取值必须至少为1")
        for key in ("ablate.p_c", "ablate.p_m"):
            for value in g(key):
                if not 0 <= value <= 1:
                    errors.append(f"{key} 的取值必须在 [0, 1] 内")
        for value in g("ablate.pop_size"):
            if value < 2:
                errors.append("ablate.pop_size 的取值至少为2")
        for value in g("ablate.generations"):
            if value < 1:
                errors.append("ablate.generations 的取值至少为1")

        if g("logging.level").lower() not in LOG_LEVELS:
            errors.append("logging.level 必须是 debug, info, warning, error 之一")
        if g("logging.max_log_files") < 1:
            errors.append("logging.max_log_files 至少为1")
        return errors

    def ensure_valid(self):
        errors = self.validate()
        if errors:
            raise ConfigError("配置校验失败: " + "; ".join(errors), self.config_file)

    def to_experiment_config(self, out_dir=None) -> ExperimentConfig:
        self.ensure_valid()
        g = self.get
        seed = g("experiment.seed")
        epsilon = float(g("uap.epsilon"))
        return ExperimentConfig(
            dataset=DatasetConfig(**{k: v for k, v in g("dataset").items() if not k.startswith('_comment')}),
            modality_kinds=list(g("modalities.kinds")),
            model=ModelConfig(**{k: v for k, v in g("model").items() if not k.startswith('_comment')}),
            bank=BankConfig(**{k: v for k, v in g("bank").items() if not k.startswith('_comment')}),
            uap=UapConfig(epochs=g("uap.epochs"), batch_size=g("uap.batch_size"), epsilon=epsilon,
                          rho=float(g("uap.rho")), beta=float(g("uap.beta")),
                          alpha=float(g("uap.alpha")) or None, seed=seed),
            evo=EvoConfig(pop_size=g("evo.pop_size"), generations=g("evo.generations"), k=g("evo.k"),
                          p_c=float(g("evo.p_c")), p_m=float(g("evo.p_m")),
                          step_scale=float(g("evo.step_scale")), seed=seed,
                          seed_with_empty=g("evo.seed_with_empty")),
            eval_queries_per_model=g("evo.eval_queries_per_model"),
            seed=seed,
            source_modalities=tuple(g("experiment.source_modalities")),
            held_out_modality=g("experiment.held_out_modality"),
            mode=g("experiment.mode"),
            ranks=tuple(g("experiment.ranks")),
            ablate={k: list(v) for k, v in g("ablate").items() if not k.startswith('_comment') and v},
            out_dir=Path(out_dir) if out_dir is not None else None,
            log_level=g("logging.level").lower(),
            max_log_files=g("logging.max_log_files"),
        )

    @staticmethod
    def _format_value(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, list):
            return ",".join(ConfigManager._format_value(v) for v in value)
        return str(value)

    def as_dict(self) -> Dict[str, Any]:
        """去掉注释项的配置副本，用于 JSON 汇总"""
        def strip(node):
            return {k: strip(v) if isinstance(v, dict) else copy.deepcopy(v)
                    for k, v in node.items() if not k.startswith('_comment')}
        return strip(self.config)

    def echo(self, directory) -> Path:
        """写出合并后的完整配置，可被 --config 原样重新加载"""
        path = Path(directory) / ECHO_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{key}={self._format_value(value)}" for key, value in self.items()]
        path.write_text("\n".join(lines) + "\n", encoding='utf-8')
        return path

    def display_config(self):
        """显示当前配置(命令行模式)"""
        # 这个print保留，因为是命令行工具的输出
        print("=" * 60)
        print("当前配置")
        print("=" * 60)
        print(f"配置文件: {self.config_file or '(内置默认值)'}")
        section = None
        for key, value in self.items():
            head = key.split('.')[0]
            if head != section:
                section = head
                print(f"\n[{section}]")
            print(f"  {key.split('.', 1)[1]} = {self._format_value(value)}")


class _Missing:
    pass


_MISSING = _Missing()


def load_config(config_file=None, seed=None, mode=None) -> ConfigManager:
    """加载并应用命令行覆盖，出错时抛出 ConfigError"""
    manager = ConfigManager(config_file)
    manager.apply_overrides(seed=seed, mode=mode)
    manager.ensure_valid()
    return manager


def validate_config(config_file=None) -> bool:
    """验证配置文件有效性"""
    try:
        manager = ConfigManager(config_file)
    except ConfigError as e:
        print(f"配置文件有错误:\n  - {e}")
        return False
    errors = manager.validate()
    if errors:
        print("配置文件有错误:")
        for error in errors:
            print(f"  - {error}")
    else:
        print("配置文件验证通过")
    return not errors


def main():
    # 这个函数的print保留，因为是命令行工具的输出
    if len(sys.argv) > 1:
        command = sys.argv[1].lower()
        config_file = sys.argv[2] if len(sys.argv) > 2 else None
        if command == 'show':
            ConfigManager(config_file).display_config()
        elif command == 'validate':
            sys.exit(0 if validate_config(config_file) else 2)
        else:
            print(f"未知命令: {command}")
    else:
        print("配置文件管理器")
        print("\n用法:")
        print("  python -m core.config_manager show [文件]      # 显示合并后的配置")
        print("  python -m core.config_manager validate [文件]  # 验证配置文件")


if __name__ == "__main__":
    main()
