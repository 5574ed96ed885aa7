#!/usr/bin/env python3
"""
开发者调试开关配置
这些常量不进入用户配置文件，修改后需要重新运行程序生效
"""

# ===== 调试系统开关 =====
# 发行版建议：性能调试、搜索调试为False，约束检查保持True

# 性能调试：记录各阶段和关键函数的耗时
PERFORMANCE_DEBUG_ENABLED = False

# 搜索调试：逐代记录进化搜索状态、逐轮记录梯度层损失
SEARCH_DEBUG_ENABLED = False

# 约束检查：每次遗传操作后断言 ‖η‖₀ ≤ k 与 ‖δ + s·η‖∞ ≤ ε，每次δ更新后断言 ‖δ‖∞ ≤ ε
CONSTRAINT_CHECKS_ENABLED = True


# ===== 性能调试配置 =====
# 阶段耗时阈值（秒）
PERFORMANCE_THRESHOLDS = {
    "fast": 0.05,
    "normal": 0.5,
    "slow": 5.0,
    "very_slow": 30.0
}

# 需要记录耗时的组件，与 measure_time 的 component 参数对应
PERFORMANCE_COMPONENTS = {
    "embedder": True,
    "uap": True,
    "evo": True
}


# ===== 搜索调试配置 =====
SEARCH_SETTINGS = {
    "log_every_generations": 10,   # 每隔多少代记录一次
    "log_every_uap_epochs": 5,     # 梯度层每隔多少轮记录一次
    "log_individuals": False       # 是否记录每个个体的目标向量
}
