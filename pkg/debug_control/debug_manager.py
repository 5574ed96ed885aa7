#!/usr/bin/env python3
"""
调试开关管理模块
统一管理性能调试、搜索调试和约束检查的开关状态
"""

import threading

from . import debug_config


class DebugManager:
    """调试开关管理器 - 基于Python常量"""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        """单例模式"""
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super(DebugManager, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, '_initialized'):
            return
        self._initialized = True

    @staticmethod
    def _flag(name: str) -> bool:
        return bool(getattr(debug_config, name))

    def is_performance_debug_enabled(self) -> bool:
        """检查性能调试是否启用"""
        return self._flag("PERFORMANCE_DEBUG_ENABLED")

    def is_search_debug_enabled(self) -> bool:
        """检查搜索调试是否启用"""
        return self._flag("SEARCH_DEBUG_ENABLED")

    def are_constraint_checks_enabled(self) -> bool:
        """检查约束断言是否启用"""
        return self._flag("CONSTRAINT_CHECKS_ENABLED")

    def is_component_enabled(self, component: str) -> bool:
        """某个组件的耗时记录是否打开"""
        return debug_config.PERFORMANCE_COMPONENTS.get(component, True)

    def get_search_setting(self, setting_name: str, default=None):
        """获取搜索调试的特定设置"""
        return debug_config.SEARCH_SETTINGS.get(setting_name, default)

    def get_performance_threshold(self, threshold_name: str) -> float:
        """获取性能阈值（秒）"""
        return debug_config.PERFORMANCE_THRESHOLDS.get(threshold_name, 0.5)


# 全局实例
debug_manager = DebugManager()
