#!/usr/bin/env python3
"""
调试控制模块
包含所有调试相关的配置和管理器
"""

from .debug_config import *
from .debug_manager import debug_manager

__all__ = [
    'PERFORMANCE_DEBUG_ENABLED',
    'SEARCH_DEBUG_ENABLED',
    'CONSTRAINT_CHECKS_ENABLED',
    'PERFORMANCE_THRESHOLDS',
    'PERFORMANCE_COMPONENTS',
    'SEARCH_SETTINGS',
    'debug_manager'
]
