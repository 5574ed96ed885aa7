#!/usr/bin/env python3
"""
性能调试开关系统
关闭时装饰器直接调用原函数，不产生额外开销
"""

import time
from functools import wraps

from core.logger_helper import logger
from debug_control.debug_manager import debug_manager


def measure_time(component, operation):
    """测量操作耗时的装饰器"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            if not debug_manager.is_performance_debug_enabled() or not debug_manager.is_component_enabled(component):
                return func(*args, **kwargs)

            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.perf_debug(f"{component}.{operation} 异常 - {e}", time.perf_counter() - start_time)
                raise
            logger.perf_debug(f"{component}.{operation} 完成", time.perf_counter() - start_time,
                              threshold=debug_manager.get_performance_threshold('slow'))
            return result

        return wrapper
    return decorator
