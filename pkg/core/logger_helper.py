#!/usr/bin/env python3
"""
统一日志系统辅助工具
三套独立的日志系统：
1. 主日志系统 - 用户级别，控制台 + 运行目录下的文件，可调节日志级别
2. 性能调试系统 - 开发者级别，阶段与函数耗时
3. 搜索调试系统 - 开发者级别，进化搜索逐代状态、梯度层逐轮损失
"""

import logging
import os
import sys
import threading
from datetime import datetime
from pathlib import Path
from typing import Optional

from debug_control.debug_manager import debug_manager

_LEVELS = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warning': logging.WARNING,
    'error': logging.ERROR,
}


class LoggerHelper:
    """统一日志管理器"""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        """单例模式"""
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super(LoggerHelper, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, '_initialized'):
            return

        self._initialized = True
        self.main_logger: Optional[logging.Logger] = None
        self.main_console_handler: Optional[logging.Handler] = None
        self.main_file_handler: Optional[logging.Handler] = None

        self.perf_logger: Optional[logging.Logger] = None
        self.search_logger: Optional[logging.Logger] = None

        self.run_directory: Optional[Path] = None
        self.max_log_files = 5
        self._debug_mode = os.environ.get('MMATTACK_DEBUG', '').lower() in ('1', 'true', 'on')

        self.setup_main_logger()

    def _file_formatter(self):
        return logging.Formatter(
            '%(asctime)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

    def setup_main_logger(self):
        """设置主日志系统（控制台部分）"""
        self.main_logger = logging.getLogger('MMAttack_Main')
        self.main_logger.setLevel(logging.DEBUG)
        self.main_logger.propagate = False

        if self.main_logger.handlers:
            self.main_logger.handlers.clear()

        console_formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        self.main_console_handler = logging.StreamHandler(sys.stderr)
        self.main_console_handler.setLevel(logging.DEBUG if self._debug_mode else logging.INFO)
        self.main_console_handler.setFormatter(console_formatter)
        self.main_logger.addHandler(self.main_console_handler)

    def attach_run_directory(self, run_directory, max_log_files: Optional[int] = None):
        """把文件日志挂到运行目录下 logs/{main,perf,search}"""
        if max_log_files is not None:
            self.max_log_files = max_log_files

        self.run_directory = Path(run_directory)
        base_log_dir = self.run_directory / "logs"
        timestamp = datetime.now().strftime('%Y-%m-%d_%H-%M-%S')

        # 主日志文件（总是创建）
        try:
            log_dir = base_log_dir / "main"
            log_dir.mkdir(parents=True, exist_ok=True)
            if self.main_file_handler is not None:
                self.main_logger.removeHandler(self.main_file_handler)
                self.main_file_handler.close()
            self.main_file_handler = logging.FileHandler(
                log_dir / f"main_{timestamp}.log", encoding='utf-8')
            self.main_file_handler.setLevel(logging.DEBUG)
            self.main_file_handler.setFormatter(self._file_formatter())
            self.main_logger.addHandler(self.main_file_handler)
            self._cleanup_old_logs(log_dir, "main_*.log", keep_count=self.max_log_files)
        except OSError as e:
            self.main_logger.error(f"主日志设置失败: {e}")

        if debug_manager.is_performance_debug_enabled():
            self.perf_logger = self._setup_debug_logger(
                'MMAttack_Perf', base_log_dir / "perf", f"perf_{timestamp}.log", "perf_*.log")

        if debug_manager.is_search_debug_enabled():
            self.search_logger = self._setup_debug_logger(
                'MMAttack_Search', base_log_dir / "search", f"search_{timestamp}.log", "search_*.log")

    def _setup_debug_logger(self, name: str, log_dir: Path, file_name: str, pattern: str):
        try:
            log_dir.mkdir(parents=True, exist_ok=True)
            debug_logger = logging.getLogger(name)
            debug_logger.setLevel(logging.DEBUG)
            debug_logger.propagate = False
            for handler in list(debug_logger.handlers):
                debug_logger.removeHandler(handler)
                handler.close()
            handler = logging.FileHandler(log_dir / file_name, encoding='utf-8')
            handler.setLevel(logging.DEBUG)
            handler.setFormatter(self._file_formatter())
            debug_logger.addHandler(handler)
            self._cleanup_old_logs(log_dir, pattern, keep_count=self.max_log_files)
            return debug_logger
        except OSError as e:
            self.main_logger.warning(f"调试日志 {name} 设置失败: {e}")
            return None

    def detach_run_directory(self):
        """关闭文件日志（测试与多次运行之间使用）"""
        if self.main_file_handler is not None:
            self.main_logger.removeHandler(self.main_file_handler)
            self.main_file_handler.close()
            self.main_file_handler = None
        for debug_logger in (self.perf_logger, self.search_logger):
            if debug_logger is None:
                continue
            for handler in list(debug_logger.handlers):
                debug_logger.removeHandler(handler)
                handler.close()
        self.perf_logger = None
        self.search_logger = None
        self.run_directory = None

    def _cleanup_old_logs(self, log_dir: Path, pattern: str, keep_count: int = 5):
        """清理旧的日志文件，保留最近的N个"""
        try:
            log_files = list(log_dir.glob(pattern))
            if len(log_files) <= keep_count:
                return

            log_files.sort(key=lambda f: f.stat().st_mtime, reverse=True)
            for old_file in log_files[keep_count:]:
                try:
                    old_file.unlink()
                    self.main_logger.debug(f"已删除旧日志文件: {old_file.name}")
                except OSError as e:
                    self.main_logger.error(f"删除旧日志文件失败 {old_file.name}: {e}")
        except OSError as e:
            self.main_logger.error(f"清理日志文件失败: {e}")

    def set_log_level_from_config(self, level_str: str):
        """从配置设置控制台日志级别

        Args:
            level_str: 'debug', 'info', 'warning', 'error'
        """
        level_str = level_str.lower()
        self._debug_mode = level_str == 'debug'
        if self.main_console_handler:
            self.main_console_handler.setLevel(_LEVELS.get(level_str, logging.INFO))

    # 标准日志接口
    def debug(self, message: str):
        """调试信息 - 只在调试模式下输出"""
        if self._debug_mode:
            self.main_logger.debug(message)

    def info(self, message: str):
        self.main_logger.info(message)

    def warning(self, message: str):
        self.main_logger.warning(message)

    def error(self, message: str):
        self.main_logger.error(message)

    # 性能监控相关
    def perf_debug(self, operation: str, duration: float, threshold: Optional[float] = None):
        """性能调试信息

        Args:
            operation: 操作描述
            duration: 耗时（秒）
            threshold: 警告阈值（秒），默认取 very_slow
        """
        if threshold is None:
            threshold = debug_manager.get_performance_threshold('very_slow')
        message = f"[性能] {operation} 耗时: {duration:.3f}秒"

        if duration > threshold:
            self.warning(f"{message} (超过阈值{threshold:.3f}秒)")

        if self.perf_logger:
            if duration > threshold:
                self.perf_logger.warning(message + f" (超过阈值{threshold:.3f}秒)")
            else:
                self.perf_logger.debug(message)

    # 搜索调试相关
    def search_debug(self, stage: str, message: str, level: str = "debug"):
        """搜索调试信息

        Args:
            stage: 'uap' 或 'evo'
            message: 调试信息
        """
        if self.search_logger and debug_manager.is_search_debug_enabled():
            log_method = getattr(self.search_logger, level.lower(), self.search_logger.debug)
            log_method(f"[搜索-{stage}] {message}")

    # 运行状态记录
    def phase_status(self, phase: str, status: str, details: str = ""):
        """记录实验阶段状态变化"""
        message = f"[阶段] {phase}: {status}"
        if details:
            message += f" - {details}"
        self.info(message)

    def metric_summary(self, phase: str, modality: int, rank1: float, mean_ap: float, success: float):
        """记录一行检索/攻击指标"""
        self.info(f"[指标] {phase} 模态{modality}: Rank-1={rank1:.2%} mAP={mean_ap:.2%} 成功率={success:.2%}")


# 全局实例
logger = LoggerHelper()

