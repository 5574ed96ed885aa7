#!/usr/bin/env python3
"""
性能监控模块 - 按实验阶段记录墙钟耗时与进程内存
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List

import psutil

from core.logger_helper import logger


@dataclass
class PhaseRecord:
    """单个阶段的耗时记录"""

    phase: str
    seconds: float
    rss_mb: float
    rss_delta_mb: float


@dataclass
class PhaseTimer:
    """阶段计时器 - 只包住计算调用，不含文件读写"""

    records: List[PhaseRecord] = field(default_factory=list)

    def __post_init__(self):
        self.process = psutil.Process()
        self.peak_rss_mb = self._rss_mb()
        self.start_time = time.perf_counter()

    def _rss_mb(self) -> float:
        return self.process.memory_info().rss / 1024 / 1024

    @contextmanager
    def measure(self, phase: str):
        """测量一个阶段"""
        rss_before = self._rss_mb()
        start = time.perf_counter()
        try:
            yield
        finally:
            seconds = time.perf_counter() - start
            rss_after = self._rss_mb()
            self.peak_rss_mb = max(self.peak_rss_mb, rss_after)
            self.records.append(PhaseRecord(phase, seconds, rss_after, rss_after - rss_before))
            logger.perf_debug(f"阶段 {phase}", seconds)

    def seconds(self, phase: str) -> float:
        """同名阶段累加耗时"""
        return sum(r.seconds for r in self.records if r.phase == phase)

    def as_dict(self) -> Dict[str, float]:
        totals: Dict[str, float] = {}
        for record in self.records:
            totals[record.phase] = totals.get(record.phase, 0.0) + record.seconds
        return totals

    def get_performance_summary(self) -> str:
        """获取性能摘要"""
        runtime = time.perf_counter() - self.start_time
        return (
            f"运行时间: {runtime:.1f}秒 | "
            f"阶段数: {len(self.records)} | "
            f"峰值内存: {self.peak_rss_mb:.1f}MB"
        )
