#!/usr/bin/env python3
"""
异常定义 - 所有"拒绝"类结果统一抛出以下异常
命令行层根据异常类型决定退出码
"""

from typing import Optional


class AttackToolError(Exception):
    """工具内部异常基类"""

    exit_code = 1


class ConfigError(AttackToolError, ValueError):
    """配置错误（退出码2）"""

    exit_code = 2

    def __init__(self, message: str, source: Optional[str] = None, line: Optional[int] = None):
        self.source = source
        self.line = line
        location = ""
        if source is not None:
            location = f"{source}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class MissingArtifactError(AttackToolError, FileNotFoundError):
    """缺少运行产物（退出码3）"""

    exit_code = 3

    def __init__(self, path, what: str = "产物"):
        self.path = str(path)
        super().__init__(f"缺少{what}: {self.path}")

    def __str__(self):
        return self.args[0]


class ArtifactFormatError(AttackToolError, ValueError):
    """二进制产物格式错误，带字节偏移"""

    def __init__(self, message: str, offset: int, path=None):
        self.offset = offset
        self.path = str(path) if path is not None else None
        where = f"{self.path} " if self.path else ""
        super().__init__(f"{where}@字节{offset}: {message}")


class ShapeMismatchError(AttackToolError, ValueError):
    """维度或形状不一致"""


class ConstraintViolationError(AttackToolError, AssertionError):
    """扰动约束被破坏（‖η‖₀ ≤ k 或 L∞ 上界）"""
