#!/usr/bin/env python3
"""
版本号与运行出处
每个 summary.json 记录工具版本和数值库版本，跨机器比对结果时先看这里
"""

import json
from pathlib import Path
from typing import Dict

import numpy as np
import scipy

from core.errors import MissingArtifactError


class VersionHelper:
    """读取项目根目录的 version.json，结果缓存"""

    def __init__(self, version_file=None):
        self.version_file = Path(version_file) if version_file else Path(__file__).parent.parent / "version.json"
        self._version_cache = None

    def get_version_info(self) -> Dict[str, str]:
        if self._version_cache is None:
            if not self.version_file.exists():
                raise MissingArtifactError(self.version_file, "版本文件")
            with open(self.version_file, 'r', encoding='utf-8') as f:
                self._version_cache = json.load(f)
        return self._version_cache

    def get_version(self) -> str:
        return self.get_version_info()["version"]

    def provenance(self) -> Dict[str, str]:
        """写入运行汇总的出处信息：工具版本 + numpy/scipy 版本（浮点结果按位复现依赖后两者）"""
        return {"version": self.get_version(), "numpy": np.__version__, "scipy": scipy.__version__}


# 全局实例
version_helper = VersionHelper()
