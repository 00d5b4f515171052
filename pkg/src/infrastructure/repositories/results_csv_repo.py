"""
CSV 結果リポジトリ

集計表を tidy CSV、実行サマリーを JSON で書き出す。
"""

import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd

from src.core.exceptions import DataError
from src.core.interfaces import ResultRepository

logger = logging.getLogger(__name__)


class CsvResultRepository(ResultRepository):
    """出力ディレクトリへの書き出し"""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, name: str, suffix: str) -> Path:
        path = self.root / f"{name}{suffix}"
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_table(self, name: str, table: pd.DataFrame) -> str:
        try:
            path = self._path(name, ".csv")
            table.to_csv(path, index=False, lineterminator="\n")
        except OSError as e:
            raise DataError(f"結果を書き込めません: {name} ({e})") from e
        logger.info(f"結果保存: {path} ({len(table)}行)")
        return str(path)

    def write_json(self, name: str, data: dict[str, Any]) -> str:
        try:
            path = self._path(name, ".json")
            path.write_text(json.dumps(data, indent=2, ensure_ascii=False, default=str), encoding="utf-8")
        except OSError as e:
            raise DataError(f"結果を書き込めません: {name} ({e})") from e
        logger.info(f"結果保存: {path}")
        return str(path)
