"""
CSV コホートリポジトリ

人物表（persons.csv）と測定表（measurements.csv、ロング形式）の読み書き。
生成時の真値は truth.json に保存する。
"""

import json
import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from src.core.exceptions import DataError
from src.core.interfaces import CohortRepository
from src.domain.cohort import MEASUREMENT_COLUMNS, PERSON_COLUMNS, Cohort

logger = logging.getLogger(__name__)

PERSONS_FILE = "persons.csv"
MEASUREMENTS_FILE = "measurements.csv"
TRUTH_FILE = "truth.json"

_PERSON_DTYPES = {"person_id": "int64", "practice_id": "int64", "sex": "string"}
_MEASUREMENT_DTYPES = {
    "person_id": "int64",
    "practice_id": "int64",
    "factor": "string",
    "bpm": "int64",
    "statin": "int64",
}


class CsvCohortRepository(CohortRepository):
    """
    ディレクトリ単位の CSV コホート

    特徴:
    - カンマ区切り・ヘッダー行・UTF-8
    - 同じ入力から同じバイト列を書き出す
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def persons_path(self) -> Path:
        return self.root / PERSONS_FILE

    @property
    def measurements_path(self) -> Path:
        return self.root / MEASUREMENTS_FILE

    def exists(self) -> bool:
        return self.persons_path.exists() and self.measurements_path.exists()

    def save(self, cohort: Cohort, truth: Optional[dict] = None) -> list[str]:
        """
        コホートを書き出す

        Args:
            cohort: 保存するコホート
            truth: 生成時の真値（truth.json）

        Returns:
            書き出したファイルのパス

        Raises:
            DataError: 書き込めない場合
        """
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            cohort.persons.to_csv(self.persons_path, index=False, lineterminator="\n")
            cohort.measurements.to_csv(self.measurements_path, index=False, lineterminator="\n")
            written = [str(self.persons_path), str(self.measurements_path)]
            if truth is not None:
                path = self.root / TRUTH_FILE
                path.write_text(json.dumps(truth, indent=2, sort_keys=True), encoding="utf-8")
                written.append(str(path))
        except OSError as e:
            raise DataError(f"コホートを書き込めません: {self.root} ({e})") from e

        logger.info(f"コホート保存完了: {self.root} ({len(cohort)}人)")
        return written

    def load(self) -> Cohort:
        """
        コホートを読み込む

        Raises:
            DataError: ファイルがない、または列が足りない場合
        """
        if not self.exists():
            raise DataError(f"コホートファイルがありません: {self.root}")
        try:
            persons = pd.read_csv(self.persons_path, dtype=_PERSON_DTYPES)
            measurements = pd.read_csv(self.measurements_path, dtype=_MEASUREMENT_DTYPES)
        except (OSError, ValueError) as e:
            raise DataError(f"コホートを読み込めません: {self.root} ({e})") from e

        missing = [c for c in PERSON_COLUMNS if c not in persons.columns]
        missing += [c for c in MEASUREMENT_COLUMNS if c not in measurements.columns]
        if missing:
            raise DataError(f"{self.root}: 列がありません: {missing}")
        persons["sex"] = persons["sex"].astype(object)
        measurements["factor"] = measurements["factor"].astype(object)

        logger.info(f"コホート読み込み: {self.root} ({len(persons)}人, 測定 {len(measurements)}件)")
        return Cohort(persons, measurements)
