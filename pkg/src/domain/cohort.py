"""
コホートコンテナ

人物表と測定表（ロング形式）を pandas DataFrame で保持する列指向コンテナ。
大規模コホートでも LongitudinalRecord を大量に生成せずに
ランドマーク抽出・LMEM 推定・BLUP 計算を行うための表現。
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from src.core.exceptions import DataError
from src.domain.models import (
    COMORBIDITIES,
    FACTORS,
    LongitudinalRecord,
    Measurement,
)

logger = logging.getLogger(__name__)

PERSON_COLUMNS: list[str] = [
    "person_id",
    "practice_id",
    "sex",
    "entry_age",
    "exit_age",
    "event_age",
    "death_age",
    "statin_start_age",
    "bpm_start_age",
    *COMORBIDITIES,
    "townsend",
]

MEASUREMENT_COLUMNS: list[str] = [
    "person_id",
    "practice_id",
    "age",
    "factor",
    "value",
    "bpm",
    "statin",
]

_FACTOR_INDEX = {name: k for k, name in enumerate(FACTORS)}


@dataclass(frozen=True)
class PersonHistory:
    """1人分の測定履歴（年齢昇順の numpy 配列）"""

    ages: np.ndarray
    factor_idx: np.ndarray
    values: np.ndarray
    bpm: np.ndarray
    statin: np.ndarray

    @classmethod
    def empty(cls) -> "PersonHistory":
        return cls(
            ages=np.empty(0),
            factor_idx=np.empty(0, dtype=int),
            values=np.empty(0),
            bpm=np.empty(0),
            statin=np.empty(0),
        )

    @classmethod
    def from_measurements(cls, measurements: Iterable[Measurement]) -> "PersonHistory":
        items = sorted(measurements, key=lambda m: m.age)
        if not items:
            return cls.empty()
        return cls(
            ages=np.array([m.age for m in items], dtype=float),
            factor_idx=np.array([_FACTOR_INDEX[m.factor] for m in items], dtype=int),
            values=np.array([m.value for m in items], dtype=float),
            bpm=np.array([m.bpm for m in items], dtype=float),
            statin=np.array([m.statin for m in items], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.ages)

    def truncate(self, cutoff: float) -> "PersonHistory":
        """年齢 <= cutoff の測定のみを残す"""
        n = int(np.searchsorted(self.ages, cutoff, side="right"))
        if n == len(self.ages):
            return self
        return PersonHistory(
            ages=self.ages[:n],
            factor_idx=self.factor_idx[:n],
            values=self.values[:n],
            bpm=self.bpm[:n],
            statin=self.statin[:n],
        )


class Cohort:
    """
    人物表 + 測定表のコホート

    persons: 1行1人（PERSON_COLUMNS）
    measurements: 1行1測定（MEASUREMENT_COLUMNS）、person_id・age でソート済み
    """

    def __init__(self, persons: pd.DataFrame, measurements: pd.DataFrame):
        missing = [c for c in PERSON_COLUMNS if c not in persons.columns]
        if missing:
            raise DataError(f"人物表に列がありません: {missing}")
        missing = [c for c in MEASUREMENT_COLUMNS if c not in measurements.columns]
        if missing:
            raise DataError(f"測定表に列がありません: {missing}")

        self.persons = persons[PERSON_COLUMNS].reset_index(drop=True)
        self.measurements = measurements[MEASUREMENT_COLUMNS].sort_values(
            ["person_id", "age"], kind="mergesort"
        ).reset_index(drop=True)
        self._histories: Optional[dict[int, PersonHistory]] = None

    def __len__(self) -> int:
        return len(self.persons)

    @property
    def person_ids(self) -> np.ndarray:
        return self.persons["person_id"].to_numpy()

    @classmethod
    def empty(cls) -> "Cohort":
        return cls(
            pd.DataFrame({c: pd.Series(dtype=float) for c in PERSON_COLUMNS}),
            pd.DataFrame({c: pd.Series(dtype=float) for c in MEASUREMENT_COLUMNS}),
        )

    @classmethod
    def from_records(cls, records: Iterable[LongitudinalRecord]) -> "Cohort":
        """LongitudinalRecord のリストから構築"""
        person_rows = []
        measurement_rows = []
        for rec in records:
            row = {
                "person_id": rec.person_id,
                "practice_id": rec.practice_id,
                "sex": rec.sex,
                "entry_age": rec.entry_age,
                "exit_age": rec.exit_age,
                "event_age": rec.event_age,
                "death_age": rec.death_age,
                "statin_start_age": rec.statin_start_age,
                "bpm_start_age": rec.bpm_start_age,
                "townsend": rec.fixed_covariates.get("townsend", 10.0),
            }
            for name in COMORBIDITIES:
                row[name] = rec.fixed_covariates.get(name, 0.0)
            person_rows.append(row)
            for m in rec.measurements:
                measurement_rows.append(
                    {
                        "person_id": rec.person_id,
                        "practice_id": rec.practice_id,
                        "age": m.age,
                        "factor": m.factor,
                        "value": m.value,
                        "bpm": m.bpm,
                        "statin": m.statin,
                    }
                )
        if not person_rows:
            return cls.empty()
        persons = pd.DataFrame(person_rows, columns=PERSON_COLUMNS)
        for col in ("event_age", "death_age", "statin_start_age", "bpm_start_age"):
            persons[col] = persons[col].astype(float)
        measurements = pd.DataFrame(measurement_rows, columns=MEASUREMENT_COLUMNS)
        return cls(persons, measurements)

    def records(self) -> list[LongitudinalRecord]:
        """LongitudinalRecord のリストに展開（検証付き）"""
        grouped = {
            pid: g for pid, g in self.measurements.groupby("person_id", sort=False)
        }
        records = []
        for row in self.persons.itertuples(index=False):
            g = grouped.get(row.person_id)
            measurements = []
            if g is not None:
                measurements = [
                    Measurement(float(a), str(f), float(v), int(b), int(s))
                    for a, f, v, b, s in zip(g["age"], g["factor"], g["value"], g["bpm"], g["statin"])
                ]
            fixed = {name: float(getattr(row, name)) for name in COMORBIDITIES}
            fixed["townsend"] = float(row.townsend)
            records.append(
                LongitudinalRecord(
                    person_id=int(row.person_id),
                    practice_id=int(row.practice_id),
                    sex=row.sex,
                    entry_age=float(row.entry_age),
                    exit_age=float(row.exit_age),
                    fixed_covariates=fixed,
                    measurements=measurements,
                    event_age=_optional(row.event_age),
                    death_age=_optional(row.death_age),
                    statin_start_age=_optional(row.statin_start_age),
                    bpm_start_age=_optional(row.bpm_start_age),
                )
            )
        return records

    def subset(self, person_ids: Iterable[int]) -> "Cohort":
        """指定した person_id のみのコホート"""
        ids = np.asarray(list(person_ids))
        persons = self.persons[self.persons["person_id"].isin(ids)]
        measurements = self.measurements[self.measurements["person_id"].isin(ids)]
        sub = Cohort(persons, measurements)
        if self._histories is not None:
            sub._histories = {pid: self._histories[pid] for pid in sub.person_ids if pid in self._histories}
        return sub

    def filter_persons(self, mask: np.ndarray) -> "Cohort":
        """人物表に対するブールマスクで絞り込み"""
        return self.subset(self.persons.loc[mask, "person_id"].to_numpy())

    def histories(self) -> dict[int, PersonHistory]:
        """person_id -> PersonHistory（初回のみ構築）"""
        if self._histories is None:
            histories: dict[int, PersonHistory] = {}
            m = self.measurements
            codes = m["factor"].map(_FACTOR_INDEX)
            if codes.isna().any():
                bad = sorted(set(m.loc[codes.isna(), "factor"]))
                raise DataError(f"未知のリスク因子: {bad}")
            pids = m["person_id"].to_numpy()
            ages = m["age"].to_numpy(dtype=float)
            fidx = codes.to_numpy(dtype=int)
            vals = m["value"].to_numpy(dtype=float)
            bpm = m["bpm"].to_numpy(dtype=float)
            statin = m["statin"].to_numpy(dtype=float)
            if len(pids):
                bounds = np.flatnonzero(np.diff(pids)) + 1
                starts = np.concatenate([[0], bounds])
                ends = np.concatenate([bounds, [len(pids)]])
                for a, b in zip(starts, ends):
                    histories[int(pids[a])] = PersonHistory(
                        ages[a:b], fidx[a:b], vals[a:b], bpm[a:b], statin[a:b]
                    )
            self._histories = histories
        return self._histories

    def history(self, person_id: int) -> PersonHistory:
        return self.histories().get(int(person_id), PersonHistory.empty())

    def by_sex(self, sex: str) -> "Cohort":
        return self.filter_persons((self.persons["sex"] == sex).to_numpy())


def _optional(value) -> Optional[float]:
    if value is None or pd.isna(value):
        return None
    return float(value)

