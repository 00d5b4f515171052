"""
インターフェース定義

クリーンアーキテクチャにおける抽象インターフェース。
アプリケーション層はこれらのインターフェースに依存し、
具体的な保存形式（インフラ層）を知らない。
"""

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, Optional

if TYPE_CHECKING:
    import pandas as pd

    from src.domain.cohort import Cohort
    from src.domain.models import LandmarkModels


class CohortRepository(ABC):
    """コホート（人物表 + 測定表）のリポジトリ"""

    @abstractmethod
    def save(self, cohort: "Cohort", truth: Optional[dict] = None) -> list[str]:
        """
        コホートを保存

        Args:
            cohort: 保存するコホート
            truth: 生成時の真値（オラクル用、任意）

        Returns:
            書き出したファイルのパス
        """
        pass

    @abstractmethod
    def load(self) -> "Cohort":
        """コホートを読み込む"""
        pass


class ModelRepository(ABC):
    """推定済みモデル一式のリポジトリ"""

    @abstractmethod
    def save(self, models: list["LandmarkModels"]) -> None:
        """モデル一式とマニフェストを保存"""
        pass

    @abstractmethod
    def load(self, sex: Optional[str], la: int) -> "LandmarkModels":
        """(性別, ランドマーク年齢) のモデルを読み込む"""
        pass

    @abstractmethod
    def manifest(self) -> dict[str, Any]:
        """保存済みモデルの一覧"""
        pass


class ResultRepository(ABC):
    """集計結果のリポジトリ"""

    @abstractmethod
    def write_table(self, name: str, table: "pd.DataFrame") -> str:
        """表を保存してパスを返す"""
        pass

    @abstractmethod
    def write_json(self, name: str, data: dict[str, Any]) -> str:
        """JSON を保存してパスを返す"""
        pass
