"""
JSON モデルバンドルリポジトリ

(性別, ランドマーク年齢) ごとに LMEM・10年 Cox・5年 Cox を JSON で保存し、
manifest.json で一覧を管理する。
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from src.core.exceptions import DataError
from src.core.interfaces import ModelRepository
from src.domain.models import CoxFit, LandmarkAge, LandmarkModels, LmemFit

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def bundle_key(sex: Optional[str], la: int) -> str:
    return f"{sex or 'all'}_la{la}"


class JsonModelRepository(ModelRepository):
    """ディレクトリ単位の JSON モデルバンドル"""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _write(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")

    def save(self, models: list[LandmarkModels]) -> None:
        """
        モデル一式とマニフェストを保存

        Raises:
            DataError: 書き込めない場合
        """
        entries = []
        try:
            for m in models:
                key = bundle_key(m.sex, m.la.value)
                folder = self.root / key
                self._write(folder / "lmem.json", m.lmem_fit.model_dump_json(indent=2))
                self._write(folder / "cox_10y.json", m.cox_10y.model_dump_json(indent=2))
                cox_5y: dict[str, Optional[str]] = {}
                for s, fit in sorted(m.cox_5y.items()):
                    if fit is None:
                        cox_5y[str(s)] = None
                        continue
                    name = f"cox_5y_s{s}.json"
                    self._write(folder / name, fit.model_dump_json(indent=2))
                    cox_5y[str(s)] = name
                entries.append(
                    {
                        "key": key,
                        "sex": m.sex,
                        "la": m.la.value,
                        "lmem": "lmem.json",
                        "cox_10y": "cox_10y.json",
                        "cox_5y": cox_5y,
                        "unfittable": m.unfittable(),
                        "covariate_names": m.covariate_names,
                        "townsend_mode": m.townsend_mode,
                    }
                )
            self._write(self.root / MANIFEST_FILE, json.dumps({"bundles": entries}, indent=2))
        except OSError as e:
            raise DataError(f"モデルを書き込めません: {self.root} ({e})") from e
        logger.info(f"モデル保存完了: {self.root} ({len(entries)}組)")

    def manifest(self) -> dict[str, Any]:
        path = self.root / MANIFEST_FILE
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DataError(f"モデルのマニフェストがありません: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"マニフェストを読めません: {path} ({e})") from e

    def load(self, sex: Optional[str], la: int) -> LandmarkModels:
        """
        (性別, ランドマーク年齢) のモデルを読み込む

        Raises:
            DataError: マニフェストに無い、またはファイルが壊れている場合
        """
        key = bundle_key(sex, la)
        entry = next((e for e in self.manifest()["bundles"] if e["key"] == key), None)
        if entry is None:
            raise DataError(f"モデルがありません: {key}（先に fit を実行してください）")
        folder = self.root / key
        try:
            lmem_fit = LmemFit.model_validate_json((folder / entry["lmem"]).read_text(encoding="utf-8"))
            cox_10y = CoxFit.model_validate_json((folder / entry["cox_10y"]).read_text(encoding="utf-8"))
            cox_5y = {
                int(s): None
                if name is None
                else CoxFit.model_validate_json((folder / name).read_text(encoding="utf-8"))
                for s, name in entry["cox_5y"].items()
            }
            return LandmarkModels(
                la=LandmarkAge(value=la),
                sex=sex,
                lmem_fit=lmem_fit,
                cox_10y=cox_10y,
                cox_5y=cox_5y,
                covariate_names=entry["covariate_names"],
                townsend_mode=entry["townsend_mode"],
            )
        except (OSError, ValidationError) as e:
            raise DataError(f"モデルを読み込めません: {folder} ({e})") from e
