"""
例外定義

各層が送出する型付きエラー。
CLI はこれらを終了コードに変換する（0 成功 / 2 設定 / 3 数値 / 4 データ）。
"""


class CvdSchedulerError(Exception):
    """本パッケージの基底エラー"""

    exit_code: int = 1


class ConfigError(CvdSchedulerError):
    """設定ファイル・設定値の不正"""

    exit_code = 2


class NumericError(CvdSchedulerError):
    """数値計算の失敗（非収束、発散、特異行列）"""

    exit_code = 3


class DataError(CvdSchedulerError):
    """入力データの不正（イベントなし、欠損アウトカム、評価範囲外など）"""

    exit_code = 4


class SchedulingError(DataError):
    """スケジューリング対象外の人物が渡された"""

    pass
