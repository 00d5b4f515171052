"""
CVD リスク評価スケジューラ

ランドマーク生存モデルで個人ごとの5年 CVD リスクの推移を予測し、
Net Benefit を最大化するリスク評価の間隔を選ぶバッチツール。

使用例:
    # 合成コホートを生成
    python main.py simulate --config configs/desk.toml

    # モデル推定 → スケジューリング
    python main.py fit --config configs/desk.toml --sex F --landmarks 40,45
    python main.py schedule --config configs/desk.toml --sex F --landmarks 40,45

    # 検証と感度分析
    python main.py validate --config configs/desk.toml
    python main.py sweep --config configs/desk.toml --grid configs/sweep.toml
"""

import argparse
import logging
import sys

from dotenv import load_dotenv

# .env ファイルを読み込み（インポート前に実行する必要がある）
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from src.agents.director import create_director  # noqa: E402
from src.core.config import load_run_config, settings  # noqa: E402
from src.core.exceptions import ConfigError, CvdSchedulerError, DataError  # noqa: E402

COMMANDS = ("simulate", "fit", "schedule", "validate", "sweep", "report")


def setup_logging(verbose: bool = False) -> None:
    """ロギングの設定"""
    level = logging.DEBUG if verbose else getattr(logging, settings.log_level.upper(), logging.INFO)

    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    # 外部ライブラリのログレベルを抑制
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("numexpr").setLevel(logging.WARNING)


def parse_landmarks(value: str) -> list[int]:
    """'40,45,50' 形式のランドマーク年齢"""
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"ランドマーク年齢は整数のカンマ区切り: {value}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="CVD リスク評価スケジューラ - ランドマーク予測と Net Benefit による受診間隔の最適化",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  %(prog)s simulate --config configs/desk.toml
  %(prog)s fit --config configs/desk.toml --threads 8
  %(prog)s schedule --sex F --landmarks 40
  %(prog)s sweep --grid configs/sweep.toml

終了コード: 0 成功, 2 設定エラー, 3 数値エラー, 4 データエラー
        """,
    )
    parser.add_argument("command", choices=COMMANDS, help="実行するコマンド")
    parser.add_argument("--config", metavar="PATH", help="実行設定ファイル（JSON / TOML）")
    parser.add_argument("--out", metavar="DIR", help="出力ディレクトリ")
    parser.add_argument("--sex", choices=["M", "F", "both"], help="対象の性別")
    parser.add_argument("--landmarks", type=parse_landmarks, help="ランドマーク年齢（例: 40,45,50）")
    parser.add_argument("--threads", type=int, help="並列数")
    parser.add_argument("--seed", type=int, help="乱数シード")
    parser.add_argument("--grid", metavar="PATH", help="sweep: 感度分析グリッドファイル")
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="詳細ログを表示",
    )
    return parser


def run(args: argparse.Namespace) -> None:
    """コマンドを実行"""
    config = load_run_config(
        args.config,
        output_dir=args.out,
        sex_filter=args.sex,
        landmark_ages=args.landmarks,
        threads=args.threads,
        seed=args.seed,
    )
    director = create_director(config)

    if args.command == "simulate":
        director.cmd_simulate()
    elif args.command == "fit":
        director.cmd_fit()
    elif args.command == "schedule":
        director.cmd_schedule()
    elif args.command == "validate":
        director.cmd_validate()
    elif args.command == "sweep":
        director.cmd_sweep(args.grid)
    elif args.command == "report":
        director.cmd_report()


def main(argv: list[str] | None = None) -> int:
    """メインエントリーポイント"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # ロギング設定
    setup_logging(args.verbose)

    try:
        run(args)
    except KeyboardInterrupt:
        logging.warning("処理を中断しました")
        return 1
    except CvdSchedulerError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logging.error(f"設定エラー: {e}")
        return ConfigError.exit_code
    except OSError as e:
        logging.error(f"入出力エラー: {e}")
        return DataError.exit_code

    return 0


if __name__ == "__main__":
    sys.exit(main())
