#!/usr/bin/env python3
"""
AG News Repeated-Run Reproduction
=================================

Repeats SWEM supervised and BiLSTM-MAX AT+VAT (20x unlabeled) training on the
600-labeled AG news protocol and reports mean / std / max-min of test
accuracy per setting.

Needs the AG news CSVs and 300-d pretrained vectors. Paths come from
``REGTEXT_AG_NEWS_DIR`` (directory holding train.csv and test.csv) and
``REGTEXT_GLOVE_PATH``, read from the environment or ``.env``. Expect hours
of CPU time.

Usage:
    python scripts/02_reproduce_ag_news.py
    python scripts/02_reproduce_ag_news.py --repeats 3 --jobs 3 --output-dir runs/ag_news_check
"""

import os
import sys
import json
import argparse
from pathlib import Path
from typing import Dict

from dotenv import load_dotenv

# Get project root (script -> scripts -> root)
SCRIPT_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = SCRIPT_DIR.parent
sys.path.insert(0, str(PROJECT_ROOT))

from regtext.corpus import SplitSpec, load_dataset, make_splits
from regtext.encoders import EncoderKind, ModelSpec
from regtext.settings import configure_logging, load_environment
from regtext.smoothing import Regime, RegimeConfig
from regtext.trainer import TrainerConfig, prepare_data, repeat_runs, write_result

SETTINGS = {
    "swem_sup": (EncoderKind.SWEM_CONCAT, Regime.SUP),
    "bilstm_max_at_vat": (EncoderKind.BILSTM_MAX, Regime.AT_VAT),
}


def load_paths() -> Dict[str, Path]:
    """Load and validate the dataset and embedding locations."""
    load_dotenv(PROJECT_ROOT / ".env")

    required_vars = ["REGTEXT_AG_NEWS_DIR", "REGTEXT_GLOVE_PATH"]
    missing_vars = [var for var in required_vars if not os.getenv(var)]
    if missing_vars:
        raise ValueError(f"Missing required environment variables: {', '.join(missing_vars)}")

    data_dir = Path(os.environ["REGTEXT_AG_NEWS_DIR"])
    paths = {
        "train": data_dir / "train.csv",
        "test": data_dir / "test.csv",
        "glove": Path(os.environ["REGTEXT_GLOVE_PATH"]),
    }
    for name, path in paths.items():
        if not path.exists():
            raise ValueError(f"{name} file not found: {path}")
    return paths


def main():
    parser = argparse.ArgumentParser(description="Repeated-run AG news reproduction")
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output-dir", type=Path, default=PROJECT_ROOT / "runs" / "ag_news_repeats")
    args = parser.parse_args()

    configure_logging(load_environment())
    try:
        paths = load_paths()
    except ValueError as e:
        print(f"❌ {e}")
        sys.exit(2)

    print("🚀 AG news repeated-run reproduction")
    print("=" * 60)

    train = load_dataset(paths["train"], expected_classes=4)
    test = load_dataset(paths["test"], expected_classes=4)
    splits = make_splits(train, test, SplitSpec(labeled_count=600, unlabeled_multiplier=20, seed=args.seed))
    hyper = TrainerConfig(show_progress=True)
    data = prepare_data(splits, 4, hyper, 300, paths["glove"], seed=args.seed)

    report = {}
    for name, (encoder, regime) in SETTINGS.items():
        spec = ModelSpec(encoder_kind=encoder, num_classes=4, dropout_rate=0.5)
        summary, results = repeat_runs(spec, RegimeConfig(regime=regime), data, hyper, args.repeats, args.seed, args.jobs)
        for result in results:
            write_result(result, args.output_dir / name / f"seed_{result.seed}.json")
        write_result(summary, args.output_dir / name / "aggregate.json")
        report[name] = summary.model_dump(mode="json")
        std = f"{100 * summary.std:.2f}" if summary.std is not None else "n/a"
        mean = f"{100 * summary.mean:.2f}" if summary.mean is not None else "n/a"
        print(f"📊 {name}: mean={mean} std={std} ({summary.completed}/{summary.runs} runs)")

    print(json.dumps(report, indent=2))
    print("✅ Done")


if __name__ == "__main__":
    main()
