#!/usr/bin/env python3
"""
Generate the Bundled Synthetic Corpus
=====================================

Writes a k-class token corpus in the benchmark CSV convention
(``"class","text"`` rows, 1-based classes) so the whole pipeline can be run
without downloading anything.

Usage:
    # Default corpus into data/synthetic/
    python scripts/01_generate_synthetic_corpus.py

    # Harder corpus (more shared tokens), four classes
    python scripts/01_generate_synthetic_corpus.py --classes 4 --overlap 0.9 --output-dir data/synthetic4
"""

import sys
import argparse
import logging
from pathlib import Path

# Get project root (script -> scripts -> root)
SCRIPT_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = SCRIPT_DIR.parent
sys.path.insert(0, str(PROJECT_ROOT))

from regtext.corpus import load_dataset
from regtext.settings import configure_logging, load_environment
from regtext.synthetic import SyntheticCorpusConfig, write_corpus

logger = logging.getLogger(__name__)


def main():
    """Generate the corpus and read it back as a format check."""
    parser = argparse.ArgumentParser(description="Generate the bundled synthetic text corpus")
    parser.add_argument("--output-dir", type=Path, default=PROJECT_ROOT / "data" / "synthetic")
    parser.add_argument("--classes", type=int, default=2)
    parser.add_argument("--train-size", type=int, default=2000)
    parser.add_argument("--test-size", type=int, default=1000)
    parser.add_argument("--overlap", type=float, default=0.8, help="Probability a token comes from the shared pool")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    configure_logging(load_environment())

    config = SyntheticCorpusConfig(
        num_classes=args.classes,
        train_size=args.train_size,
        test_size=args.test_size,
        overlap=args.overlap,
        seed=args.seed,
    )
    print("🚀 Generating synthetic corpus")
    print(f"📊 Classes: {config.num_classes}  Train: {config.train_size}  Test: {config.test_size}  Overlap: {config.overlap}")
    print("=" * 60)

    try:
        train_path, test_path = write_corpus(config, args.output_dir)
        train = load_dataset(train_path, config.num_classes)
        test = load_dataset(test_path, config.num_classes)
    except Exception as e:
        print(f"\n❌ Generation failed: {e}")
        sys.exit(1)

    print(f"✅ {len(train)} training documents -> {train_path}")
    print(f"✅ {len(test)} test documents -> {test_path}")


if __name__ == "__main__":
    main()
