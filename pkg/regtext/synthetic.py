"""
Bundled synthetic corpus
========================

A k-class token corpus for exercising the full pipeline without downloads.
Each class owns a block of indicator words; every token is drawn from the
shared pool with probability ``overlap`` and from the document's class block
otherwise, so ``overlap`` controls how separable the classes are.

Files are written in the same CSV convention as the benchmark corpora.
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from regtext.corpus import Document, write_dataset

logger = logging.getLogger(__name__)


class SyntheticCorpusConfig(BaseModel):
    num_classes: int = Field(default=2, ge=2)
    train_size: int = Field(default=2000, ge=1)
    test_size: int = Field(default=1000, ge=2)
    class_vocab: int = Field(default=40, ge=1, description="indicator words per class")
    shared_vocab: int = Field(default=200, ge=1)
    min_length: int = Field(default=8, ge=1)
    max_length: int = Field(default=30, ge=1)
    overlap: float = Field(default=0.8, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_lengths(self) -> "SyntheticCorpusConfig":
        if self.max_length < self.min_length:
            raise ValueError(f"max_length {self.max_length} < min_length {self.min_length}")
        return self


def class_word(class_index: int, j: int) -> str:
    return f"c{class_index}w{j}"


def shared_word(j: int) -> str:
    return f"s{j}"


def _document(label: int, config: SyntheticCorpusConfig, rng: np.random.Generator) -> Document:
    length = int(rng.integers(config.min_length, config.max_length + 1))
    from_shared = rng.random(length) < config.overlap
    shared = rng.integers(0, config.shared_vocab, size=length)
    indicator = rng.integers(0, config.class_vocab, size=length)
    words = [shared_word(s) if pick else class_word(label, c) for pick, s, c in zip(from_shared, shared, indicator)]
    return Document(text=" ".join(words), label=label)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def generate_corpus(config: SyntheticCorpusConfig) -> Tuple[List[Document], List[Document]]:
    """Class-balanced (train, test) document lists, fully determined by ``config.seed``."""
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    train = [_document(int(y), config, train_rng) for y in _balanced_labels(config.train_size, config.num_classes, train_rng)]
    test = [_document(int(y), config, test_rng) for y in _balanced_labels(config.test_size, config.num_classes, test_rng)]
    return train, test


def write_corpus(config: SyntheticCorpusConfig, output_dir: Path) -> Tuple[Path, Path]:
    """Write ``train.csv`` and ``test.csv`` under ``output_dir``."""
    output_dir = Path(output_dir)
    train, test = generate_corpus(config)
    train_path = write_dataset(output_dir / "train.csv", train)
    test_path = write_dataset(output_dir / "test.csv", test)
    logger.info(f"Synthetic corpus: {len(train)} train / {len(test)} test documents in {output_dir}")
    return train_path, test_path
