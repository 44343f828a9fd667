"""
Corpus handling
===============

Tokenization, vocabulary, pretrained vectors, Zhang-et-al. CSV datasets,
the stratified labeled / unlabeled / validation / test protocol and padded
document batches.

Everything here is a pure function of its inputs and an explicit seed.
"""

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from regtext.errors import (
    ClassCountError,
    DatasetFormatError,
    EmbeddingDimensionError,
    EmbeddingFileError,
    InsufficientDataError,
)

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

DEFAULT_T_CAP = 400
PROTOCOL_MULTIPLIERS = (20, 10, 5, 2)
INIT_RANGE = 0.01

# class counts of the four benchmark corpora
KNOWN_CLASS_COUNTS: Dict[str, int] = {"ag_news": 4, "dbpedia": 14, "yahoo": 10, "yelp_polarity": 2}

_NEGATION = re.compile(r"(\w)n't\b")
_TOKEN = re.compile(r"n't|'(?:s|re|ve|ll|d|m)\b|\w+|[^\w\s]")


# =============================================================================
# TOKENS AND VOCABULARY
# =============================================================================

def tokenize(text: str) -> List[str]:
    """Lowercased words, clitics (``n't``, ``'s``, ``'re`` ...) and single punctuation marks."""
    text = _NEGATION.sub(r"\1 n't", text.lower())
    return _TOKEN.findall(text)


class Vocabulary:
    """Token/index map with padding at 0 and unknown at 1."""

    def __init__(self, tokens: Sequence[str], counts: Optional[Sequence[int]] = None):
        tokens = list(tokens)
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            tokens = [PAD_TOKEN, UNK_TOKEN] + [t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.tokens: List[str] = tokens
        self.counts: List[int] = list(counts) if counts is not None else [0] * len(tokens)
        if len(self.counts) != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.counts)} counts")
        self._index = {token: i for i, token in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self.tokens[index]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.index(t) for t in tokens), dtype=np.int64)

    def frequencies(self) -> np.ndarray:
        """Relative token frequencies; reserved rows get zero weight."""
        counts = np.asarray(self.counts, dtype=np.float64)
        total = counts.sum()
        return counts / total if total > 0 else counts


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Every token seen at least ``min_count`` times, most frequent first (ties lexicographic)."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counter: Counter = Counter()
    for tokens in corpus:
        counter.update(tokens)
    kept = sorted((item for item in counter.items() if item[1] >= min_count), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(
        [PAD_TOKEN, UNK_TOKEN] + [token for token, _ in kept],
        [0, 0] + [count for _, count in kept],
    )


# =============================================================================
# PRETRAINED VECTORS
# =============================================================================

@dataclass
class EmbeddingTable:
    vectors: np.ndarray                 # [|V|, d], row 0 all zero
    pretrained: np.ndarray              # bool per row
    skipped_lines: int = 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def coverage(self) -> float:
        """Fraction of non-reserved tokens found in the pretrained file."""
        real = self.pretrained[2:]
        return float(real.mean()) if real.size else 0.0


def random_embeddings(vocab: Vocabulary, d: int, seed: int, dtype=np.float32) -> EmbeddingTable:
    """Uniform [-0.01, 0.01] rows, zero padding row."""
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(len(vocab), d)).astype(dtype)
    vectors[PAD_INDEX] = 0.0
    return EmbeddingTable(vectors=vectors, pretrained=np.zeros(len(vocab), dtype=bool))


def _header_dimension(parts: List[str]) -> Optional[int]:
    if len(parts) == 2 and all(p.isdigit() for p in parts):
        return int(parts[1])
    return None


def load_pretrained(path: Path, vocab: Vocabulary, d: int = 300, seed: int = 0, show_progress: bool = False) -> EmbeddingTable:
    """Initialize an embedding table from a GloVe/word2vec text file.

    Rows of tokens present in the file equal the file vectors exactly; every
    other row is uniform in [-0.01, 0.01]; the padding row is zero and the
    unknown row is never taken from the file. Lines whose arity differs from
    ``d + 1`` are skipped and counted.
    """
    path = Path(path)
    table = random_embeddings(vocab, d, seed)
    skipped = 0
    try:
        with open(path, encoding="utf-8") as handle:
            first = True
            for line in tqdm(handle, desc="Reading vectors", unit=" lines", disable=not show_progress):
                parts = line.rstrip().split(" ")
                if first:
                    first = False
                    header = _header_dimension(parts)
                    if header is not None:
                        if header != d:
                            raise EmbeddingDimensionError(path, d, header)
                        continue
                    if len(parts) != d + 1:
                        raise EmbeddingDimensionError(path, d, len(parts) - 1)
                if len(parts) != d + 1:
                    skipped += 1
                    continue
                token = parts[0]
                index = vocab.index(token)
                if index <= UNK_INDEX or token == UNK_TOKEN or table.pretrained[index]:
                    continue
                table.vectors[index] = np.asarray(parts[1:], dtype=np.float32)
                table.pretrained[index] = True
    except (OSError, UnicodeDecodeError) as e:
        raise EmbeddingFileError(path, str(e)) from e
    if first:
        raise EmbeddingFileError(path, "file is empty")
    if skipped:
        logger.warning(f"Skipped {skipped} malformed lines in {path.name}")
    table.skipped_lines = skipped
    logger.info(f"Pretrained coverage {table.coverage:.1%} of {len(vocab) - 2} tokens from {path.name}")
    return table


# =============================================================================
# DATASETS
# =============================================================================

class Document(NamedTuple):
    text: str
    label: Optional[int]


@dataclass
class Dataset:
    path: Path
    documents: List[Document]
    num_classes: int

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([doc.label for doc in self.documents], dtype=np.int64)

    @property
    def texts(self) -> List[str]:
        return [doc.text for doc in self.documents]


def _parser_row(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def _undecodable_line(path: Path) -> Optional[int]:
    with path.open("rb") as handle:
        for number, line in enumerate(handle, start=1):
            try:
                line.decode("utf-8")
            except UnicodeDecodeError:
                return number
    return None


def load_dataset(path: Path, expected_classes: Optional[int] = None) -> Dataset:
    """Read a Zhang-et-al. CSV: 1-based class in column 1, text in the rest.

    Labels come back 0-based. A label beyond ``expected_classes`` is an
    error; a training file that happens to miss a class is only a warning.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, quoting=csv.QUOTE_MINIMAL, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DatasetFormatError(path, _parser_row(str(e)), str(e).strip()) from e
    except UnicodeDecodeError as e:
        raise DatasetFormatError(path, _undecodable_line(path), f"not valid UTF-8 ({e.reason})") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetFormatError(path, None, "file is empty") from e
    if frame.shape[1] < 2:
        raise DatasetFormatError(path, 1, "expected a class column and at least one text column")

    documents: List[Document] = []
    for row, values in enumerate(frame.itertuples(index=False, name=None), start=1):
        raw_label = values[0].strip()
        if not raw_label.isdigit() or int(raw_label) < 1:
            raise DatasetFormatError(path, row, f"class must be a positive integer, got {raw_label!r}")
        text = " ".join(v for v in values[1:] if v).replace("\\n", "\n")
        documents.append(Document(text=text, label=int(raw_label) - 1))

    found = max(doc.label for doc in documents) + 1 if documents else 0
    num_classes = expected_classes or found
    if found > num_classes:
        raise ClassCountError(path, num_classes, found)
    distinct = len({doc.label for doc in documents})
    if distinct < num_classes:
        logger.warning(f"{path.name}: only {distinct} of {num_classes} classes present")
    logger.info(f"Loaded {len(documents)} documents ({num_classes} classes) from {path.name}")
    return Dataset(path=path, documents=documents, num_classes=num_classes)


def write_dataset(path: Path, documents: Sequence[Document]) -> Path:
    """Write documents back in the Zhang CSV convention (1-based class, quoted text)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {"label": [str(doc.label + 1) for doc in documents], "text": [doc.text.replace("\n", "\\n") for doc in documents]}
    )
    frame.to_csv(path, header=False, index=False, quoting=csv.QUOTE_ALL)
    return path


# =============================================================================
# SPLITS
# =============================================================================

class SplitSpec(BaseModel):
    labeled_fraction: float = Field(default=0.005, gt=0, le=1)
    labeled_count: Optional[int] = Field(default=None, ge=1, description="absolute labeled size; overrides the fraction")
    unlabeled_multiplier: int = Field(default=20, ge=0)
    validation_fraction_of_test: float = Field(default=0.5, gt=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _note_protocol_range(self) -> "SplitSpec":
        if self.labeled_count is None and not 0.001 <= self.labeled_fraction <= 0.005:
            logger.warning(f"labeled_fraction {self.labeled_fraction} is outside the 0.1%-0.5% protocol")
        if self.unlabeled_multiplier not in PROTOCOL_MULTIPLIERS + (0,):
            logger.warning(f"unlabeled_multiplier {self.unlabeled_multiplier} is outside {PROTOCOL_MULTIPLIERS}")
        return self


class SplitManifest(BaseModel):
    """Document indices per split; labeled/unlabeled index the training file, validation/test the test file."""

    spec: SplitSpec
    train_size: int
    test_size: int
    labeled: List[int]
    unlabeled: List[int]
    validation: List[int]
    test: List[int]


@dataclass
class Splits:
    manifest: SplitManifest
    labeled: List[Document]
    unlabeled: List[Document]
    validation: List[Document]
    test: List[Document]


def labeled_per_class(train_size: int, num_classes: int, spec: SplitSpec) -> int:
    # round first so 120000 * 0.005 lands on 600, not 599.999...
    total = spec.labeled_count if spec.labeled_count is not None else int(np.floor(round(train_size * spec.labeled_fraction, 6)))
    return total // num_classes


def _draw_per_class(
    split: str, labels: np.ndarray, pool: np.ndarray, quotas: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    chosen = []
    for class_index, quota in enumerate(quotas):
        members = pool[labels[pool] == class_index]
        if members.size < quota:
            raise InsufficientDataError(split, class_index, quota, int(members.size))
        chosen.append(rng.choice(members, size=quota, replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)


def make_split_indices(train_labels: np.ndarray, test_labels: np.ndarray, num_classes: int, spec: SplitSpec) -> SplitManifest:
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    labeled_rng, unlabeled_rng, validation_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )

    per_class = labeled_per_class(len(train_labels), num_classes, spec)
    if per_class < 1:
        raise InsufficientDataError("labeled", None, num_classes, len(train_labels))
    labeled = _draw_per_class("labeled", train_labels, np.arange(len(train_labels)), [per_class] * num_classes, labeled_rng)

    remainder = np.setdiff1d(np.arange(len(train_labels)), labeled)
    n_unlabeled = spec.unlabeled_multiplier * labeled.size
    if n_unlabeled > remainder.size:
        raise InsufficientDataError("unlabeled", None, n_unlabeled, int(remainder.size))
    unlabeled = np.sort(unlabeled_rng.choice(remainder, size=n_unlabeled, replace=False))

    n_validation = int(np.floor(len(test_labels) * spec.validation_fraction_of_test))
    base, extra = divmod(n_validation, num_classes)
    quotas = [base + (1 if c < extra else 0) for c in range(num_classes)]
    validation = _draw_per_class("validation", test_labels, np.arange(len(test_labels)), quotas, validation_rng)
    test = np.setdiff1d(np.arange(len(test_labels)), validation)

    return SplitManifest(
        spec=spec,
        train_size=len(train_labels),
        test_size=len(test_labels),
        labeled=labeled.tolist(),
        unlabeled=unlabeled.tolist(),
        validation=validation.tolist(),
        test=test.tolist(),
    )


def make_splits(train: Dataset, test: Dataset, spec: SplitSpec) -> Splits:
    """Stratified labeled set, unlabeled pool (labels stripped), stratified validation half, test rest."""
    manifest = make_split_indices(train.labels, test.labels, train.num_classes, spec)
    return apply_manifest(train, test, manifest)


def apply_manifest(train: Dataset, test: Dataset, manifest: SplitManifest) -> Splits:
    if manifest.train_size != len(train) or manifest.test_size != len(test):
        raise DatasetFormatError(
            train.path,
            None,
            f"manifest was built for {manifest.train_size}/{manifest.test_size} documents, got {len(train)}/{len(test)}",
        )
    splits = Splits(
        manifest=manifest,
        labeled=[train.documents[i] for i in manifest.labeled],
        unlabeled=[Document(text=train.documents[i].text, label=None) for i in manifest.unlabeled],
        validation=[test.documents[i] for i in manifest.validation],
        test=[test.documents[i] for i in manifest.test],
    )
    logger.info(
        f"Splits: {len(splits.labeled)} labeled, {len(splits.unlabeled)} unlabeled, "
        f"{len(splits.validation)} validation, {len(splits.test)} test"
    )
    return splits


def write_manifest(manifest: SplitManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_manifest(path: Path) -> SplitManifest:
    return SplitManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


# =============================================================================
# BATCHES
# =============================================================================

@dataclass
class DocumentBatch:
    token_ids: np.ndarray               # [b, T_max], 0 = padding
    lengths: np.ndarray                 # [b]
    labels: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def mask(self) -> np.ndarray:
        """Boolean [b, T_max]; True on real tokens."""
        return np.arange(self.token_ids.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class EncodedCorpus:
    ids: List[np.ndarray]
    labels: Optional[np.ndarray] = None
    empty_replaced: int = field(default=0)

    def __len__(self) -> int:
        return len(self.ids)


def encode_documents(
    documents: Sequence[Document], vocab: Vocabulary, t_cap: int = DEFAULT_T_CAP, with_labels: bool = True
) -> EncodedCorpus:
    """Tokenize, map to indices (unknown -> 1) and truncate at ``t_cap``.

    A document with no tokens becomes a single unknown token.
    """
    if t_cap < 1:
        raise ValueError(f"t_cap must be >= 1, got {t_cap}")
    ids = []
    empty = 0
    for doc in documents:
        encoded = vocab.encode(tokenize(doc.text))[:t_cap]
        if encoded.size == 0:
            encoded = np.array([UNK_INDEX], dtype=np.int64)
            empty += 1
        ids.append(encoded)
    if empty:
        logger.warning(f"{empty} empty documents replaced by the unknown token")
    labels = np.asarray([doc.label for doc in documents], dtype=np.int64) if with_labels else None
    return EncodedCorpus(ids=ids, labels=labels, empty_replaced=empty)


def pad_batch(ids: Sequence[np.ndarray], labels: Optional[np.ndarray] = None) -> DocumentBatch:
    lengths = np.asarray([len(x) for x in ids], dtype=np.int64)
    token_ids = np.full((len(ids), int(lengths.max())), PAD_INDEX, dtype=np.int64)
    for row, x in enumerate(ids):
        token_ids[row, : len(x)] = x
    return DocumentBatch(token_ids=token_ids, lengths=lengths, labels=labels)


def iter_batches(
    corpus: EncodedCorpus, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[DocumentBatch]:
    """Padded batches in shuffled order (``rng``) or file order (``rng=None``)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(corpus)) if rng is not None else np.arange(len(corpus))
    for start in range(0, len(order), batch_size):
        chosen = order[start : start + batch_size]
        labels = corpus.labels[chosen] if corpus.labels is not None else None
        yield pad_batch([corpus.ids[i] for i in chosen], labels)
