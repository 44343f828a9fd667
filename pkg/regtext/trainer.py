"""
Training and evaluation
=======================

Adam over every trainable tensor, the epoch loop pairing labeled batches
with a cycling unlabeled stream, early stopping on validation accuracy,
evaluation, and repeated-run statistics.

Each run derives all of its randomness (parameter init, unknown-word
vectors, batch order, dropout, perturbations) from its seed, so equal
seeds give equal results apart from ``wall_clock``.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from tqdm import tqdm

from regtext import gradcore as gc
from regtext.corpus import (
    DEFAULT_T_CAP,
    INIT_RANGE,
    PAD_INDEX,
    DocumentBatch,
    EmbeddingTable,
    EncodedCorpus,
    Splits,
    Vocabulary,
    build_vocab,
    encode_documents,
    iter_batches,
    load_pretrained,
    random_embeddings,
    tokenize,
)
from regtext.encoders import ModelSpec, ModelState, init_model, predict_proba
from regtext.errors import DivergenceError, MissingGradientError, RegTextError
from regtext.smoothing import RegimeConfig, regime_loss

logger = logging.getLogger(__name__)


class TrainerConfig(BaseModel):
    labeled_batch_size: int = Field(default=32, ge=1)
    unlabeled_batch_size: int = Field(default=128, ge=1)
    eval_batch_size: int = Field(default=256, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = Field(default=10, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    t_cap: int = Field(default=DEFAULT_T_CAP, ge=1)
    min_count: int = Field(default=1, ge=1)
    fine_tune_embeddings: bool = True
    show_progress: bool = False


# =============================================================================
# OPTIMIZER
# =============================================================================

class OptimizerState:
    """Adam moments per parameter name."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(state: ModelState, opt: OptimizerState) -> None:
    """One bias-corrected Adam update of every trainable tensor, then clear gradients."""
    trainable = state.trainable()
    for name, tensor in trainable:
        if tensor.grad is None:
            raise MissingGradientError(name)
    opt.step += 1
    correction1 = 1.0 - opt.beta1 ** opt.step
    correction2 = 1.0 - opt.beta2 ** opt.step
    for name, tensor in trainable:
        g = tensor.grad
        rows = state.frozen_rows.get(name)
        if rows:
            g = g.copy()
            g[rows] = 0.0
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(tensor.data)
            opt.v[name] = np.zeros_like(tensor.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(tensor.dtype)
    state.zero_grad()


# =============================================================================
# DATA PREPARATION
# =============================================================================

@dataclass
class PreparedData:
    vocab: Vocabulary
    embeddings: EmbeddingTable
    labeled: EncodedCorpus
    unlabeled: EncodedCorpus
    validation: EncodedCorpus
    test: EncodedCorpus
    num_classes: int


def prepare_data(
    splits: Splits,
    num_classes: int,
    hyper: TrainerConfig,
    embedding_dim: int,
    embedding_path: Optional[Path] = None,
    seed: int = 0,
) -> PreparedData:
    """Vocabulary from labeled + unlabeled text only, embedding table, encoded splits."""
    vocab = build_vocab(
        (tokenize(doc.text) for doc in list(splits.labeled) + list(splits.unlabeled)), min_count=hyper.min_count
    )
    if embedding_path is not None:
        table = load_pretrained(embedding_path, vocab, embedding_dim, seed, show_progress=hyper.show_progress)
    else:
        table = random_embeddings(vocab, embedding_dim, seed)
    logger.info(f"Vocabulary: {len(vocab)} tokens, pretrained coverage {table.coverage:.1%}")
    return PreparedData(
        vocab=vocab,
        embeddings=table,
        labeled=encode_documents(splits.labeled, vocab, hyper.t_cap),
        unlabeled=encode_documents(splits.unlabeled, vocab, hyper.t_cap, with_labels=False),
        validation=encode_documents(splits.validation, vocab, hyper.t_cap),
        test=encode_documents(splits.test, vocab, hyper.t_cap),
        num_classes=num_classes,
    )


def initial_embeddings(table: EmbeddingTable, rng: np.random.Generator) -> np.ndarray:
    """Pretrained rows as loaded; every other row redrawn from ``rng``; padding zero."""
    vectors = table.vectors.copy()
    fresh = ~table.pretrained
    vectors[fresh] = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(int(fresh.sum()), table.dim))
    vectors[PAD_INDEX] = 0.0
    return vectors


def cycle_batches(corpus: EncodedCorpus, batch_size: int, rng: np.random.Generator) -> Iterator[DocumentBatch]:
    """Endless batch stream, reshuffled on every pass."""
    while True:
        yield from iter_batches(corpus, batch_size, rng)


# =============================================================================
# RESULTS
# =============================================================================

class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_accuracy: float
    loss_terms: Dict[str, float] = Field(default_factory=dict)


class RunResult(BaseModel):
    regime: str
    encoder: str
    seed: int
    status: Literal["ok", "failed"] = "ok"
    diagnostic: Optional[str] = None
    curves: List[EpochRecord] = Field(default_factory=list)
    best_val_accuracy: Optional[float] = None
    test_accuracy_at_best: Optional[float] = None
    best_epoch: Optional[int] = None
    epochs_run: int = 0
    wall_clock: float = 0.0


class AggregateResult(BaseModel):
    regime: str
    encoder: str
    runs: int
    completed: int
    failed_seeds: List[int] = Field(default_factory=list)
    test_accuracies: List[float] = Field(default_factory=list)
    mean: Optional[float] = None
    std: Optional[float] = None
    spread: Optional[float] = Field(default=None, description="max - min")


def validation_tail_std(result: RunResult, window: int = 10) -> float:
    """Sample std of validation accuracy over the final ``window`` epochs."""
    tail = [record.val_accuracy for record in result.curves[-window:]]
    return float(np.std(tail, ddof=1)) if len(tail) >= 2 else 0.0


def aggregate(results: Sequence[RunResult]) -> AggregateResult:
    """Mean, sample std and max - min of test accuracy over the successful runs."""
    if not results:
        raise ValueError("aggregate needs at least one run")
    ok = [r for r in results if r.status == "ok" and r.test_accuracy_at_best is not None]
    accuracies = np.asarray([r.test_accuracy_at_best for r in ok], dtype=np.float64)
    summary = AggregateResult(
        regime=results[0].regime,
        encoder=results[0].encoder,
        runs=len(results),
        completed=len(ok),
        failed_seeds=[r.seed for r in results if r.status != "ok" or r.test_accuracy_at_best is None],
        test_accuracies=accuracies.tolist(),
    )
    if summary.failed_seeds:
        logger.warning(f"{len(summary.failed_seeds)} failed runs excluded (seeds {summary.failed_seeds})")
    if accuracies.size:
        summary.mean = float(accuracies.mean())
        summary.spread = float(accuracies.max() - accuracies.min())
    if accuracies.size >= 2:
        summary.std = float(accuracies.std(ddof=1))
    return summary


def write_result(result: BaseModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def curves_frame(result: RunResult) -> pd.DataFrame:
    rows = [
        {"epoch": r.epoch, "train_loss": r.train_loss, "val_accuracy": r.val_accuracy, **r.loss_terms} for r in result.curves
    ]
    return pd.DataFrame(rows) if rows else pd.DataFrame(columns=["epoch", "train_loss", "val_accuracy"])


def write_curves(result: RunResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curves_frame(result).to_csv(path, index=False)
    return path


# =============================================================================
# TRAINING
# =============================================================================

def evaluate(state: ModelState, batches: Iterable[DocumentBatch], normalize_embeddings: bool = False) -> float:
    """Fraction of documents whose most probable class (lowest index on ties) matches the label."""
    correct = 0
    total = 0
    for batch in batches:
        predicted = np.argmax(predict_proba(state, batch, normalize_embeddings), axis=1)
        correct += int((predicted == batch.labels).sum())
        total += batch.size
    return correct / total if total else 0.0


def fit(
    model_spec: ModelSpec, regime_cfg: RegimeConfig, data: PreparedData, hyper: TrainerConfig, seed: int
) -> Tuple[RunResult, Optional[ModelState]]:
    """Train one model; returns the run record and the best-validation model."""
    started = time.perf_counter()
    init_seq, order_seq, unlabeled_seq, noise_seq = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(init_seq)
    order_rng = np.random.default_rng(order_seq)
    noise_rng = np.random.default_rng(noise_seq)

    result = RunResult(regime=regime_cfg.regime.value, encoder=model_spec.encoder_kind.value, seed=seed)
    state = init_model(
        model_spec,
        initial_embeddings(data.embeddings, init_rng),
        init_rng,
        fine_tune_embeddings=hyper.fine_tune_embeddings,
        frequencies=data.vocab.frequencies(),
    )
    opt = OptimizerState(hyper.learning_rate)
    unlabeled = None
    if regime_cfg.regime.uses_unlabeled:
        if len(data.unlabeled):
            unlabeled = cycle_batches(data.unlabeled, hyper.unlabeled_batch_size, np.random.default_rng(unlabeled_seq))
        else:
            logger.warning(f"{regime_cfg.regime.value} run has no unlabeled documents")

    normalize = regime_cfg.normalize_embeddings
    best_snapshot = None
    stale = 0
    try:
        for epoch in range(1, hyper.max_epochs + 1):
            losses: List[float] = []
            term_sums: Dict[str, float] = {}
            epoch_cfg = regime_cfg.at_epoch(epoch)
            batches = iter_batches(data.labeled, hyper.labeled_batch_size, order_rng)
            for batch_l in tqdm(batches, desc=f"Epoch {epoch}", leave=False, disable=not hyper.show_progress):
                batch_ul = next(unlabeled) if unlabeled is not None else None
                terms: Dict[str, float] = {}
                loss = regime_loss(batch_l, batch_ul, state, epoch_cfg, noise_rng, terms)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}")
                gc.backward(loss)
                adam_step(state, opt)
                losses.append(value)
                for key, term in terms.items():
                    term_sums[key] = term_sums.get(key, 0.0) + term

            val_accuracy = evaluate(
                state, iter_batches(data.validation, hyper.eval_batch_size), normalize_embeddings=normalize
            )
            result.curves.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)),
                    val_accuracy=val_accuracy,
                    loss_terms={k: v / len(losses) for k, v in sorted(term_sums.items())},
                )
            )
            result.epochs_run = epoch
            logger.info(f"[{result.encoder}/{result.regime} seed={seed}] epoch {epoch}: loss={np.mean(losses):.4f} val={val_accuracy:.4f}")

            if result.best_val_accuracy is None or val_accuracy > result.best_val_accuracy:
                result.best_val_accuracy = val_accuracy
                result.best_epoch = epoch
                best_snapshot = state.snapshot()
                stale = 0
            else:
                stale += 1
                if stale > hyper.patience:
                    logger.info(f"Early stop after epoch {epoch} (best epoch {result.best_epoch})")
                    break
    except DivergenceError as e:
        logger.error(f"Run seed={seed} diverged: {e}")
        result.status = "failed"
        result.diagnostic = str(e)
        result.wall_clock = time.perf_counter() - started
        return result, None

    state.restore(best_snapshot)
    result.test_accuracy_at_best = evaluate(state, iter_batches(data.test, hyper.eval_batch_size), normalize)
    result.wall_clock = time.perf_counter() - started
    return result, state


def train(model_spec: ModelSpec, regime_cfg: RegimeConfig, data: PreparedData, hyper: TrainerConfig, seed: int) -> RunResult:
    return fit(model_spec, regime_cfg, data, hyper, seed)[0]


# =============================================================================
# MANY RUNS
# =============================================================================

@dataclass
class RunJob:
    model: ModelSpec
    regime: RegimeConfig
    data: PreparedData
    hyper: TrainerConfig
    seed: int


def _run_job(job: RunJob) -> RunResult:
    try:
        return train(job.model, job.regime, job.data, job.hyper, job.seed)
    except RegTextError as e:
        logger.error(f"Run seed={job.seed} failed: {e}")
        return RunResult(
            regime=job.regime.regime.value, encoder=job.model.encoder_kind.value, seed=job.seed, status="failed", diagnostic=str(e)
        )


def run_jobs(jobs: Sequence[RunJob], workers: int = 1, show_progress: bool = False) -> List[RunResult]:
    """Run every job; results come back in submission order whatever ``workers`` is."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in tqdm(jobs, desc="Runs", disable=not show_progress)]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(tqdm(executor.map(_run_job, jobs), total=len(jobs), desc="Runs", disable=not show_progress))


def repeat_runs(
    model_spec: ModelSpec,
    regime_cfg: RegimeConfig,
    data: PreparedData,
    hyper: TrainerConfig,
    n: int,
    base_seed: int = 0,
    workers: int = 1,
) -> Tuple[AggregateResult, List[RunResult]]:
    """Train with seeds ``base_seed .. base_seed + n - 1`` and aggregate test accuracy."""
    if n < 2:
        raise ValueError(f"repeat_runs needs n >= 2, got {n}")
    jobs = [RunJob(model_spec, regime_cfg, data, hyper, base_seed + i) for i in range(n)]
    results = run_jobs(jobs, workers, hyper.show_progress)
    return aggregate(results), results
