"""
Experiment CLI
==============

Runs configured experiments and writes their artifacts.

Usage:
    # Dump the default configuration
    python -m regtext run --print-defaults > configs/my_run.json

    # One run (or `repeats` runs) of the configured experiment
    python -m regtext run --config configs/synthetic.json --out runs/synthetic

    # Grid over encoders x regimes x unlabeled multipliers
    python -m regtext grid --config configs/ag_news.json --grid configs/grid_full.json --jobs 4

    # Timestep-contribution counts of a BiLSTM-MAX checkpoint
    python -m regtext histogram --config configs/synthetic.json --checkpoint runs/synthetic/checkpoint.json

    # Write the split manifest only
    python -m regtext splits --config configs/ag_news.json
"""

import argparse
import itertools
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from regtext.corpus import (
    KNOWN_CLASS_COUNTS,
    Dataset,
    SplitManifest,
    SplitSpec,
    encode_documents,
    load_dataset,
    make_splits,
    pad_batch,
    write_manifest,
)
from regtext.encoders import EncoderKind, ModelSpec, load_checkpoint, save_checkpoint, timestep_histogram
from regtext.errors import ConfigError, EncoderKindError, RegTextError
from regtext.settings import RegTextSettings, configure_logging, load_environment, resolve_data_path
from regtext.smoothing import Regime, RegimeConfig
from regtext.synthetic import SyntheticCorpusConfig, generate_corpus
from regtext.trainer import (
    PreparedData,
    RunJob,
    RunResult,
    TrainerConfig,
    fit,
    prepare_data,
    repeat_runs,
    run_jobs,
    validation_tail_std,
    write_curves,
    write_result,
)

logger = logging.getLogger(__name__)

FAILED_CELL = "FAILED"
SUPERVISED_ONLY = (Regime.SUP, Regime.AT)
REGIME_ORDER = (Regime.SUP, Regime.AT, Regime.PI, Regime.VAT, Regime.AT_VAT)


# =============================================================================
# CONFIGURATION
# =============================================================================

class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "synthetic"
    train_csv: Optional[Path] = None
    test_csv: Optional[Path] = None
    expected_classes: Optional[int] = Field(default=None, ge=2)
    synthetic: Optional[SyntheticCorpusConfig] = None

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetConfig":
        if self.name == "synthetic" and self.synthetic is None and self.train_csv is None:
            self.synthetic = SyntheticCorpusConfig()
        if self.synthetic is None and (self.train_csv is None or self.test_csv is None):
            raise ValueError("train_csv and test_csv are required unless a synthetic corpus is configured")
        known = KNOWN_CLASS_COUNTS.get(self.name)
        if known is not None:
            if self.expected_classes is not None and self.expected_classes != known:
                raise ValueError(f"{self.name} has {known} classes, not {self.expected_classes}")
            self.expected_classes = known
        if self.synthetic is not None:
            if self.expected_classes is not None and self.expected_classes != self.synthetic.num_classes:
                raise ValueError("expected_classes disagrees with synthetic.num_classes")
            self.expected_classes = self.synthetic.num_classes
        return self


class EmbeddingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[Path] = None
    dim: int = Field(default=300, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    regime: RegimeConfig = Field(default_factory=RegimeConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    output_dir: Path = Path("runs/default")
    repeats: int = Field(default=1, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.model.embedding_dim != self.embedding.dim:
            raise ValueError(f"model.embedding_dim {self.model.embedding_dim} != embedding.dim {self.embedding.dim}")
        expected = self.dataset.expected_classes
        if expected is not None and self.model.num_classes != expected:
            if "num_classes" in self.model.model_fields_set:
                raise ValueError(f"model.num_classes {self.model.num_classes} != dataset classes {expected}")
            self.model.num_classes = expected
        return self


class GridSpec(BaseModel):
    """Grid dimensions; any left out take the single value from the base config."""

    model_config = ConfigDict(extra="forbid")

    encoders: Optional[List[EncoderKind]] = None
    regimes: Optional[List[Regime]] = None
    multipliers: Optional[List[int]] = None
    dropout: Optional[List[float]] = None
    lr: Optional[List[float]] = None


def _problems(error: ValidationError) -> List[Tuple[str, str]]:
    return [(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in error.errors()]


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(path, [("<root>", f"invalid JSON: {e}")]) from e
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(path, _problems(e)) from e


def parse_grid(value: str) -> GridSpec:
    """``--grid`` accepts a JSON file path or inline JSON."""
    inline = value.lstrip().startswith("{")
    source = None if inline else Path(value)
    try:
        raw = json.loads(value if inline else source.read_text(encoding="utf-8"))
        return GridSpec.model_validate(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(source, [("grid", f"invalid JSON: {e}")]) from e
    except ValidationError as e:
        raise ConfigError(source, [(f"grid.{loc}", msg) for loc, msg in _problems(e)]) from e


def apply_overrides(config: ExperimentConfig, out: Optional[Path], seed: Optional[int]) -> ExperimentConfig:
    updates = {}
    if out is not None:
        updates["output_dir"] = Path(out)
    if seed is not None:
        updates["seed"] = seed
    return config.model_copy(update=updates)


# =============================================================================
# DATA
# =============================================================================

def load_datasets(config: ExperimentConfig, settings: RegTextSettings) -> Tuple[Dataset, Dataset]:
    ds = config.dataset
    if ds.synthetic is not None:
        train_docs, test_docs = generate_corpus(ds.synthetic)
        k = ds.synthetic.num_classes
        return Dataset(Path("<synthetic-train>"), train_docs, k), Dataset(Path("<synthetic-test>"), test_docs, k)
    train_path = resolve_data_path(ds.train_csv, settings)
    test_path = resolve_data_path(ds.test_csv, settings)
    for path in (train_path, test_path):
        if not path.exists():
            raise FileNotFoundError(2, "No such file", str(path))
    return load_dataset(train_path, ds.expected_classes), load_dataset(test_path, ds.expected_classes)


def _embedding_path(config: ExperimentConfig, settings: RegTextSettings) -> Optional[Path]:
    if config.embedding.path is None:
        return None
    path = resolve_data_path(config.embedding.path, settings)
    if not path.exists():
        raise FileNotFoundError(2, "No such file", str(path))
    return path


def prepare_experiment(
    config: ExperimentConfig, settings: RegTextSettings, train: Dataset, test: Dataset, split: Optional[SplitSpec] = None
) -> Tuple[SplitManifest, PreparedData]:
    splits = make_splits(train, test, split or config.split)
    data = prepare_data(
        splits,
        config.model.num_classes,
        config.trainer,
        config.embedding.dim,
        _embedding_path(config, settings),
        seed=config.split.seed,
    )
    return splits.manifest, data


def _percent(value: Optional[float]) -> str:
    return f"{100.0 * value:.2f}" if value is not None else "n/a"


def _summary_line(result: RunResult) -> str:
    if result.status != "ok":
        return f"❌ {result.encoder}/{result.regime} seed={result.seed}: failed ({result.diagnostic})"
    return (
        f"✅ {result.encoder}/{result.regime} seed={result.seed}: "
        f"val={_percent(result.best_val_accuracy)} test={_percent(result.test_accuracy_at_best)} "
        f"best_epoch={result.best_epoch}/{result.epochs_run} tail_std={validation_tail_std(result):.4f} "
        f"({result.wall_clock:.1f}s)"
    )


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_run(config_path: Path, settings: RegTextSettings, out: Optional[Path] = None, seed: Optional[int] = None, jobs: int = 1) -> int:
    config = apply_overrides(load_config(config_path), out, seed)
    output_dir = config.output_dir
    print(f"🚀 {config.model.encoder_kind.value} / {config.regime.regime.value} on {config.dataset.name}")

    train_set, test_set = load_datasets(config, settings)
    manifest, data = prepare_experiment(config, settings, train_set, test_set)
    write_manifest(manifest, output_dir / "manifest.json")

    if config.repeats == 1:
        result, state = fit(config.model, config.regime, data, config.trainer, config.seed)
        write_result(result, output_dir / "result.json")
        write_curves(result, output_dir / "curves.csv")
        if state is not None:
            save_checkpoint(state, data.vocab, output_dir / "checkpoint.json")
        print(_summary_line(result))
        return 0 if result.status == "ok" else 1

    summary, results = repeat_runs(config.model, config.regime, data, config.trainer, config.repeats, config.seed, jobs)
    for result in results:
        run_dir = output_dir / f"seed_{result.seed}"
        write_result(result, run_dir / "result.json")
        write_curves(result, run_dir / "curves.csv")
        print(_summary_line(result))
    write_result(summary, output_dir / "aggregate.json")
    std = f"{100.0 * summary.std:.2f}" if summary.std is not None else "n/a"
    print(
        f"📊 {summary.completed}/{summary.runs} runs: mean={_percent(summary.mean)} std={std} "
        f"max-min={_percent(summary.spread)}"
    )
    return 0 if summary.completed else 1


def _cell_column(regime: Regime, multiplier: Optional[int]) -> str:
    return regime.value if multiplier is None else f"{regime.value}/{multiplier}"


def grid_cells(config: ExperimentConfig, grid: GridSpec) -> List[Tuple[EncoderKind, Regime, Optional[int]]]:
    """Table cells; supervised-only regimes ignore the unlabeled multiplier."""
    encoders = grid.encoders or [config.model.encoder_kind]
    regimes = grid.regimes or [config.regime.regime]
    multipliers = grid.multipliers or [config.split.unlabeled_multiplier]
    cells = []
    for encoder in encoders:
        for regime in sorted(set(regimes), key=REGIME_ORDER.index):
            for multiplier in [None] if regime in SUPERVISED_ONLY else multipliers:
                cells.append((encoder, regime, multiplier))
    return cells


def select_best(results: Sequence[RunResult]) -> Optional[RunResult]:
    """Highest validation accuracy among successful runs; the first one wins ties."""
    best = None
    for result in results:
        if result.status != "ok" or result.best_val_accuracy is None:
            continue
        if best is None or result.best_val_accuracy > best.best_val_accuracy:
            best = result
    return best


def grid_table(cells: Sequence[Tuple[EncoderKind, Regime, Optional[int]]], chosen: Dict[tuple, Optional[RunResult]]) -> pd.DataFrame:
    rows: Dict[str, Dict[str, str]] = {}
    columns: List[str] = []
    for encoder, regime, multiplier in cells:
        column = _cell_column(regime, multiplier)
        if column not in columns:
            columns.append(column)
        result = chosen[(encoder, regime, multiplier)]
        rows.setdefault(encoder.value, {})[column] = _percent(result.test_accuracy_at_best) if result else FAILED_CELL
    frame = pd.DataFrame.from_dict(rows, orient="index").reindex(columns=columns).fillna("")
    frame.index.name = "encoder"
    return frame


def write_table(frame: pd.DataFrame, output_dir: Path) -> Tuple[Path, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / "grid.csv"
    text_path = output_dir / "grid.txt"
    frame.to_csv(csv_path)
    text_path.write_text(frame.to_string() + "\n", encoding="utf-8")
    return csv_path, text_path


def read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, index_col="encoder", dtype=str, keep_default_na=False)


def spec_for(base: ModelSpec, encoder: EncoderKind, dropout: float) -> ModelSpec:
    """``base`` re-targeted to another encoder; fields the new encoder lacks are dropped."""
    fields = base.model_dump()
    fields.update(encoder_kind=encoder, dropout_rate=dropout)
    if encoder != base.encoder_kind:
        fields.update(hidden_state=None, num_kernel=None, context_size=None, stride=None)
    return ModelSpec.model_validate(fields)


def cmd_grid(
    config_path: Path, grid: GridSpec, settings: RegTextSettings, out: Optional[Path] = None, seed: Optional[int] = None, jobs: int = 1
) -> int:
    config = apply_overrides(load_config(config_path), out, seed)
    cells = grid_cells(config, grid)
    dropouts = grid.dropout or [config.model.dropout_rate]
    rates = grid.lr or [config.trainer.learning_rate]
    print(f"🚀 Grid: {len(cells)} cells x {len(dropouts) * len(rates)} configurations on {config.dataset.name}")

    train_set, test_set = load_datasets(config, settings)
    prepared: Dict[int, Optional[PreparedData]] = {}

    def data_for(multiplier: Optional[int]) -> Optional[PreparedData]:
        """Prepared data for one multiplier, or None when that split cannot be drawn."""
        m = config.split.unlabeled_multiplier if multiplier is None else multiplier
        if m not in prepared:
            split = config.split.model_copy(update={"unlabeled_multiplier": m})
            try:
                manifest, prepared[m] = prepare_experiment(config, settings, train_set, test_set, split)
            except RegTextError as e:
                logger.error(f"Unlabeled multiplier {m} unavailable: {e}")
                print(f"❌ x{m}: {e}")
                prepared[m] = None
            else:
                write_manifest(manifest, config.output_dir / "manifests" / f"unlabeled_x{m}.json")
        return prepared[m]

    jobs_list: List[RunJob] = []
    owners: List[tuple] = []
    for cell in cells:
        encoder, regime, multiplier = cell
        data = data_for(multiplier)
        if data is None:
            continue
        for dropout, lr in itertools.product(dropouts, rates):
            model = spec_for(config.model, encoder, dropout)
            jobs_list.append(
                RunJob(
                    model=model,
                    regime=config.regime.model_copy(update={"regime": regime}),
                    data=data,
                    hyper=config.trainer.model_copy(update={"learning_rate": lr}),
                    seed=config.seed,
                )
            )
            owners.append(cell)

    results = run_jobs(jobs_list, jobs, show_progress=True) if jobs_list else []
    chosen = {cell: select_best([r for r, owner in zip(results, owners) if owner == cell]) for cell in cells}
    for (encoder, regime, multiplier), result in chosen.items():
        if result is None:
            print(f"❌ {encoder.value}/{_cell_column(regime, multiplier)}: every configuration failed")

    cells_dir = config.output_dir / "cells"
    for index, (result, (encoder, regime, multiplier)) in enumerate(zip(results, owners)):
        write_result(result, cells_dir / f"{index:03d}_{encoder.value}_{_cell_column(regime, multiplier).replace('/', '_x')}.json")

    frame = grid_table(cells, chosen)
    csv_path, _ = write_table(frame, config.output_dir)
    print(frame.to_string())
    print(f"📊 Table written to {csv_path}")
    return 0 if any(chosen.values()) else 1


def cmd_histogram(
    config_path: Path, checkpoint: Path, settings: RegTextSettings, out: Optional[Path] = None, batch_size: int = 128
) -> int:
    config = apply_overrides(load_config(config_path), out, None)
    state, vocab = load_checkpoint(checkpoint)
    if state.spec.encoder_kind != EncoderKind.BILSTM_MAX:
        raise EncoderKindError("histogram", EncoderKind.BILSTM_MAX.value, state.spec.encoder_kind.value)
    _, test_set = load_datasets(config, settings)
    documents = test_set.documents[:batch_size]
    encoded = encode_documents(documents, vocab, config.trainer.t_cap)
    batch = pad_batch(encoded.ids, encoded.labels)
    counts = timestep_histogram(batch, state, config.regime.normalize_embeddings)

    frame = pd.DataFrame(counts, columns=[f"t_{t}" for t in range(counts.shape[1])])
    path = config.output_dir / "histogram.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    print(f"📊 Timestep histogram of {len(documents)} documents ({counts.shape[1]} steps) written to {path}")
    return 0


def cmd_splits(config_path: Path, settings: RegTextSettings, out: Optional[Path] = None) -> int:
    config = apply_overrides(load_config(config_path), out, None)
    train_set, test_set = load_datasets(config, settings)
    manifest = make_splits(train_set, test_set, config.split).manifest
    path = write_manifest(manifest, config.output_dir / "manifest.json")
    overlap = set(manifest.labeled) & set(manifest.unlabeled)
    print(
        f"📊 labeled={len(manifest.labeled)} unlabeled={len(manifest.unlabeled)} "
        f"validation={len(manifest.validation)} test={len(manifest.test)}"
    )
    print(f"{'✅' if not overlap else '❌'} labeled ∩ unlabeled = {len(overlap)} documents")
    print(f"📄 Manifest written to {path}")
    return 0 if not overlap else 1


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regtext", description="Semi-supervised text classification experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
        sub.add_argument("--config", type=Path, required=config_required, help="Experiment JSON config")
        sub.add_argument("--out", type=Path, help="Output directory (overrides output_dir)")
        sub.add_argument("--seed", type=int, help="Run seed (overrides seed)")
        sub.add_argument("--jobs", type=int, help="Worker processes (default REGTEXT_JOBS)")

    run = commands.add_parser("run", help="Train the configured experiment")
    common(run, config_required=False)
    run.add_argument("--print-defaults", action="store_true", help="Print the default config and exit")

    grid = commands.add_parser("grid", help="Run an encoder x regime x multiplier grid")
    common(grid)
    grid.add_argument("--grid", required=True, help="Grid JSON file or inline JSON")

    histogram = commands.add_parser("histogram", help="Timestep histogram of a BiLSTM-MAX checkpoint")
    common(histogram)
    histogram.add_argument("--checkpoint", type=Path, required=True)
    histogram.add_argument("--batch-size", type=int, default=128)

    splits = commands.add_parser("splits", help="Write the split manifest without training")
    common(splits)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = load_environment()
    configure_logging(settings)
    jobs = args.jobs or settings.jobs

    try:
        if args.command == "run":
            if args.print_defaults:
                print(ExperimentConfig().model_dump_json(indent=2))
                return 0
            if args.config is None:
                parser.error("run needs --config (or --print-defaults)")
            return cmd_run(args.config, settings, args.out, args.seed, jobs)
        if args.command == "grid":
            return cmd_grid(args.config, parse_grid(args.grid), settings, args.out, args.seed, jobs)
        if args.command == "histogram":
            return cmd_histogram(args.config, args.checkpoint, settings, args.out, args.batch_size)
        return cmd_splits(args.config, settings, args.out)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"❌ Missing file: {e.filename}", file=sys.stderr)
        return 2
    except RegTextError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except Exception as e:
        traceback.print_exc()
        print(f"\n💥 Failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
