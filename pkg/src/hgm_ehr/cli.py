"""Command-line entry point: synth, train, eval and end-to-end run.

Runs are driven by an INI-style config file (flat key = value lines under
[data]/[experiment]/[hgm]/[cnn]/[output] sections, # comments allowed).
One master seed derives every sub-seed, so identical config + seed give
byte-identical outputs. Log verbosity comes from the HGM_EHR_LOG env var.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evaluate
from .checkpoint import write_json_atomic
from .cnn import CnnTrainConfig, load_cnn, save_cnn
from .evaluate import ARM_MODES, ExperimentConfig, FoldModels, kfold_split
from .hgm import HgmTrainConfig, load_params, save_params
from .ingest import (DEFAULT_WINDOWS, GenConfig, Vocabulary, fit_normalizer, generate_synthetic,
                     parse_records, synthetic_vocabulary, write_corpus)
from .sampler import SamplerConfig
from .seeds import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    source: str
    gen: GenConfig | None
    events_file: Path | None
    diagnoses_file: Path | None
    outcomes_file: Path | None
    vocabulary_file: Path | None
    windows: tuple
    arms: tuple
    k_folds: int
    seed: int
    out_dir: Path
    hgm: HgmTrainConfig
    cnn: CnnTrainConfig

    def validate(self) -> None:
        if self.source not in ("synthetic", "files"):
            raise ValueError(f"data source must be 'synthetic' or 'files', got {self.source!r}")
        if not self.windows:
            raise ValueError("at least one window is required")
        for w in self.windows:
            if w not in DEFAULT_WINDOWS:
                raise ValueError(f"window {w} not in supported set {DEFAULT_WINDOWS}")
        if not self.arms:
            raise ValueError("at least one arm is required")
        for arm in self.arms:
            if arm not in ARM_MODES:
                raise ValueError(f"unknown arm {arm!r}; expected one of {sorted(ARM_MODES)}")
        if self.k_folds < 2:
            raise ValueError("folds must be >= 2")
        if self.source == "files":
            for name in ("events_file", "diagnoses_file", "outcomes_file"):
                if getattr(self, name) is None:
                    raise ValueError(f"files source requires [data] {name.removesuffix('_file')}")
        else:
            self.gen.validate()
        self.hgm.validate()
        self.cnn.validate()


_SECTION_KEYS = {
    "data": {"source", "events", "diagnoses", "outcomes", "vocabulary", "n_patients",
             "n_labs", "n_diagnoses", "prevalence", "signal"},
    "experiment": {"windows", "arms", "folds", "seed"},
    "hgm": {"d", "epochs", "learning_rate", "min_learning_rate", "activation",
            "context_diagnoses", "context_labs", "context_copatients", "negatives"},
    "cnn": {"filters", "kernel", "epochs", "batch_size", "learning_rate", "class_weighting"},
    "output": {"dir"},
}


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path)

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ValueError(f"{path}: unknown config section [{section}]")
        unknown = set(parser[section]) - _SECTION_KEYS[section]
        if unknown:
            raise ValueError(f"{path}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback)

    windows = tuple(int(w) for w in get("experiment", "windows", "12").split(","))
    arms = tuple(a.strip() for a in get("experiment", "arms", "HGM,CNN,HGM_CNN").split(","))
    seed = int(get("experiment", "seed", "0"))

    source = get("data", "source", "synthetic").strip()
    gen = None
    if source == "synthetic":
        gen = GenConfig(
            n_patients=int(get("data", "n_patients", "200")),
            n_labs=int(get("data", "n_labs", "30")),
            n_diagnoses=int(get("data", "n_diagnoses", "50")),
            window_hours=max(windows),
            signal=float(get("data", "signal", "1.0")),
            prevalence=float(get("data", "prevalence", "0.3")),
        )

    def path_or_none(key):
        value = get("data", key)
        return Path(value) if value else None

    sampler = SamplerConfig(
        n_diagnoses=int(get("hgm", "context_diagnoses", "10")),
        n_labs=int(get("hgm", "context_labs", "10")),
        n_copatients=int(get("hgm", "context_copatients", "10")),
        negatives_per_positive=int(get("hgm", "negatives", "5")),
    )
    hgm_cfg = HgmTrainConfig(
        epochs=int(get("hgm", "epochs", "5")),
        learning_rate=float(get("hgm", "learning_rate", "0.025")),
        min_learning_rate=float(get("hgm", "min_learning_rate", "1e-4")),
        d=int(get("hgm", "d", "128")),
        activation=get("hgm", "activation", "tanh"),
        sampler=sampler,
    )
    cnn_cfg = CnnTrainConfig(
        n_filters=int(get("cnn", "filters", "32")),
        kernel=int(get("cnn", "kernel", "3")),
        learning_rate=float(get("cnn", "learning_rate", "0.01")),
        batch_size=int(get("cnn", "batch_size", "32")),
        epochs=int(get("cnn", "epochs", "10")),
        class_weighting=parser.getboolean("cnn", "class_weighting", fallback=True),
    )

    config = RunConfig(
        source=source,
        gen=gen,
        events_file=path_or_none("events"),
        diagnoses_file=path_or_none("diagnoses"),
        outcomes_file=path_or_none("outcomes"),
        vocabulary_file=path_or_none("vocabulary"),
        windows=windows,
        arms=arms,
        k_folds=int(get("experiment", "folds", "10")),
        seed=seed,
        out_dir=Path(get("output", "dir", "runs/out")),
        hgm=hgm_cfg,
        cnn=cnn_cfg,
    )
    config.validate()
    return config


def _load_corpus(config: RunConfig):
    if config.source == "synthetic":
        records = generate_synthetic(config.gen, derive_seed(config.seed, "synth"))
        vocab = synthetic_vocabulary(config.gen)
    else:
        vocab = Vocabulary.load(config.vocabulary_file) if config.vocabulary_file else None
        records, vocab = parse_records(
            config.events_file, config.diagnoses_file, config.outcomes_file, vocab
        )
    return records, vocab


def _experiment_config(config: RunConfig) -> ExperimentConfig:
    return ExperimentConfig(k_folds=config.k_folds, seed=config.seed,
                            hgm=config.hgm, cnn=config.cnn)


def _write_outcome(out_dir: Path, outcome) -> None:
    report = outcome.report
    stem = f"{report.arm}_{report.window_hours}h"
    write_json_atomic(out_dir / f"report_{stem}.json", report.to_dict())
    roc = evaluate.roc_points(outcome.scores, outcome.labels)
    pr = evaluate.pr_points(outcome.scores, outcome.labels)
    _write_curve(out_dir / f"roc_{stem}.csv", ("threshold", "fpr", "tpr"), roc)
    _write_curve(out_dir / f"pr_{stem}.csv", ("threshold", "recall", "precision"), pr)


def _write_curve(path: Path, header, points) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for point in points:
            writer.writerow([repr(v) for v in point])
    os.replace(tmp, path)


def _checkpoint_dir(config: RunConfig) -> Path:
    return config.out_dir / "checkpoints"


def _hgm_path(config: RunConfig, window: int, fold: int) -> Path:
    return _checkpoint_dir(config) / f"hgm_w{window}_f{fold}.json"


def _cnn_path(config: RunConfig, arm: str, window: int, fold: int) -> Path:
    return _checkpoint_dir(config) / f"cnn_{arm}_w{window}_f{fold}.json"


def cmd_synth(config: RunConfig) -> int:
    if config.source != "synthetic":
        raise ValueError("synth requires [data] source = synthetic")
    records = generate_synthetic(config.gen, derive_seed(config.seed, "synth"))
    vocab = synthetic_vocabulary(config.gen)
    paths = write_corpus(records, vocab, config.out_dir)
    logger.info("wrote %d patients to %s", len(records), config.out_dir)
    print(f"synth: {len(records)} patients -> {paths['events']}")
    return 0


def _folds_for(config: RunConfig, ids, window: int):
    return kfold_split(ids, config.k_folds, derive_seed(config.seed, "kfold", window=window))


def cmd_train(config: RunConfig) -> int:
    records, vocab = _load_corpus(config)
    records_by_id = {r.patient_id: r for r in records}
    ids = [r.patient_id for r in records]
    exp = _experiment_config(config)
    needs_hgm = any(arm != "CNN" for arm in config.arms)
    for window in config.windows:
        for fold_index, test_ids in enumerate(_folds_for(config, ids, window)):
            test_set = set(test_ids)
            train = [records_by_id[i] for i in ids if i not in test_set]
            models = evaluate.train_fold(train, config.arms, window, vocab, exp, fold_index)
            if needs_hgm:
                save_params(models.hgm_params, _hgm_path(config, window, fold_index))
            for arm in config.arms:
                save_cnn(models.cnn_params[arm], _cnn_path(config, arm, window, fold_index))
            logger.info("trained window=%d fold=%d", window, fold_index)
    print(f"train: checkpoints in {_checkpoint_dir(config)}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    records, vocab = _load_corpus(config)
    records_by_id = {r.patient_id: r for r in records}
    ids = [r.patient_id for r in records]
    needs_hgm = any(arm != "CNN" for arm in config.arms)
    for window in config.windows:
        fold_results = {arm: [] for arm in config.arms}
        for fold_index, test_ids in enumerate(_folds_for(config, ids, window)):
            test = [records_by_id[i] for i in test_ids]
            labels = np.array([int(r.died) for r in test])
            if labels.min() == labels.max():
                logger.warning("fold %d has a single-class test set; skipping", fold_index)
                continue
            test_set = set(test_ids)
            train = [records_by_id[i] for i in ids if i not in test_set]
            normalizer = fit_normalizer(train, window, vocab.n_labs)
            hgm_params = load_params(_hgm_path(config, window, fold_index)) if needs_hgm else None
            cnn_params = {
                arm: load_cnn(_cnn_path(config, arm, window, fold_index)) for arm in config.arms
            }
            models = FoldModels(fold_index, window, normalizer, hgm_params, cnn_params)
            scores = evaluate.score_fold(models, test, config.arms, vocab)
            for arm in config.arms:
                fold_results[arm].append((fold_index, scores[arm], labels))
        for arm in config.arms:
            outcome = evaluate.assemble_outcome(arm, window, fold_results[arm])
            _write_outcome(config.out_dir, outcome)
    print(f"eval: reports in {config.out_dir}")
    return 0


def cmd_run(config: RunConfig, jobs: int = 1) -> int:
    records, vocab = _load_corpus(config)
    exp = _experiment_config(config)
    for window in config.windows:
        outcomes = evaluate.run_experiments(records, vocab, config.arms, window, exp, jobs=jobs)
        for arm in config.arms:
            _write_outcome(config.out_dir, outcomes[arm])
            report = outcomes[arm].report
            print(f"run: {arm} {window}h AUROC {report.mean_auroc:.3f}"
                  f" +/- {report.std_auroc:.3f} AUPRC {report.mean_auprc:.3f}"
                  f" +/- {report.std_auprc:.3f}")
    return 0


def _setup_logging() -> None:
    level_name = os.environ.get("HGM_EHR_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgm-ehr",
        description="Graph-embedding + CNN mortality prediction experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "write a synthetic corpus as CSV files"),
        ("train", "train per-fold checkpoints"),
        ("eval", "evaluate existing checkpoints"),
        ("run", "end-to-end train + evaluate in memory"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the run config file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.out is not None:
            config = replace(config, out_dir=Path(args.out))
        config.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config)
        return cmd_run(config, jobs=args.jobs)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"hgm-ehr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
