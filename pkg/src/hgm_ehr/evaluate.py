"""Cross-validated evaluation: AUROC/AUPRC per arm and window.

Folds partition patients, never samples, and everything fitted (lab
normalization, graph embeddings, classifier) sees training patients only.
Per-fold seeds derive from the experiment seed so serial and parallel
execution produce identical reports.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cnn import CnnTrainConfig, FeatureMode, build_features, predict, train_cnn
from .graph import build_graph
from .hgm import HgmParams, HgmTrainConfig, train_hgm
from .ingest import Vocabulary, fit_normalizer, normalize_records
from .seeds import derive_seed

logger = logging.getLogger(__name__)

ARMS = ("HGM", "CNN", "HGM_CNN")

ARM_MODES = {
    "HGM": FeatureMode.EMBED_ONLY,
    "CNN": FeatureMode.RAW_LABS,
    "HGM_CNN": FeatureMode.EMBED_PLUS_LABS,
}


@dataclass(frozen=True)
class FoldReport:
    fold_index: int
    auroc: float
    auprc: float
    n_test: int
    n_pos: int


@dataclass
class ExperimentReport:
    arm: str
    window_hours: int
    folds: list[FoldReport]
    mean_auroc: float
    std_auroc: float
    mean_auprc: float
    std_auprc: float

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "window": self.window_hours,
            "folds": [
                {"fold": f.fold_index, "auroc": f.auroc, "auprc": f.auprc,
                 "n_test": f.n_test, "n_pos": f.n_pos}
                for f in self.folds
            ],
            "mean_auroc": self.mean_auroc,
            "std_auroc": self.std_auroc,
            "mean_auprc": self.mean_auprc,
            "std_auprc": self.std_auprc,
        }


@dataclass
class ArmOutcome:
    """Report plus pooled test scores (fold order) for curve export."""

    report: ExperimentReport
    scores: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class ExperimentConfig:
    k_folds: int = 10
    seed: int = 0
    hgm: HgmTrainConfig = field(default_factory=HgmTrainConfig)
    cnn: CnnTrainConfig = field(default_factory=CnnTrainConfig)


def kfold_split(patient_ids, k: int, seed: int) -> list[list[str]]:
    """Seeded patient-level partition into k test sets with sizes differing by <= 1."""
    ids = list(patient_ids)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]


def _check_binary(labels) -> tuple[int, int]:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC requires both classes")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision: mean of precision at each positive's rank.

    Scores sort descending with ties kept in input order (stable sort).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, _ = _check_binary(labels)
    if n_pos == 0:
        raise ValueError("AUPRC requires at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    cum_pos = np.cumsum(sorted_labels == 1)
    precision = cum_pos / np.arange(1, scores.size + 1)
    return float(precision[sorted_labels == 1].mean())


def roc_points(scores, labels):
    """(threshold, fpr, tpr) at every distinct score, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        thr = scores[order[i]]
        while j < scores.size and scores[order[j]] == thr:
            if labels[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((float(thr), fp / max(n_neg, 1), tp / max(n_pos, 1)))
        i = j
    return points


def pr_points(scores, labels):
    """(threshold, recall, precision) at every distinct score, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, _ = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    points = []
    tp = 0
    seen = 0
    i = 0
    while i < scores.size:
        j = i
        thr = scores[order[i]]
        while j < scores.size and scores[order[j]] == thr:
            tp += int(labels[order[j]] == 1)
            seen += 1
            j += 1
        points.append((float(thr), tp / max(n_pos, 1), tp / seen))
        i = j
    return points


@dataclass
class FoldModels:
    """Everything fitted on one training fold."""

    fold_index: int
    window_hours: int
    normalizer: object
    hgm_params: HgmParams | None
    cnn_params: dict  # arm -> CnnParams


def train_fold(train_records, arms, window_hours: int, vocab: Vocabulary,
               config: ExperimentConfig, fold_index: int) -> FoldModels:
    """Fit normalizer, embeddings (when any arm needs them) and per-arm CNNs."""
    normalizer = fit_normalizer(train_records, window_hours, vocab.n_labs)
    train_norm = normalize_records(train_records, normalizer)

    hgm_params = None
    if any(arm != "CNN" for arm in arms):
        graph = build_graph(train_norm, vocab, window_hours)
        hgm_cfg = replace(config.hgm, seed=derive_seed(config.seed, "hgm", fold_index, window_hours))
        hgm_params = train_hgm(graph, hgm_cfg)

    cnn_params = {}
    for arm in arms:
        mode = ARM_MODES[arm]
        feats = [build_features(rec, window_hours, mode, vocab, hgm_params) for rec in train_norm]
        cnn_cfg = replace(config.cnn, seed=derive_seed(config.seed, f"cnn:{arm}", fold_index, window_hours))
        cnn_params[arm] = train_cnn(feats, cnn_cfg)
    return FoldModels(fold_index, window_hours, normalizer, hgm_params, cnn_params)


def score_fold(models: FoldModels, test_records, arms, vocab: Vocabulary) -> dict:
    """Mortality scores for held-out patients, per arm."""
    test_norm = normalize_records(test_records, models.normalizer)
    out = {}
    for arm in arms:
        mode = ARM_MODES[arm]
        params = models.cnn_params[arm]
        out[arm] = np.array([
            predict(params, build_features(rec, models.window_hours, mode, vocab, models.hgm_params))
            for rec in test_norm
        ])
    return out


def _fold_task(args):
    records_by_id, train_ids, test_ids, arms, window_hours, vocab, config, fold_index = args
    train = [records_by_id[i] for i in train_ids]
    test = [records_by_id[i] for i in test_ids]
    models = train_fold(train, arms, window_hours, vocab, config, fold_index)
    scores = score_fold(models, test, arms, vocab)
    labels = np.array([int(r.died) for r in test])
    return fold_index, scores, labels


def run_experiments(records, vocab: Vocabulary, arms, window_hours: int,
                    config: ExperimentConfig, jobs: int = 1) -> dict:
    """Evaluate several arms over one shared k-fold split.

    Embeddings are trained once per fold and reused by every arm that needs
    them. Folds whose test set is single-class are skipped with a warning.
    Returns {arm: ArmOutcome}.
    """
    for arm in arms:
        if arm not in ARM_MODES:
            raise ValueError(f"unknown arm {arm!r}; expected one of {sorted(ARM_MODES)}")
    records_by_id = {r.patient_id: r for r in records}
    if len(records_by_id) != len(records):
        raise ValueError("duplicate patient ids in records")
    ids = [r.patient_id for r in records]
    folds = kfold_split(ids, config.k_folds, derive_seed(config.seed, "kfold", window=window_hours))

    tasks = []
    for fold_index, test_ids in enumerate(folds):
        test_set = set(test_ids)
        labels = [int(records_by_id[i].died) for i in test_ids]
        if len(set(labels)) < 2:
            logger.warning("fold %d has a single-class test set; skipping", fold_index)
            continue
        train_ids = [i for i in ids if i not in test_set]
        tasks.append((records_by_id, train_ids, test_ids, tuple(arms), window_hours,
                      vocab, config, fold_index))
    if not tasks:
        raise ValueError("no evaluable folds (all test sets single-class)")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    return {
        arm: assemble_outcome(arm, window_hours, [(f, s[arm], y) for f, s, y in results])
        for arm in arms
    }


def assemble_outcome(arm: str, window_hours: int, fold_results) -> ArmOutcome:
    """Aggregate per-fold (fold_index, scores, labels) into an ArmOutcome."""
    fold_reports = []
    pooled_scores = []
    pooled_labels = []
    for fold_index, scores, labels in fold_results:
        fold_reports.append(FoldReport(
            fold_index=fold_index,
            auroc=auroc(scores, labels),
            auprc=auprc(scores, labels),
            n_test=int(np.asarray(labels).size),
            n_pos=int(np.asarray(labels).sum()),
        ))
        pooled_scores.append(np.asarray(scores, dtype=float))
        pooled_labels.append(np.asarray(labels))
    aurocs = np.array([f.auroc for f in fold_reports])
    auprcs = np.array([f.auprc for f in fold_reports])
    ddof = 1 if len(fold_reports) > 1 else 0
    report = ExperimentReport(
        arm=arm,
        window_hours=window_hours,
        folds=fold_reports,
        mean_auroc=float(aurocs.mean()),
        std_auroc=float(aurocs.std(ddof=ddof)),
        mean_auprc=float(auprcs.mean()),
        std_auprc=float(auprcs.std(ddof=ddof)),
    )
    return ArmOutcome(
        report=report,
        scores=np.concatenate(pooled_scores),
        labels=np.concatenate(pooled_labels),
    )


def run_experiment(records, vocab: Vocabulary, arm: str, window_hours: int,
                   config: ExperimentConfig) -> ExperimentReport:
    """Single-arm wrapper over run_experiments."""
    return run_experiments(records, vocab, [arm], window_hours, config)[arm].report
