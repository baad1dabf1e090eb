"""Convolutional mortality classifier over hourly feature matrices.

The input grid holds one row per hour bin, oldest hour first, features
across the row. Filters span the full feature width and slide along time
(valid padding), followed by ReLU, a global max-pool over time, a dense
layer and a two-way softmax. Backpropagation is explicit; gradients flow
only to each filter's argmax pool position (first index on ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .checkpoint import load_container, save_container
from .graph import multi_hot
from .hgm import HgmParams, embed_patient_hour
from .ingest import PatientRecord, Vocabulary, bin_events
from .seeds import derive_seed


class FeatureMode(Enum):
    RAW_LABS_DIAG = "raw_labs_diag"
    RAW_LABS = "raw_labs"
    EMBED_ONLY = "embed_only"
    EMBED_PLUS_LABS = "embed_plus_labs"

    def feature_count(self, n_labs: int, n_diagnoses: int, embed_dim: int | None) -> int:
        if self is FeatureMode.RAW_LABS_DIAG:
            return n_labs + n_diagnoses
        if self is FeatureMode.RAW_LABS:
            return n_labs
        if embed_dim is None:
            raise ValueError(f"mode {self.value} requires an embedding dimension")
        if self is FeatureMode.EMBED_ONLY:
            return embed_dim
        return embed_dim + n_labs

    @property
    def needs_embedding(self) -> bool:
        return self in (FeatureMode.EMBED_ONLY, FeatureMode.EMBED_PLUS_LABS)


@dataclass
class FeatureMatrix:
    """(T, F) grid: row t holds the features of the t-th oldest hour."""

    values: np.ndarray
    label: bool

    @property
    def t_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class CnnParams:
    filters: np.ndarray    # (n_filters, kernel, n_features)
    conv_bias: np.ndarray  # (n_filters,)
    dense_w: np.ndarray    # (n_filters, 2)
    dense_b: np.ndarray    # (2,)

    def copy(self) -> "CnnParams":
        return CnnParams(self.filters.copy(), self.conv_bias.copy(),
                         self.dense_w.copy(), self.dense_b.copy())


@dataclass
class CnnGrads:
    filters: np.ndarray
    conv_bias: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray


@dataclass(frozen=True)
class CnnTrainConfig:
    n_filters: int = 32
    kernel: int = 3
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    class_weighting: bool = True

    def validate(self) -> None:
        if self.n_filters < 1 or self.kernel < 1:
            raise ValueError("n_filters and kernel must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training hyperparameters")


def build_features(record: PatientRecord, window_hours: int, mode: FeatureMode,
                   vocab: Vocabulary, hgm_params: HgmParams | None = None) -> FeatureMatrix:
    """Assemble the (window_hours, F) grid for one patient.

    Rows run oldest to newest hour. The diagnosis block repeats the
    patient's multi-hot at every row; the embedding block chains
    embed_patient_hour forward from the oldest hour so fully-missing hours
    inherit the previous hour's embedding plus the temporal translation.
    """
    if mode.needs_embedding and hgm_params is None:
        raise ValueError(f"feature mode {mode.value} requires trained embedding parameters")
    snapshots = bin_events(record, window_hours, vocab.n_labs)
    hours_oldest_first = list(range(window_hours - 1, -1, -1))

    embeddings = []
    if mode.needs_embedding:
        previous = None
        for hour in hours_oldest_first:
            emb = embed_patient_hour(hgm_params, snapshots[hour], previous)
            embeddings.append(emb)
            previous = emb

    diag_block = None
    if mode is FeatureMode.RAW_LABS_DIAG:
        diag_block = multi_hot(record.diagnoses, vocab.n_diagnoses)

    rows = []
    for t, hour in enumerate(hours_oldest_first):
        labs = snapshots[hour].lab_values
        if mode is FeatureMode.RAW_LABS:
            rows.append(labs)
        elif mode is FeatureMode.RAW_LABS_DIAG:
            rows.append(np.concatenate([labs, diag_block]))
        elif mode is FeatureMode.EMBED_ONLY:
            rows.append(embeddings[t])
        else:
            rows.append(np.concatenate([embeddings[t], labs]))
    return FeatureMatrix(values=np.stack(rows), label=record.died)


def init_cnn(n_features: int, config: CnnTrainConfig, seed: int | None = None) -> CnnParams:
    """Seeded Glorot-uniform filters and dense weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    fan_in = config.kernel * n_features
    limit = np.sqrt(6.0 / (fan_in + config.n_filters))
    filters = rng.uniform(-limit, limit, size=(config.n_filters, config.kernel, n_features))
    d_limit = np.sqrt(6.0 / (config.n_filters + 2))
    dense_w = rng.uniform(-d_limit, d_limit, size=(config.n_filters, 2))
    return CnnParams(
        filters=filters,
        conv_bias=np.zeros(config.n_filters),
        dense_w=dense_w,
        dense_b=np.zeros(2),
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _batch_forward(params: CnnParams, batch: np.ndarray):
    """Forward pass over (B, T, F); returns probs plus the pooling cache."""
    n_filters, kernel, n_features = params.filters.shape
    if batch.shape[1] < kernel:
        raise ValueError(f"time dimension {batch.shape[1]} shorter than kernel {kernel}")
    if batch.shape[2] != n_features:
        raise ValueError(f"feature dimension {batch.shape[2]} does not match filters ({n_features})")
    # windows[b, j, c, a] = batch[b, j + a, c]
    windows = np.lib.stride_tricks.sliding_window_view(batch, kernel, axis=1)
    z = np.einsum("fac,bjca->bjf", params.filters, windows) + params.conv_bias
    relu = np.maximum(z, 0.0)
    pool_idx = relu.argmax(axis=1)
    pooled = np.take_along_axis(relu, pool_idx[:, None, :], axis=1)[:, 0, :]
    logits = pooled @ params.dense_w + params.dense_b
    probs = _softmax_rows(logits)
    return probs, (windows, z, pool_idx, pooled)


def _batch_backward(params: CnnParams, batch, labels, weights):
    """Summed weighted cross-entropy gradients over the batch."""
    probs, (windows, z, pool_idx, pooled) = _batch_forward(params, batch)
    n = batch.shape[0]
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n), labels] = 1.0
    d_logits = (probs - one_hot) * weights[:, None]

    d_dense_w = pooled.T @ d_logits
    d_dense_b = d_logits.sum(axis=0)
    d_pooled = d_logits @ params.dense_w.T

    z_at = np.take_along_axis(z, pool_idx[:, None, :], axis=1)[:, 0, :]
    d_z = d_pooled * (z_at > 0)
    win_at = np.take_along_axis(windows, pool_idx[:, :, None, None], axis=1)
    d_filters = np.einsum("bf,bfca->fac", d_z, win_at)
    d_bias = d_z.sum(axis=0)
    return probs, CnnGrads(d_filters, d_bias, d_dense_w, d_dense_b)


def forward(params: CnnParams, matrix: FeatureMatrix) -> np.ndarray:
    """Class probabilities [survived, died]; always sums to 1."""
    probs, _ = _batch_forward(params, matrix.values[None, :, :])
    return probs[0]


def ce_loss(probabilities, label, weight: float = 1.0) -> float:
    """Cross-entropy -log p[label], probability clamped at 1e-12."""
    p = max(float(np.asarray(probabilities)[int(label)]), 1e-12)
    return -weight * float(np.log(p))


def backward(params: CnnParams, matrix: FeatureMatrix, label, weight: float = 1.0) -> CnnGrads:
    """Exact gradients of ce_loss(forward(params, matrix), label)."""
    _, grads = _batch_backward(
        params, matrix.values[None, :, :],
        np.array([int(label)]), np.array([float(weight)]),
    )
    return grads


def predict(params: CnnParams, matrix: FeatureMatrix) -> float:
    """Mortality score: forward probability of the death class."""
    return float(forward(params, matrix)[1])


def train_cnn(features: list[FeatureMatrix], config: CnnTrainConfig) -> CnnParams:
    """Seeded mini-batch SGD; deterministic given (features, config)."""
    config.validate()
    if not features:
        raise ValueError("empty training set")
    labels = np.array([int(m.label) for m in features])
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("training set must contain both classes")
    shapes = {m.values.shape for m in features}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent feature shapes: {sorted(shapes)}")
    batch_values = np.stack([m.values for m in features])

    n = len(features)
    if config.class_weighting:
        class_w = np.array([n / (2.0 * (n - n_pos)), n / (2.0 * n_pos)])
    else:
        class_w = np.ones(2)
    weights = class_w[labels]

    params = init_cnn(batch_values.shape[2], config, seed=derive_seed(config.seed, "cnn-init"))
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "cnn-shuffle"))
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            take = order[start:start + config.batch_size]
            _, grads = _batch_backward(params, batch_values[take], labels[take], weights[take])
            scale = config.learning_rate / take.size
            params.filters -= scale * grads.filters
            params.conv_bias -= scale * grads.conv_bias
            params.dense_w -= scale * grads.dense_w
            params.dense_b -= scale * grads.dense_b
    return params


def save_cnn(params: CnnParams, path) -> None:
    save_container(path, kind="cnn", payload={
        "dims": {
            "filters": params.filters.shape[0],
            "kernel": params.filters.shape[1],
            "features": params.filters.shape[2],
        },
        "arrays": {
            "filters": params.filters.tolist(),
            "conv_bias": params.conv_bias.tolist(),
            "dense_w": params.dense_w.tolist(),
            "dense_b": params.dense_b.tolist(),
        },
    })


def load_cnn(path) -> CnnParams:
    payload = load_container(path, kind="cnn")
    arrays = payload["arrays"]
    params = CnnParams(
        filters=np.asarray(arrays["filters"], dtype=float),
        conv_bias=np.asarray(arrays["conv_bias"], dtype=float),
        dense_w=np.asarray(arrays["dense_w"], dtype=float),
        dense_b=np.asarray(arrays["dense_b"], dtype=float),
    )
    dims = payload["dims"]
    if params.filters.shape != (dims["filters"], dims["kernel"], dims["features"]):
        raise ValueError(f"checkpoint dims {dims} do not match stored arrays")
    return params
