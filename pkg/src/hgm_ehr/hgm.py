"""Heterogeneous graph embedding model.

Every node is projected into a shared d-dimensional space through a
per-type matrix and a nonlinearity; relations act as vector translations
in that space, so a connected pair scores high under a translated dot
product. Training maximizes the probability of a patient-hour's sampled
neighborhood with negative sampling; an exact full-softmax loss is kept
as a small-scale oracle.

Relation scoring (neighbor side first where translated):
    tested    lab i:        score = (c_i + r_ip) . c_u
    diagnosed diagnosis j:  score = (c_u + r_pd) . c_j
    co-patient:             score = c_u . c_v
    temporal next node:     score = (c_u + r_tt) . c_next
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .checkpoint import load_container, save_container
from .graph import HeteroGraph, NodeId, NodeType, neighbors
from .sampler import ContextSample, Sampler, SamplerConfig, UntrainableCenterError
from .seeds import derive_seed

logger = logging.getLogger(__name__)


def _tanh_deriv(y):
    return 1.0 - y * y


def _sigmoid_act(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_deriv(y):
    return y * (1.0 - y)


def _relu_deriv(y):
    return (y > 0).astype(float)


# activation name -> (apply, derivative expressed in terms of the output)
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_deriv),
    "sigmoid": (_sigmoid_act, _sigmoid_deriv),
    "relu": (lambda x: np.maximum(x, 0.0), _relu_deriv),
}


class Relation(Enum):
    TESTED = "tested"
    DIAGNOSED = "diagnosed"
    CO_PATIENT = "co_patient"
    TEMPORAL = "temporal"


@dataclass
class HgmParams:
    """Projection matrices (d x input_dim) and relation translation vectors."""

    w_p: np.ndarray
    w_i: np.ndarray
    w_d: np.ndarray
    r_ip: np.ndarray
    r_pd: np.ndarray
    r_tt: np.ndarray
    activation: str = "tanh"

    @property
    def d(self) -> int:
        return self.w_p.shape[0]

    @property
    def p_in(self) -> int:
        return self.w_p.shape[1]

    @property
    def n_labs(self) -> int:
        return self.w_i.shape[1]

    @property
    def n_diagnoses(self) -> int:
        return self.w_d.shape[1]

    def copy(self) -> "HgmParams":
        return HgmParams(
            self.w_p.copy(), self.w_i.copy(), self.w_d.copy(),
            self.r_ip.copy(), self.r_pd.copy(), self.r_tt.copy(), self.activation,
        )

    def activation_fns(self):
        try:
            return ACTIVATIONS[self.activation]
        except KeyError:
            raise ValueError(f"unknown activation {self.activation!r}") from None


@dataclass
class HgmGrads:
    w_p: np.ndarray
    w_i: np.ndarray
    w_d: np.ndarray
    r_ip: np.ndarray
    r_pd: np.ndarray
    r_tt: np.ndarray


@dataclass(frozen=True)
class HgmTrainConfig:
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    d: int = 128
    activation: str = "tanh"
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.d < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.sampler.validate()


def init_params(d, p_in, n_labs, n_diagnoses, activation="tanh", seed=0) -> HgmParams:
    """Seeded uniform init in [-0.5/d, 0.5/d) per entry."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    bound = 0.5 / d
    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)
    return HgmParams(
        w_p=u(d, p_in), w_i=u(d, n_labs), w_d=u(d, n_diagnoses),
        r_ip=u(d), r_pd=u(d), r_tt=u(d), activation=activation,
    )


def zero_grads(params: HgmParams) -> HgmGrads:
    return HgmGrads(
        np.zeros_like(params.w_p), np.zeros_like(params.w_i), np.zeros_like(params.w_d),
        np.zeros_like(params.r_ip), np.zeros_like(params.r_pd), np.zeros_like(params.r_tt),
    )


def project(params: HgmParams, node_type: NodeType, raw_vector) -> np.ndarray:
    """Type projection: activation(W_type . x)."""
    matrix = {
        NodeType.PATIENT_HOUR: params.w_p,
        NodeType.LAB: params.w_i,
        NodeType.DIAGNOSIS: params.w_d,
    }[node_type]
    x = np.asarray(raw_vector, dtype=float)
    if x.shape != (matrix.shape[1],):
        raise ValueError(
            f"raw vector of length {x.shape} does not match input dim {matrix.shape[1]} "
            f"for {node_type.value}"
        )
    act, _ = params.activation_fns()
    return act(matrix @ x)


def translate(c, relation_vector) -> np.ndarray:
    """Relation translation: elementwise vector sum."""
    return np.asarray(c) + np.asarray(relation_vector)


def score(params: HgmParams, center_emb, relation: Relation, neighbor_emb) -> float:
    """Translated dot-product similarity between center and neighbor embeddings."""
    c_u = np.asarray(center_emb, dtype=float)
    c_v = np.asarray(neighbor_emb, dtype=float)
    if relation is Relation.TESTED:
        return float((c_v + params.r_ip) @ c_u)
    if relation is Relation.DIAGNOSED:
        return float((c_u + params.r_pd) @ c_v)
    if relation is Relation.TEMPORAL:
        return float((c_u + params.r_tt) @ c_v)
    return float(c_u @ c_v)


_RELATION_TYPE = {
    Relation.TESTED: NodeType.LAB,
    Relation.DIAGNOSED: NodeType.DIAGNOSIS,
    Relation.CO_PATIENT: NodeType.PATIENT_HOUR,
    Relation.TEMPORAL: NodeType.PATIENT_HOUR,
}


def score_raw(params: HgmParams, center_emb, relation: Relation, raw_vector) -> float:
    """Score a neighbor given its raw vector; projects through the type matrix."""
    c_v = project(params, _RELATION_TYPE[relation], raw_vector)
    return score(params, center_emb, relation, c_v)


def embed_node(params: HgmParams, graph: HeteroGraph, node: NodeId) -> np.ndarray:
    """Embedding of a graph node (lab/diagnosis raw vectors are one-hot)."""
    act, _ = params.activation_fns()
    if node.type is NodeType.PATIENT_HOUR:
        p, h = node.index
        return act(params.w_p @ graph.x_patient_hour(p, h))
    if node.type is NodeType.LAB:
        return act(params.w_i[:, node.index].copy())
    return act(params.w_d[:, node.index].copy())


def embed_all(params: HgmParams, graph: HeteroGraph):
    """Embeddings of every node: (patient-hour N x d, lab L x d, diagnosis D x d)."""
    act, _ = params.activation_fns()
    c_ph = act(graph.xp @ params.w_p.T)
    c_lab = act(params.w_i.T.copy())
    c_dx = act(params.w_d.T.copy())
    return c_ph, c_lab, c_dx


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax_context_loss(neighbor_scores, candidate_scores) -> float:
    """-sum over neighbors of (score - log sum of exp over all candidates)."""
    neighbor_scores = np.asarray(neighbor_scores, dtype=float)
    if neighbor_scores.size == 0:
        return 0.0
    log_z = _logsumexp(np.asarray(candidate_scores, dtype=float))
    return float(-np.sum(neighbor_scores - log_z))


def exact_softmax_loss(params: HgmParams, graph: HeteroGraph, center: NodeId) -> float:
    """Full-softmax skip-gram loss for one center; tractable oracles only.

    The normalizer sums translated scores over every vertex of every type;
    patient-hour neighbors (co-patients and the temporal next node alike)
    score as plain dot products on the candidate side.
    """
    p, h = center.index
    c_ph, c_lab, c_dx = embed_all(params, graph)
    c_u = c_ph[graph.ph_row(p, h)]
    candidates = np.concatenate([
        c_ph @ c_u,
        (c_lab + params.r_ip) @ c_u,
        c_dx @ (c_u + params.r_pd),
    ])
    neighbor_scores = (
        [float((c_lab[n.index] + params.r_ip) @ c_u)
         for n in neighbors(graph, center, NodeType.LAB)]
        + [float(c_dx[n.index] @ (c_u + params.r_pd))
           for n in neighbors(graph, center, NodeType.DIAGNOSIS)]
        + [float(c_ph[graph.ph_row(*n.index)] @ c_u)
           for n in neighbors(graph, center, NodeType.PATIENT_HOUR)]
    )
    return softmax_context_loss(neighbor_scores, candidates)


def _context_groups(context: ContextSample):
    """Flatten a context into per-relation (indices, targets) term groups.

    Each positive contributes a target-1 term followed by target-0 terms for
    its negatives, all scored under the positive's relation.
    """
    groups = {
        Relation.TESTED: ([], []),
        Relation.DIAGNOSED: ([], []),
        Relation.CO_PATIENT: ([], []),
        Relation.TEMPORAL: ([], []),
    }

    def push(relation, node, target):
        idx, y = groups[relation]
        idx.append(node.index)
        y.append(target)

    for pos, negs in zip(context.pos_labs, context.neg_labs):
        push(Relation.TESTED, pos, 1.0)
        for neg in negs:
            push(Relation.TESTED, neg, 0.0)
    for pos, negs in zip(context.pos_diagnoses, context.neg_diagnoses):
        push(Relation.DIAGNOSED, pos, 1.0)
        for neg in negs:
            push(Relation.DIAGNOSED, neg, 0.0)
    for pos, negs in zip(context.pos_patients, context.neg_patients):
        push(Relation.CO_PATIENT, pos, 1.0)
        for neg in negs:
            push(Relation.CO_PATIENT, neg, 0.0)
    if context.pos_temporal is not None:
        push(Relation.TEMPORAL, context.pos_temporal, 1.0)
        for neg in context.neg_temporal:
            push(Relation.TEMPORAL, neg, 0.0)
    return groups


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid_vec(x: np.ndarray) -> np.ndarray:
    return _sigmoid_act(np.asarray(x, dtype=float))


def _loss_and_grad(params: HgmParams, graph: HeteroGraph, context: ContextSample,
                   want_grad: bool, want_scores: bool = False):
    act, deriv = params.activation_fns()
    p, h = context.center.index
    x_u = graph.x_patient_hour(p, h)
    a_u = params.w_p @ x_u
    c_u = act(a_u)

    grads = zero_grads(params) if want_grad else None
    dc_u = np.zeros(params.d)
    loss = 0.0
    pos_scores: list[float] = []
    neg_scores: list[float] = []

    for relation, (indices, targets) in _context_groups(context).items():
        if not indices:
            continue
        y = np.array(targets)
        if relation is Relation.TESTED:
            cols = np.array(indices, dtype=np.int64)
            c_v = act(params.w_i[:, cols])
            s = (c_v + params.r_ip[:, None]).T @ c_u
        elif relation is Relation.DIAGNOSED:
            cols = np.array(indices, dtype=np.int64)
            c_v = act(params.w_d[:, cols])
            s = c_v.T @ (c_u + params.r_pd)
        else:
            rows = np.array([graph.ph_row(q, hh) for q, hh in indices], dtype=np.int64)
            x_v = graph.xp[rows].T
            c_v = act(params.w_p @ x_v)
            if relation is Relation.TEMPORAL:
                s = c_v.T @ (c_u + params.r_tt)
            else:
                s = c_v.T @ c_u

        loss += float(np.sum(_softplus(-s[y == 1.0]))) + float(np.sum(_softplus(s[y == 0.0])))
        if want_scores:
            pos_scores.extend(s[y == 1.0].tolist())
            neg_scores.extend(s[y == 0.0].tolist())
        if not want_grad:
            continue

        g = _sigmoid_vec(s) - y
        if relation is Relation.TESTED:
            grads.r_ip += float(np.sum(g)) * c_u
            dc_u += (c_v + params.r_ip[:, None]) @ g
            d_cv = c_u[:, None] * g[None, :]
            np.add.at(grads.w_i.T, cols, (d_cv * deriv(c_v)).T)
        elif relation is Relation.DIAGNOSED:
            grads.r_pd += c_v @ g
            dc_u += c_v @ g
            d_cv = (c_u + params.r_pd)[:, None] * g[None, :]
            np.add.at(grads.w_d.T, cols, (d_cv * deriv(c_v)).T)
        elif relation is Relation.TEMPORAL:
            grads.r_tt += c_v @ g
            dc_u += c_v @ g
            d_cv = (c_u + params.r_tt)[:, None] * g[None, :]
            grads.w_p += (d_cv * deriv(c_v)) @ x_v.T
        else:
            dc_u += c_v @ g
            d_cv = c_u[:, None] * g[None, :]
            grads.w_p += (d_cv * deriv(c_v)) @ x_v.T

    if want_grad:
        grads.w_p += np.outer(dc_u * deriv(c_u), x_u)
    if want_scores:
        return loss, grads, np.array(pos_scores), np.array(neg_scores)
    return loss, grads


def ns_loss(params: HgmParams, graph: HeteroGraph, context: ContextSample) -> float:
    """Negative-sampling loss: -log sigmoid(score) for positives plus
    -log sigmoid(-score) for their negatives, translated scoring throughout."""
    loss, _ = _loss_and_grad(params, graph, context, want_grad=False)
    return loss


def ns_grad(params: HgmParams, graph: HeteroGraph, context: ContextSample) -> HgmGrads:
    """Exact analytic gradients of ns_loss; entries untouched by the context are zero."""
    _, grads = _loss_and_grad(params, graph, context, want_grad=True)
    return grads


def context_scores(params: HgmParams, graph: HeteroGraph, context: ContextSample):
    """Raw pair scores of a context as (positive_scores, negative_scores)."""
    _, _, pos, neg = _loss_and_grad(params, graph, context, want_grad=False, want_scores=True)
    return pos, neg


def train_hgm(graph: HeteroGraph, config: HgmTrainConfig, on_epoch=None) -> HgmParams:
    """SGD over epochs x shuffled patient-hour centers, one context per step.

    Learning rate decays linearly from config.learning_rate to
    config.min_learning_rate over the full schedule. Untrainable centers
    (no diagnoses, no labs) are skipped and counted. Deterministic per seed.
    """
    config.validate()
    params = init_params(
        config.d, graph.n_labs, graph.n_labs, graph.n_diagnoses,
        activation=config.activation, seed=derive_seed(config.seed, "hgm-init"),
    )
    sampler = Sampler(graph, replace(config.sampler, seed=derive_seed(config.seed, "hgm-sampler")))
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "hgm-shuffle"))
    centers = [NodeId(NodeType.PATIENT_HOUR, (p, h)) for p, h in graph.patient_hours()]
    total_steps = max(1, config.epochs * len(centers))
    lr_span = config.learning_rate - config.min_learning_rate

    step = 0
    skipped = 0
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        n_contexts = 0
        for idx in shuffle_rng.permutation(len(centers)):
            lr = config.min_learning_rate + lr_span * (1.0 - step / total_steps)
            step += 1
            try:
                context = sampler.sample_context(centers[idx])
            except UntrainableCenterError:
                skipped += 1
                continue
            loss, grads = _loss_and_grad(params, graph, context, want_grad=True)
            epoch_loss += loss
            n_contexts += 1
            params.w_p -= lr * grads.w_p
            params.w_i -= lr * grads.w_i
            params.w_d -= lr * grads.w_d
            params.r_ip -= lr * grads.r_ip
            params.r_pd -= lr * grads.r_pd
            params.r_tt -= lr * grads.r_tt
        mean_loss = epoch_loss / max(1, n_contexts)
        logger.info("hgm epoch %d/%d mean loss %.4f", epoch + 1, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    if skipped:
        logger.info("skipped %d untrainable center visits", skipped)
    return params


def embed_patient_hour(params: HgmParams, snapshot, previous_embedding=None) -> np.ndarray:
    """Embed one hour; fully-missing hours chain from the previous hour.

    Observed hour: activation(W_p . lab_values). Missing hour with a previous
    embedding: previous + r_tt (the temporal translation). Missing with no
    previous: zero vector.
    """
    if snapshot is not None and bool(np.any(snapshot.lab_observed)):
        return project(params, NodeType.PATIENT_HOUR, snapshot.lab_values)
    if previous_embedding is not None:
        return np.asarray(previous_embedding, dtype=float) + params.r_tt
    return np.zeros(params.d)


def save_params(params: HgmParams, path) -> None:
    save_container(path, kind="hgm", payload={
        "activation": params.activation,
        "dims": {
            "d": params.d, "p_in": params.p_in,
            "labs": params.n_labs, "diagnoses": params.n_diagnoses,
        },
        "arrays": {
            "w_p": params.w_p.tolist(), "w_i": params.w_i.tolist(), "w_d": params.w_d.tolist(),
            "r_ip": params.r_ip.tolist(), "r_pd": params.r_pd.tolist(), "r_tt": params.r_tt.tolist(),
        },
    })


def load_params(path) -> HgmParams:
    payload = load_container(path, kind="hgm")
    arrays = payload["arrays"]
    params = HgmParams(
        w_p=np.asarray(arrays["w_p"], dtype=float),
        w_i=np.asarray(arrays["w_i"], dtype=float),
        w_d=np.asarray(arrays["w_d"], dtype=float),
        r_ip=np.asarray(arrays["r_ip"], dtype=float),
        r_pd=np.asarray(arrays["r_pd"], dtype=float),
        r_tt=np.asarray(arrays["r_tt"], dtype=float),
        activation=payload["activation"],
    )
    dims = payload["dims"]
    if (params.d, params.p_in, params.n_labs, params.n_diagnoses) != (
            dims["d"], dims["p_in"], dims["labs"], dims["diagnoses"]):
        raise ValueError(f"checkpoint dims {dims} do not match stored arrays")
    return params
