"""Skip-gram context sampling around patient-hour center nodes.

Positives: uniform with-replacement draws from the center's one-hop
diagnosis and lab neighborhoods, co-patients reached through a sampled
shared diagnosis, and the temporal next node when it exists. Negatives:
uniform draws from same-type nodes with no one-hop connection to the
center (for patient-hour negatives: hour nodes of patients sharing no
diagnosis with the center's patient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import HeteroGraph, NodeId, NodeType


class UntrainableCenterError(ValueError):
    """Center has neither diagnoses nor observed labs to learn from."""


@dataclass(frozen=True)
class SamplerConfig:
    n_diagnoses: int = 10
    n_labs: int = 10
    n_copatients: int = 10
    negatives_per_positive: int = 5
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_diagnoses, self.n_labs, self.n_copatients, self.negatives_per_positive) < 1:
            raise ValueError("all sampler counts must be >= 1")


@dataclass(frozen=True)
class ContextSample:
    center: NodeId
    pos_diagnoses: tuple
    pos_labs: tuple
    pos_patients: tuple
    pos_temporal: NodeId | None
    neg_diagnoses: tuple  # one tuple of negatives per positive
    neg_labs: tuple
    neg_patients: tuple
    neg_temporal: tuple

    def n_positives(self) -> int:
        return (len(self.pos_diagnoses) + len(self.pos_labs) + len(self.pos_patients)
                + (1 if self.pos_temporal is not None else 0))


class Sampler:
    """Seeded context sampler; one instance per worker, graph is read-only."""

    def __init__(self, graph: HeteroGraph, config: SamplerConfig):
        config.validate()
        self.graph = graph
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._dx_patients: dict[int, np.ndarray] = {}
        self._neg_patient_pool: dict[int, np.ndarray] = {}

    def _patients_with_diagnosis(self, dx: int, exclude: int) -> np.ndarray:
        pool = self._dx_patients.get(dx)
        if pool is None:
            pool = np.array(sorted(self.graph.diagnosed_rev.get(dx, ())), dtype=np.int64)
            self._dx_patients[dx] = pool
        return pool[pool != exclude]

    def _nonsharing_patients(self, patient: int) -> np.ndarray:
        pool = self._neg_patient_pool.get(patient)
        if pool is None:
            sharing = {patient}
            for dx in self.graph.diagnosed_adj.get(patient, ()):
                sharing.update(self.graph.diagnosed_rev[dx])
            pool = np.array(
                [q for q in range(self.graph.n_patients) if q not in sharing], dtype=np.int64
            )
            self._neg_patient_pool[patient] = pool
        return pool

    def _negative_pool(self, center: NodeId, node_type: NodeType):
        p, h = center.index
        if node_type is NodeType.DIAGNOSIS:
            connected = self.graph.diagnosed_adj.get(p, set())
            return np.array([d for d in range(self.graph.n_diagnoses) if d not in connected],
                            dtype=np.int64)
        if node_type is NodeType.LAB:
            tested = self.graph.tested_adj.get((p, h), set())
            return np.array([l for l in range(self.graph.n_labs) if l not in tested],
                            dtype=np.int64)
        return self._nonsharing_patients(p)

    def sample_negatives(self, center: NodeId, node_type: NodeType, count: int) -> tuple:
        """Uniform with-replacement draws from the center's non-neighbors."""
        if center.type is not NodeType.PATIENT_HOUR:
            raise ValueError("negatives are sampled around patient-hour centers")
        pool = self._negative_pool(center, node_type)
        if pool.size == 0:
            raise ValueError(f"empty negative pool for type {node_type.value}")
        if node_type is NodeType.PATIENT_HOUR:
            patients = self.rng.choice(pool, size=count, replace=True)
            hours = self.rng.integers(0, self.graph.window_hours, size=count)
            return tuple(NodeId(node_type, (int(q), int(hh))) for q, hh in zip(patients, hours))
        picks = self.rng.choice(pool, size=count, replace=True)
        return tuple(NodeId(node_type, int(i)) for i in picks)

    def _draw_negatives(self, center: NodeId, node_type: NodeType, n_positives: int):
        # Inside a context an empty pool degrades to negative-free positives
        # instead of erroring; direct sample_negatives keeps the strict contract.
        k = self.config.negatives_per_positive
        pool = self._negative_pool(center, node_type)
        if pool.size == 0 or n_positives == 0:
            return tuple(() for _ in range(n_positives))
        return tuple(self.sample_negatives(center, node_type, k) for _ in range(n_positives))

    def sample_context(self, center: NodeId) -> ContextSample:
        """Draw one full skip-gram context around a patient-hour center."""
        if center.type is not NodeType.PATIENT_HOUR:
            raise ValueError("context centers must be patient-hour nodes")
        graph = self.graph
        p, h = center.index
        dx_pool = np.array(sorted(graph.diagnosed_adj.get(p, ())), dtype=np.int64)
        lab_pool = np.array(sorted(graph.tested_adj.get((p, h), ())), dtype=np.int64)
        if dx_pool.size == 0 and lab_pool.size == 0:
            raise UntrainableCenterError(
                f"patient-hour ({p}, {h}) has no diagnoses and no observed labs"
            )

        pos_diagnoses: tuple = ()
        if dx_pool.size:
            picks = self.rng.choice(dx_pool, size=self.config.n_diagnoses, replace=True)
            pos_diagnoses = tuple(NodeId(NodeType.DIAGNOSIS, int(d)) for d in picks)
        pos_labs: tuple = ()
        if lab_pool.size:
            picks = self.rng.choice(lab_pool, size=self.config.n_labs, replace=True)
            pos_labs = tuple(NodeId(NodeType.LAB, int(l)) for l in picks)

        # Co-patients: re-draw a sampled diagnosis, then a uniform hour node of
        # another patient carrying it. Diagnoses whose only carrier is the
        # center's patient cannot produce one and are skipped.
        pos_patients: tuple = ()
        eligible = [d.index for d in pos_diagnoses if self._patients_with_diagnosis(d.index, p).size]
        if eligible:
            out = []
            for _ in range(self.config.n_copatients):
                dx = eligible[int(self.rng.integers(0, len(eligible)))]
                carriers = self._patients_with_diagnosis(dx, p)
                q = int(carriers[int(self.rng.integers(0, carriers.size))])
                hour = int(self.rng.integers(0, graph.window_hours))
                out.append(NodeId(NodeType.PATIENT_HOUR, (q, hour)))
            pos_patients = tuple(out)

        nxt = graph.temporal_next.get((p, h))
        pos_temporal = NodeId(NodeType.PATIENT_HOUR, nxt) if nxt is not None else None

        neg_diagnoses = self._draw_negatives(center, NodeType.DIAGNOSIS, len(pos_diagnoses))
        neg_labs = self._draw_negatives(center, NodeType.LAB, len(pos_labs))
        neg_patients = self._draw_negatives(center, NodeType.PATIENT_HOUR, len(pos_patients))
        neg_temporal: tuple = ()
        if pos_temporal is not None:
            drawn = self._draw_negatives(center, NodeType.PATIENT_HOUR, 1)
            neg_temporal = drawn[0]

        return ContextSample(
            center=center,
            pos_diagnoses=pos_diagnoses,
            pos_labs=pos_labs,
            pos_patients=pos_patients,
            pos_temporal=pos_temporal,
            neg_diagnoses=neg_diagnoses,
            neg_labs=neg_labs,
            neg_patients=neg_patients,
            neg_temporal=neg_temporal,
        )
