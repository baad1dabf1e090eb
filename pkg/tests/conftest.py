import numpy as np
import pytest

from hgm_ehr.graph import NodeId, NodeType, build_graph
from hgm_ehr.hgm import exact_softmax_loss
from hgm_ehr.ingest import LabEvent, PatientRecord, Vocabulary

HGM_PARAM_FIELDS = ("w_p", "w_i", "w_d", "r_ip", "r_pd", "r_tt")


def make_record(pid, events, diagnoses, died=False, end_hour=20):
    """events: iterable of (hours_before_end, lab_id, value)."""
    return PatientRecord(
        patient_id=pid,
        events=[LabEvent(pid, float(t), lab, float(v)) for t, lab, v in events],
        diagnoses=set(diagnoses),
        died=died,
        end_hour=end_hour,
    )


def toy_vocab(n_labs=3, n_diagnoses=3):
    return Vocabulary(
        labs=[f"lab_{i}" for i in range(n_labs)],
        diagnoses=[f"dx_{i}" for i in range(n_diagnoses)],
    )


def toy_records():
    """2 patients x 2 hours + 3 labs + 3 diagnoses = 10 nodes.

    The two patients share no diagnosis and no lab, and each patient's two
    hour vectors point the same way, so the two-cluster geometry the
    training objective asks for is realizable.
    """
    return [
        make_record("p0", [(0.5, 0, 1.0), (1.2, 0, 0.5), (1.7, 1, -0.6)], {0}, died=True),
        make_record("p1", [(0.3, 2, 2.0), (1.4, 2, 0.8)], {2}, died=False),
    ]


@pytest.fixture
def toy_graph():
    records = toy_records()
    vocab = toy_vocab()
    return build_graph(records, vocab, 2), vocab, records


@pytest.fixture
def shared_dx_graph():
    """Three patients where p0/p1 share diagnosis 1, for co-patient sampling."""
    records = [
        make_record("p0", [(0.5, 0, 1.0), (1.5, 1, 2.0)], {0, 1}, died=True),
        make_record("p1", [(0.5, 2, -1.0), (1.5, 2, 0.3)], {1, 2}, died=False),
        make_record("p2", [(0.5, 3, 0.1)], {3}, died=False),
    ]
    vocab = toy_vocab(n_labs=4, n_diagnoses=4)
    return build_graph(records, vocab, 2), vocab, records


def patient_hour_centers(graph):
    return [NodeId(NodeType.PATIENT_HOUR, (p, h)) for p, h in graph.patient_hours()]


def total_exact_loss(params, graph):
    return sum(exact_softmax_loss(params, graph, c) for c in patient_hour_centers(graph))


def exact_loss_fd_step(params, graph, lr=0.1, h=1e-5):
    """One full-gradient descent step on the summed exact softmax loss,
    with the gradient taken by central finite differences."""
    grads = []
    for name in HGM_PARAM_FIELDS:
        arr = getattr(params, name)
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = total_exact_loss(params, graph)
            arr[idx] = orig - h
            down = total_exact_loss(params, graph)
            arr[idx] = orig
            grad[idx] = (up - down) / (2 * h)
        grads.append(grad)
    for name, grad in zip(HGM_PARAM_FIELDS, grads):
        getattr(params, name)[...] -= lr * grad
