from __future__ import annotations

import numpy as np
import pytest

from semcl.embeddings import EmbeddingTable
from semcl.protocol import synth_benchmark

# The committed desk-scale fixture: regenerated from code each session and
# pinned by checksum in test_protocol / test_acceptance.
DEFAULT_FIXTURE = dict(
    num_classes=20,
    dim=64,
    samples_per_class=50,
    intra_spread=0.15,
    semantic_clusters=4,
    seed=1993,
    test_per_class=200,
    modality_gap_deg=45.0,
    cluster_angle_deg=25.0,
)

# Training settings the fixture experiments were calibrated with.
DESK_TRAIN = dict(lr=1e-3, batch_size=64, epochs=10, exemplars_per_class=5)

SWEEP_SEEDS = [1993, 741, 2456, 3721, 4891]


@pytest.fixture(scope="session")
def default_fixture():
    dataset, table = synth_benchmark(**DEFAULT_FIXTURE)
    return dataset, table


@pytest.fixture(scope="session")
def small_fixture():
    """A fast 8-class variant for trainer-level tests."""
    dataset, table = synth_benchmark(
        num_classes=8, dim=16, samples_per_class=12, intra_spread=0.15,
        semantic_clusters=2, seed=7, test_per_class=8, modality_gap_deg=45.0,
    )
    return dataset, table


def axis_table(dim: int = 4, labels=("a", "b")) -> EmbeddingTable:
    m = np.zeros((len(labels), dim))
    for i in range(len(labels)):
        m[i, i] = 1.0
    return EmbeddingTable(tuple(labels), m)
