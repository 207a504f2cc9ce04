"""Herding-based exemplar selection and replay storage."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError
from .util import require_unit_rows


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding over one class's unit-norm feature rows.

    At step k the chosen index minimizes ||class_mean - mean(selected so far +
    candidate)||_2, ties broken by smallest index. Returns min(m, n) distinct
    indices in selection order. The candidate mean is recomputed from scratch
    each step so results are reproducible independent of accumulation order.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"need at least one feature row, got shape {features.shape}")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    require_unit_rows(features, tol=1e-4, name="class features")
    n = features.shape[0]
    class_mean = features.mean(axis=0)
    selected: list[int] = []
    remaining = np.arange(n)
    for k in range(1, min(m, n) + 1):
        chosen_sum = features[selected].sum(axis=0) if selected else 0.0
        cand_means = (chosen_sum + features[remaining]) / k
        dists = np.linalg.norm(class_mean - cand_means, axis=1)
        pick = int(np.argmin(dists))  # first minimum = smallest index
        selected.append(int(remaining[pick]))
        remaining = np.delete(remaining, pick)
    return selected


@dataclass
class ExemplarStore:
    """Per-class replay memory, at most ``m`` raw samples per old class.

    Samples are stored as raw inputs (not features) so the live encoder
    re-encodes them every epoch. Classes are only added between tasks.
    """

    m: int = 20
    _samples: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 0:
            raise ValueError(f"m must be >= 0, got {self.m}")

    @property
    def classes(self) -> list[str]:
        return list(self._samples.keys())

    def __len__(self) -> int:
        return sum(arr.shape[0] for arr in self._samples.values())

    def count(self, label: str) -> int:
        return self._samples[label].shape[0] if label in self._samples else 0

    def add_class(self, label: str, samples: np.ndarray, features: np.ndarray) -> None:
        """Herd ``samples`` for a newly finished class using their ``features``."""
        if label in self._samples:
            raise ProtocolError(f"class {label!r} already has exemplars")
        if samples.shape[0] != features.shape[0]:
            raise ValueError("samples and features must pair up row-wise")
        keep = herding_select(features, self.m)
        self._samples[label] = np.array(samples[keep], dtype=np.float32)

    def union(self) -> tuple[np.ndarray, list[str]]:
        """All stored samples with their labels, in class-insertion order."""
        if not self._samples:
            return np.empty((0, 0), dtype=np.float32), []
        xs = np.concatenate(list(self._samples.values()), axis=0)
        labels = [lab for lab, arr in self._samples.items() for _ in range(arr.shape[0])]
        return xs, labels

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        xs, labels = self.union()
        xs.astype("<f4").tofile(out_dir / "exemplars.bin")
        index = {
            "m": self.m,
            "dim": int(xs.shape[1]) if xs.size else 0,
            "counts": {lab: int(arr.shape[0]) for lab, arr in self._samples.items()},
        }
        (out_dir / "exemplars.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, in_dir: str | Path) -> "ExemplarStore":
        in_dir = Path(in_dir)
        index = json.loads((in_dir / "exemplars.json").read_text())
        store = cls(m=int(index["m"]))
        dim = int(index["dim"])
        if dim:
            flat = np.fromfile(in_dir / "exemplars.bin", dtype="<f4").reshape(-1, dim)
            offset = 0
            for lab, cnt in index["counts"].items():
                store._samples[lab] = flat[offset : offset + cnt].copy()
                offset += cnt
        return store


def replay_batch(
    store: ExemplarStore, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, list[str]]:
    """Draw ``size`` exemplars uniformly without replacement (capped at the
    store size). Deterministic under a fixed-seed generator; empty store or
    size 0 yields an empty batch."""
    xs, labels = store.union()
    total = xs.shape[0]
    if total == 0 or size == 0:
        return xs[:0], []
    take = min(size, total)
    order = rng.permutation(total)[:take]
    return xs[order], [labels[i] for i in order]
