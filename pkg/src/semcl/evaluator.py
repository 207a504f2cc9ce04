"""Test-time classification over all seen classes, and run-level metrics.

Prediction scores are the softmax of raw cosine similarities between the image
feature and each seen label embedding; the argmax (lowest index on ties) is
the prediction. Per-task accuracies accumulate into Avg (mean over tasks,
first task included) and Last.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .embeddings import EmbeddingTable, embed_labels
from .errors import ProtocolError
from .util import stable_softmax

REPORT_SCHEMA = "semcl-report/1"


def predict(feature: np.ndarray, seen_embeddings: np.ndarray) -> tuple[int, np.ndarray]:
    """Classify one feature against k seen-class embeddings.

    Scores are the softmax over cosine similarities (the feature is normalized
    here, embeddings are unit by construction). Returns (class index, score
    vector); ties take the lowest index.
    """
    seen_embeddings = np.asarray(seen_embeddings, dtype=np.float64)
    if seen_embeddings.ndim != 2 or seen_embeddings.shape[0] < 1:
        raise ValueError("need at least one seen class")
    feature = np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(feature)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("feature vector must be finite and nonzero")
    sims = seen_embeddings @ (feature / norm)
    scores = stable_softmax(sims)
    return int(np.argmax(scores)), scores


@dataclass(frozen=True)
class EvalResult:
    top1: float  # percent
    top5: float  # percent
    n_samples: int
    predictions: np.ndarray  # seen-class indices
    truths: np.ndarray  # seen-class indices


def evaluate(
    encoder,
    table: EmbeddingTable,
    dataset,
    seen_labels: Sequence[str],
    batch_size: int = 512,
) -> EvalResult:
    """Accuracy over the union of test samples of all seen classes.

    ``encoder`` is anything with an ``encode(batch) -> unit features`` method
    (live encoder or snapshot). Top-5 counts ground truth anywhere in the five
    highest scores and is 100% when fewer than five classes are seen.
    """
    seen = list(seen_labels)
    if not seen:
        raise ProtocolError("cannot evaluate with no seen classes")
    missing = [c for c in seen if c not in dataset.classes]
    if missing:
        raise ProtocolError(f"test set lacks seen classes {missing}")
    emb = embed_labels(table, seen)
    xs, names = dataset.test_rows(seen)
    if xs.shape[0] == 0:
        raise ProtocolError("no test samples for the seen classes")
    seen_index = {c: i for i, c in enumerate(seen)}
    truths = np.array([seen_index[name] for name in names], dtype=np.int64)

    preds = np.empty(xs.shape[0], dtype=np.int64)
    top5_hits = 0
    k = len(seen)
    with torch.no_grad():
        for start in range(0, xs.shape[0], batch_size):
            batch = torch.as_tensor(xs[start : start + batch_size])
            feats = encoder.encode(batch).cpu().numpy().astype(np.float64)
            sims = feats @ emb.T
            # Ranking by similarity equals ranking by the softmax scores.
            preds_b = np.argmax(sims, axis=1)
            preds[start : start + feats.shape[0]] = preds_b
            if k <= 5:
                top5_hits += feats.shape[0]
            else:
                t = truths[start : start + feats.shape[0]]
                true_sims = sims[np.arange(feats.shape[0]), t]
                better = (sims > true_sims[:, None]).sum(axis=1)
                equal_before = np.array(
                    [int(np.sum(sims[i, : t[i]] == true_sims[i])) for i in range(feats.shape[0])]
                )
                top5_hits += int(np.sum(better + equal_before < 5))

    top1 = 100.0 * float(np.mean(preds == truths))
    top5 = 100.0 * top5_hits / xs.shape[0]
    return EvalResult(top1, top5, int(xs.shape[0]), preds, truths)


@dataclass
class RunReport:
    """Everything one experiment run produced, serializable to JSON/CSV."""

    config: dict
    stream: dict
    seed: int
    per_task: list[dict] = field(default_factory=list)
    loss_traces: dict[str, list[dict]] = field(default_factory=dict)
    created_at: str | None = None

    def add_task(self, task_id: int, result: EvalResult, seen: int, store_size: int) -> None:
        self.per_task.append(
            {
                "task_id": task_id,
                "top1": result.top1,
                "top5": result.top5,
                "test_samples": result.n_samples,
                "seen_classes": seen,
                "store_size": store_size,
            }
        )

    @property
    def avg(self) -> float:
        if not self.per_task:
            raise ValueError("no task results recorded")
        return float(np.mean([t["top1"] for t in self.per_task]))

    @property
    def last(self) -> float:
        if not self.per_task:
            raise ValueError("no task results recorded")
        return float(self.per_task[-1]["top1"])

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "created_at": self.created_at,
            "seed": self.seed,
            "config": self.config,
            "stream": self.stream,
            "per_task": self.per_task,
            "avg": self.avg,
            "last": self.last,
            "loss_traces": self.loss_traces,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "RunReport":
        d = json.loads(Path(path).read_text())
        report = cls(
            config=d["config"],
            stream=d["stream"],
            seed=d["seed"],
            per_task=d["per_task"],
            loss_traces=d.get("loss_traces", {}),
            created_at=d.get("created_at"),
        )
        return report

    def save_csv(self, path: str | Path) -> None:
        """Per-task accuracy curve for plotting."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["task_id", "seen_classes", "test_samples", "top1", "top5"])
            for t in self.per_task:
                writer.writerow(
                    [t["task_id"], t["seen_classes"], t["test_samples"], t["top1"], t["top5"]]
                )
