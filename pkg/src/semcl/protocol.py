"""Task-stream construction and the desk-scale synthetic benchmark.

Split grammar follows the two incremental patterns "A+BxC" (A initial classes,
then C steps of B new classes) and "AxB" (B steps of A classes). Semantic
splits (e.g. cats then dogs) are expressed as explicit class-list groups.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .errors import ConfigError, ManifestError

_SPLIT_INITIAL = re.compile(r"^\s*(\d+)\s*\+\s*(\d+)\s*[x×]\s*(\d+)\s*$", re.IGNORECASE)
_SPLIT_EQUAL = re.compile(r"^\s*(\d+)\s*[x×]\s*(\d+)\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class TaskSpec:
    """One task: its position, ordered class labels, and per-class shot cap
    (None = use every training sample)."""

    task_id: int
    labels: tuple[str, ...]
    shots: int | None = None

    def __post_init__(self):
        if self.shots is not None and self.shots < 1:
            raise ConfigError(f"shots must be >= 1 or None, got {self.shots}")
        if not self.labels:
            raise ConfigError(f"task {self.task_id} has no classes")


@dataclass(frozen=True)
class TaskStream:
    """Ordered, disjoint tasks covering a dataset's classes exactly once."""

    tasks: tuple[TaskSpec, ...]
    class_order_seed: int | None = None
    split: str = ""
    dataset_name: str = ""

    def __post_init__(self):
        seen: set[str] = set()
        for task in self.tasks:
            overlap = seen.intersection(task.labels)
            if overlap:
                raise ConfigError(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(task.labels)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def all_labels(self) -> tuple[str, ...]:
        return tuple(lab for task in self.tasks for lab in task.labels)

    def seen_labels(self, through_task: int) -> tuple[str, ...]:
        """Labels of all tasks with id <= through_task, in task order."""
        return tuple(
            lab for task in self.tasks[: through_task + 1] for lab in task.labels
        )

    def describe(self) -> dict:
        return {
            "split": self.split,
            "class_order_seed": self.class_order_seed,
            "dataset": self.dataset_name,
            "tasks": [
                {"task_id": t.task_id, "classes": list(t.labels), "shots": t.shots}
                for t in self.tasks
            ],
        }


def parse_split(split: str) -> list[int]:
    """Expand a split string into per-task class counts."""
    m = _SPLIT_INITIAL.match(split)
    if m:
        a, b, c = (int(g) for g in m.groups())
        return [a] + [b] * c
    m = _SPLIT_EQUAL.match(split)
    if m:
        a, b = (int(g) for g in m.groups())
        return [a] * b
    raise ConfigError(f"split {split!r} does not parse as 'A+BxC' or 'AxB'")


def _default_labels(num_classes: int) -> list[str]:
    return [str(i) for i in range(num_classes)]


def build_stream(
    num_classes: int,
    split: str,
    seed: int,
    labels: Sequence[str] | None = None,
) -> TaskStream:
    """Shuffle classes by ``seed`` and partition them according to ``split``."""
    sizes = parse_split(split)
    if any(s < 1 for s in sizes):
        raise ConfigError(f"split {split!r} contains an empty task")
    total = sum(sizes)
    if total != num_classes:
        raise ConfigError(
            f"split {split!r} covers {total} classes but the dataset has {num_classes}"
        )
    labels = list(labels) if labels is not None else _default_labels(num_classes)
    if len(labels) != num_classes:
        raise ConfigError(f"{len(labels)} labels given for {num_classes} classes")
    order = np.random.default_rng(seed).permutation(num_classes)
    tasks = []
    cursor = 0
    for tid, size in enumerate(sizes):
        chunk = order[cursor : cursor + size]
        tasks.append(TaskSpec(tid, tuple(labels[i] for i in chunk)))
        cursor += size
    return TaskStream(tuple(tasks), class_order_seed=seed, split=split)


def build_fewshot_stream(
    base: int,
    sessions: int,
    ways: int,
    shots: int,
    num_classes: int | None = None,
    labels: Sequence[str] | None = None,
    seed: int = 1993,
) -> TaskStream:
    """Base task with every sample, then ``sessions`` tasks of ``ways`` classes
    capped at ``shots`` training samples each."""
    if min(base, sessions, ways, shots) < 1:
        raise ConfigError("base, sessions, ways and shots must all be >= 1")
    covered = base + sessions * ways
    if num_classes is None:
        num_classes = len(labels) if labels is not None else covered
    if covered != num_classes:
        raise ConfigError(
            f"few-shot split covers {covered} classes (base {base} + {sessions}x{ways}) "
            f"but the dataset has {num_classes}"
        )
    labels = list(labels) if labels is not None else _default_labels(num_classes)
    if len(labels) != num_classes:
        raise ConfigError(f"{len(labels)} labels given for {num_classes} classes")
    order = np.random.default_rng(seed).permutation(num_classes)
    tasks = [TaskSpec(0, tuple(labels[i] for i in order[:base]), shots=None)]
    cursor = base
    for s in range(sessions):
        chunk = order[cursor : cursor + ways]
        tasks.append(TaskSpec(s + 1, tuple(labels[i] for i in chunk), shots=shots))
        cursor += ways
    return TaskStream(
        tuple(tasks), class_order_seed=seed, split=f"{base}+{ways}x{sessions} (few-shot)"
    )


def build_stream_from_groups(
    groups: Sequence[Sequence[str]],
    all_labels: Sequence[str] | None = None,
) -> TaskStream:
    """Explicit class-list split (for semantic two-stage splits and the like)."""
    tasks = tuple(TaskSpec(tid, tuple(group)) for tid, group in enumerate(groups))
    stream = TaskStream(tasks, class_order_seed=None, split="explicit-groups")
    if all_labels is not None:
        missing = set(all_labels) - set(stream.all_labels)
        extra = set(stream.all_labels) - set(all_labels)
        if missing or extra:
            raise ConfigError(
                f"group split must cover the dataset classes exactly "
                f"(missing {sorted(missing)}, unknown {sorted(extra)})"
            )
    return stream


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class FeatureDataset:
    """In-memory feature-vector dataset with train/test split tags."""

    classes: tuple[str, ...]
    features: np.ndarray  # (n, dim) float32
    labels: np.ndarray  # (n,) int64 indices into classes
    train_mask: np.ndarray  # (n,) bool
    name: str = "dataset"

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError("features, labels and train_mask must align row-wise")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValueError("sample label outside the declared class list")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _rows(self, class_names: Sequence[str], train: bool, shots: int | None) -> tuple[np.ndarray, list[str]]:
        index = {c: i for i, c in enumerate(self.classes)}
        xs, names = [], []
        for name in class_names:
            if name not in index:
                raise KeyError(f"class {name!r} not in dataset")
            rows = np.where((self.labels == index[name]) & (self.train_mask == train))[0]
            if shots is not None:
                rows = rows[:shots]
            xs.append(self.features[rows])
            names.extend([name] * rows.size)
        if not xs:
            return np.empty((0, self.dim), dtype=np.float32), []
        return np.concatenate(xs, axis=0), names

    def train_rows(self, class_names: Sequence[str], shots: int | None = None):
        return self._rows(class_names, train=True, shots=shots)

    def test_rows(self, class_names: Sequence[str]):
        return self._rows(class_names, train=False, shots=None)

    def save(self, out_dir: str | Path, name: str | None = None) -> Path:
        """Write payload + manifest; returns the manifest path."""
        name = name or self.name
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = f"{name}.bin"
        self.features.astype("<f4").tofile(out_dir / payload)
        manifest = {
            "classes": list(self.classes),
            "data": payload,
            "samples": [
                {
                    "row": i,
                    "label": int(self.labels[i]),
                    "split": "train" if self.train_mask[i] else "test",
                }
                for i in range(self.features.shape[0])
            ],
        }
        path = out_dir / f"{name}.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path

    @classmethod
    def from_manifest(cls, manifest_path: str | Path) -> "FeatureDataset":
        manifest_path = Path(manifest_path)
        try:
            meta = json.loads(manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
        for key in ("classes", "samples", "data"):
            if key not in meta:
                raise ManifestError(f"dataset manifest missing {key!r} field")
        classes = tuple(meta["classes"])
        flat = np.fromfile(manifest_path.parent / meta["data"], dtype="<f4")
        n = len(meta["samples"])
        if n == 0:
            raise ManifestError("dataset manifest lists no samples")
        if flat.size % n:
            raise ManifestError(
                f"payload has {flat.size} floats which does not divide into {n} samples"
            )
        features = flat.reshape(n, flat.size // n)
        labels = np.empty(n, dtype=np.int64)
        train_mask = np.empty(n, dtype=bool)
        rows = np.empty(n, dtype=np.int64)
        for i, s in enumerate(meta["samples"]):
            if "path" in s:
                raise ManifestError(
                    "image-path samples need an external feature-extraction adapter; "
                    "this package consumes precomputed feature rows"
                )
            if s.get("split") not in ("train", "test"):
                raise ManifestError(f"sample {i} has invalid split {s.get('split')!r}")
            rows[i] = int(s["row"])
            labels[i] = int(s["label"])
            train_mask[i] = s["split"] == "train"
        if rows.min() < 0 or rows.max() >= n:
            raise ManifestError("sample row index outside payload")
        if not np.all(np.isfinite(features)):
            raise ManifestError("dataset payload contains non-finite values")
        return cls(classes, features[rows].copy(), labels, train_mask, name=manifest_path.stem)


# ---------------------------------------------------------------------------
# Synthetic benchmark

# Class embeddings sit at a fixed angle from their cluster center. With
# tan^2(theta) < 1/2 the minimum within-cluster cosine (cos(2*theta)) provably
# exceeds the maximum cross-cluster cosine (sin^2(theta)) because the residual
# directions are orthogonal to every center.
_MAX_CLUSTER_ANGLE_DEG = np.rad2deg(np.arctan(1.0 / np.sqrt(2.0)))  # ~35.26


def cluster_assignments(num_classes: int, semantic_clusters: int) -> np.ndarray:
    """Contiguous cluster id per class index."""
    return (np.arange(num_classes) * semantic_clusters) // num_classes


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Gram-Schmidt on Gaussian rows (avoids BLAS-dependent QR for stability)."""
    basis = np.empty((count, dim), dtype=np.float64)
    made = 0
    while made < count:
        v = rng.standard_normal(dim)
        for row in basis[:made]:
            v -= (v @ row) * row
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            continue
        basis[made] = v / norm
        made += 1
    return basis


def _orthogonal_unit(rng: np.random.Generator, span: np.ndarray, dim: int) -> np.ndarray:
    """Random unit vector orthogonal to every row of ``span``."""
    while True:
        v = rng.standard_normal(dim)
        v -= span.T @ (span @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm


def synth_benchmark(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    intra_spread: float,
    semantic_clusters: int,
    seed: int,
    test_per_class: int = 20,
    modality_gap_deg: float = 0.0,
    cluster_angle_deg: float = 25.0,
) -> tuple[FeatureDataset, EmbeddingTable]:
    """Generate a clustered unit-vector dataset plus its label-embedding table.

    Class embeddings are unit vectors grouped into semantic clusters with a
    guaranteed within > cross cosine margin; samples are the class embedding
    plus isotropic Gaussian noise of scale ``intra_spread``, renormalized.

    ``modality_gap_deg`` rotates each class's sample prototype away from its
    text embedding by a class-specific direction, emulating the image/text
    misalignment of real encoder pairs: zero-shot stays imperfect and a
    trainable encoder has genuine headroom. 0 keeps prototypes exactly on the
    embeddings.

    ``cluster_angle_deg`` sets how far class embeddings sit from their cluster
    center: small angles give tight, fine-grained clusters. Must stay below
    ~35.26 degrees for the within/cross separation guarantee.
    """
    if semantic_clusters < 1 or semantic_clusters > num_classes:
        raise ConfigError("semantic_clusters must be in [1, num_classes]")
    if dim < 2 * semantic_clusters:
        raise ConfigError(
            f"dim={dim} too small to separate {semantic_clusters} clusters "
            f"(need dim >= {2 * semantic_clusters})"
        )
    if samples_per_class < 1 or test_per_class < 1:
        raise ConfigError("samples_per_class and test_per_class must be >= 1")
    if intra_spread < 0:
        raise ConfigError("intra_spread must be >= 0")
    if not 0.0 <= modality_gap_deg < 90.0:
        raise ConfigError("modality_gap_deg must be in [0, 90)")
    if not 0.0 < cluster_angle_deg < _MAX_CLUSTER_ANGLE_DEG:
        raise ConfigError(
            f"cluster_angle_deg must be in (0, {_MAX_CLUSTER_ANGLE_DEG:.2f}) "
            "to guarantee cluster separation"
        )

    rng = np.random.default_rng(seed)
    centers = _orthonormal_rows(rng, semantic_clusters, dim)
    clusters = cluster_assignments(num_classes, semantic_clusters)
    cos_t, sin_t = np.cos(np.deg2rad(cluster_angle_deg)), np.sin(np.deg2rad(cluster_angle_deg))
    emb = np.empty((num_classes, dim), dtype=np.float64)
    for i in range(num_classes):
        residual = _orthogonal_unit(rng, centers, dim)
        emb[i] = cos_t * centers[clusters[i]] + sin_t * residual

    sims = emb @ emb.T
    same = clusters[:, None] == clusters[None, :]
    off = ~np.eye(num_classes, dtype=bool)
    if (same & off).any() and (~same).any():
        assert sims[same & off].min() > sims[~same].max(), "cluster separation violated"

    labels_list = [f"class_{i:03d}" for i in range(num_classes)]
    table = EmbeddingTable(tuple(labels_list), emb)

    gap = np.deg2rad(modality_gap_deg)
    prototypes = emb.copy()
    if gap > 0:
        for i in range(num_classes):
            d = _orthogonal_unit(rng, emb[i : i + 1], dim)
            prototypes[i] = np.cos(gap) * emb[i] + np.sin(gap) * d

    per_class = samples_per_class + test_per_class
    features = np.empty((num_classes * per_class, dim), dtype=np.float64)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    train_mask = np.empty(num_classes * per_class, dtype=bool)
    row = 0
    for i in range(num_classes):
        noise = rng.standard_normal((per_class, dim)) * intra_spread
        x = prototypes[i][None, :] + noise
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        features[row : row + per_class] = x
        labels[row : row + per_class] = i
        train_mask[row : row + per_class] = np.arange(per_class) < samples_per_class
        row += per_class

    dataset = FeatureDataset(
        tuple(labels_list),
        features.astype(np.float32),
        labels,
        train_mask,
        name=f"synth_c{num_classes}_k{semantic_clusters}_d{dim}_s{seed}",
    )
    return dataset, table
