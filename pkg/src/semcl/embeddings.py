"""Frozen label-embedding tables.

Text embeddings are produced offline by a pre-trained text encoder and shipped
as files; this module only ingests, validates, and serves them. A table is a
JSON manifest (dim, prompt template, label list, payload path) next to a raw
little-endian float32 payload of shape (#labels, dim).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ManifestError


@dataclass(frozen=True)
class LabelEmbedding:
    """A single class name with its unit-norm embedding vector."""

    label: str
    vector: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding for {self.label!r} has norm {norm:.6g}, expected 1")


@dataclass(frozen=True)
class EmbeddingTable:
    """Immutable label -> unit vector lookup.

    Vectors are renormalized to unit norm on construction (float64), so
    downstream cosine math is exact regardless of how the export rounded.
    """

    labels: tuple[str, ...]
    matrix: np.ndarray  # (len(labels), dim) float64, unit rows
    prompt_template: str = "a photo of a {label}."
    _index: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.labels):
            raise ValueError("matrix shape does not match label count")
        if "{label}" not in self.prompt_template:
            raise ManifestError("prompt template must contain a {label} placeholder")
        seen: dict[str, int] = {}
        for i, lab in enumerate(self.labels):
            if lab in seen:
                raise ManifestError(f"duplicate label {lab!r} in embedding table")
            seen[lab] = i
        m = np.array(self.matrix, dtype=np.float64)
        norms = np.linalg.norm(m, axis=1)
        if not np.all(np.isfinite(m)):
            bad = self.labels[int(np.where(~np.isfinite(m).all(axis=1))[0][0])]
            raise ManifestError(f"non-finite embedding for label {bad!r}")
        if np.any(norms == 0.0):
            bad = self.labels[int(np.where(norms == 0.0)[0][0])]
            raise ManifestError(f"zero embedding for label {bad!r}")
        m /= norms[:, None]
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_index", seen)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def entry(self, label: str) -> LabelEmbedding:
        return LabelEmbedding(label, self.vector(label))

    def vector(self, label: str) -> np.ndarray:
        try:
            return self.matrix[self._index[label]]
        except KeyError:
            raise KeyError(f"label {label!r} not in embedding table") from None

    def prompt_for(self, label: str) -> str:
        """The templated prompt the offline text encoder saw for ``label``."""
        return self.prompt_template.format(label=label)

    def require_labels(self, labels: Sequence[str]) -> None:
        """Hard error at load/setup time if any label is missing."""
        missing = [lab for lab in labels if lab not in self._index]
        if missing:
            raise ManifestError(f"embedding table is missing labels: {missing}")


def embed_labels(table: EmbeddingTable, labels: Sequence[str]) -> np.ndarray:
    """Stack embeddings for ``labels`` in the given order, shape (K, dim)."""
    if not labels:
        return np.empty((0, table.dim), dtype=np.float64)
    try:
        rows = [table._index[lab] for lab in labels]
    except KeyError as exc:
        raise KeyError(f"label {exc.args[0]!r} not in embedding table") from None
    return table.matrix[np.array(rows, dtype=np.intp)]


def load_table(manifest_path: str | Path) -> EmbeddingTable:
    """Load and validate an embedding table from its JSON manifest."""
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read embedding manifest {manifest_path}: {exc}") from exc
    for key in ("dim", "labels", "data"):
        if key not in meta:
            raise ManifestError(f"embedding manifest missing {key!r} field")
    dim = int(meta["dim"])
    labels = list(meta["labels"])
    template = meta.get("template", "a photo of a {label}.")
    payload_path = manifest_path.parent / meta["data"]
    try:
        raw = payload_path.read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read embedding payload {payload_path}: {exc}") from exc
    expected = len(labels) * dim * 4
    if len(raw) != expected:
        raise ManifestError(
            f"embedding payload {payload_path} has {len(raw)} bytes, "
            f"expected {expected} ({len(labels)} labels x {dim} dims x 4 bytes)"
        )
    matrix = np.frombuffer(raw, dtype="<f4").reshape(len(labels), dim)
    return EmbeddingTable(tuple(labels), matrix.astype(np.float64), prompt_template=template)


def save_table(
    table_or_matrix: EmbeddingTable | np.ndarray,
    labels: Sequence[str] | None,
    out_dir: str | Path,
    name: str = "embeddings",
    template: str | None = None,
) -> Path:
    """Write a table to ``out_dir`` in the manifest+payload format; returns the manifest path."""
    if isinstance(table_or_matrix, EmbeddingTable):
        matrix = table_or_matrix.matrix
        labels = list(table_or_matrix.labels)
        template = template or table_or_matrix.prompt_template
    else:
        matrix = np.asarray(table_or_matrix)
        if labels is None:
            raise ValueError("labels are required when saving a raw matrix")
        labels = list(labels)
        template = template or "a photo of a {label}."
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = f"{name}.bin"
    matrix.astype("<f4").tofile(out_dir / payload)
    manifest = {
        "dim": int(matrix.shape[1]),
        "template": template,
        "labels": labels,
        "data": payload,
    }
    manifest_path = out_dir / f"{name}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
