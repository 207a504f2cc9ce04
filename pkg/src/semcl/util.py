"""Small numeric and I/O helpers used by several modules."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


def require_unit_rows(x: np.ndarray, *, tol: float = 1e-4, name: str = "matrix") -> None:
    """Fail fast when rows of ``x`` are not unit Euclidean norm."""
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if x.shape[0] == 0:
        return
    norms = np.linalg.norm(x, axis=1)
    bad = np.where(np.abs(norms - 1.0) > tol)[0]
    if bad.size:
        raise ValueError(
            f"{name} rows must be unit norm; row {bad[0]} has norm {norms[bad[0]]:.6g}"
        )


def stable_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction so large scores never overflow."""
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
