"""Pluggable vision-side encoder producing unit-norm features.

Desk-scale "images" are feature vectors, either synthetic or precomputed by a
real backbone offline. The encoder is a small block stack (each hidden
linear+tanh pair is one block, the final projection is the last block) whose
trailing ``trainable_tail`` blocks receive gradients; everything earlier is
frozen, mirroring the fine-tune-the-last-block regime.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

KINDS = ("toy-mlp", "external-features")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "toy-mlp"
    input_dim: int = 64
    feature_dim: int = 64
    hidden: tuple[int, ...] = ()
    trainable_tail: int = 1
    init: str = "uniform"  # "uniform" (+-1/sqrt(fan_in)) or "identity"
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ConfigError("encoder dimensions must be positive")
        n_blocks = len(self.hidden) + 1
        if not 0 <= self.trainable_tail <= n_blocks:
            raise ConfigError(
                f"trainable_tail={self.trainable_tail} exceeds the {n_blocks} encoder blocks"
            )
        if self.init not in ("uniform", "identity"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.init == "identity" and (self.hidden or self.input_dim != self.feature_dim):
            raise ConfigError("identity init requires no hidden blocks and square dimensions")

    @property
    def num_blocks(self) -> int:
        return len(self.hidden) + 1


class Encoder(nn.Module):
    """Block-stack feature encoder with L2-normalized outputs."""

    def __init__(self, spec: EncoderSpec, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec
        widths = [spec.input_dim, *spec.hidden, spec.feature_dim]
        self.blocks = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        )
        self._init_params()
        self.to(dtype)
        self._apply_tail_freeze()

    def _init_params(self) -> None:
        rng = np.random.default_rng(self.spec.init_seed)
        for layer in self.blocks:
            fan_in = layer.in_features
            if self.spec.init == "identity":
                w = np.eye(layer.out_features, fan_in)
                b = np.zeros(layer.out_features)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(layer.out_features, fan_in))
                b = rng.uniform(-bound, bound, size=layer.out_features)
            with torch.no_grad():
                layer.weight.copy_(torch.as_tensor(w))
                layer.bias.copy_(torch.as_tensor(b))

    def _apply_tail_freeze(self) -> None:
        frozen = len(self.blocks) - self.spec.trainable_tail
        for i, layer in enumerate(self.blocks):
            requires = i >= frozen
            layer.weight.requires_grad_(requires)
            layer.bias.requires_grad_(requires)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.encode(batch)

    def encode(self, batch: torch.Tensor) -> torch.Tensor:
        """Map a (N, input_dim) batch to unit-norm (N, feature_dim) features."""
        if batch.ndim != 2 or batch.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"expected batch of shape (N, {self.spec.input_dim}), got {tuple(batch.shape)}"
            )
        x = batch.to(self.blocks[0].weight.dtype)
        last = len(self.blocks) - 1
        for i, layer in enumerate(self.blocks):
            x = layer(x)
            if i < last:
                x = torch.tanh(x)
        bad = ~torch.isfinite(x).all(dim=1)
        if bad.any():
            raise FloatingPointError(
                f"non-finite activations for batch row {int(bad.nonzero()[0, 0])}"
            )
        norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
        tiny = (norms.squeeze(1) < 1e-12).nonzero()
        if tiny.numel():
            raise FloatingPointError(
                f"zero-norm feature for batch row {int(tiny[0, 0])}; cannot normalize"
            )
        return x / norms

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Exactly the parameters of the last ``trainable_tail`` blocks."""
        return [p for p in self.parameters() if p.requires_grad]

    def snapshot(self) -> "EncoderSnapshot":
        return EncoderSnapshot(self)


class EncoderSnapshot:
    """Deep, detached copy of an encoder at a task boundary.

    Forward passes are no-grad and bit-stable: later training of the live
    encoder cannot touch this copy.
    """

    def __init__(self, encoder: Encoder | "EncoderSnapshot"):
        src = encoder._module if isinstance(encoder, EncoderSnapshot) else encoder
        module = copy.deepcopy(src)
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self._module = module
        self.spec = module.spec

    @torch.no_grad()
    def encode(self, batch: torch.Tensor) -> torch.Tensor:
        return self._module.encode(batch)

    def snapshot(self) -> "EncoderSnapshot":
        return EncoderSnapshot(self)

    def state_dict(self):
        return self._module.state_dict()
