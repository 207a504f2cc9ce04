"""Per-task training loop and the full-stream experiment driver.

Each task trains the encoder tail with SGD (momentum + weight decay, constant
within-task learning rate) on batches drawn from the union of current-task
samples and replayed exemplars. Supervision follows the selected mode:
contrastive only (ft), contrastive plus identity targets (one-hot), softened
semantic targets (sg-rl), and optionally distillation toward the previous
snapshot, either plain (sg-rl+naive-kd) or with semantic prior targets (full).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .embeddings import EmbeddingTable, embed_labels
from .encoder import Encoder, EncoderSnapshot, EncoderSpec
from .errors import ConfigError, ProtocolError
from .evaluator import RunReport, evaluate
from .losses import (
    LossWeights,
    clip_logits,
    contrastive_loss,
    naive_kd_loss,
    select_target_rows,
    sg_kd_loss,
    sg_rl_loss,
    total_loss,
)
from .memory import ExemplarStore
from .protocol import FeatureDataset, TaskSpec, TaskStream
from .semantics import distill_targets, inter_similarity, intra_similarity, one_hot_labels, soft_labels

MODES = ("ft", "one-hot", "sg-rl", "sg-rl+naive-kd", "full")
_KD_MODES = ("sg-rl+naive-kd", "full")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization regime. Defaults are the full-shot reference values; use
    :meth:`desk_scale` for quick CPU experiments and :meth:`fewshot` for the
    few-shot regime (lower learning rate, no exemplar memory)."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 256
    epochs: int = 10
    epochs_override: tuple[tuple[str, int], ...] = ()  # (dataset name, epochs) pairs
    mode: str = "full"
    weights: LossWeights = LossWeights()
    alpha: float = 13.0
    beta: float = 100.0
    tau: float = 0.1
    exemplars_per_class: int = 20
    seed: int = 1993

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lr", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.exemplars_per_class < 0:
            raise ConfigError("exemplars_per_class must be >= 0")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        defaults = {"batch_size": 64, "epochs": 5}
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def fewshot(cls, **overrides) -> "TrainConfig":
        defaults = {"lr": 0.001, "exemplars_per_class": 0}
        defaults.update(overrides)
        return cls(**defaults)

    def epochs_for(self, dataset_name: str) -> int:
        for name, epochs in self.epochs_override:
            if name == dataset_name:
                return epochs
        return self.epochs

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "epochs_override": list(map(list, self.epochs_override)),
            "mode": self.mode,
            "lambda1": self.weights.lambda1,
            "lambda2": self.weights.lambda2,
            "mu": self.weights.mu,
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "exemplars_per_class": self.exemplars_per_class,
            "seed": self.seed,
        }


@dataclass
class TrainerState:
    """Mutable cross-task state owned by the driver."""

    encoder: Encoder
    table: EmbeddingTable
    dataset: FeatureDataset
    store: ExemplarStore
    rng: np.random.Generator
    prev: EncoderSnapshot | None = None
    completed: list[TaskSpec] = field(default_factory=list)
    traces: dict[str, list[dict]] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        dataset: FeatureDataset,
        table: EmbeddingTable,
        cfg: TrainConfig,
        encoder_spec: EncoderSpec | None = None,
    ) -> "TrainerState":
        if encoder_spec is None:
            if dataset.dim != table.dim:
                raise ConfigError(
                    "no default encoder for mismatched dims "
                    f"(data {dataset.dim}, embeddings {table.dim}); pass an EncoderSpec"
                )
            encoder_spec = EncoderSpec(
                kind="external-features",
                input_dim=dataset.dim,
                feature_dim=table.dim,
                hidden=(),
                trainable_tail=1,
                init="identity",
                init_seed=cfg.seed,
            )
        return cls(
            encoder=Encoder(encoder_spec),
            table=table,
            dataset=dataset,
            store=ExemplarStore(m=cfg.exemplars_per_class),
            rng=np.random.default_rng(cfg.seed),
        )

    @property
    def seen_labels(self) -> list[str]:
        return [lab for task in self.completed for lab in task.labels]


def compute_batch_losses(
    encoder: Encoder,
    prev: EncoderSnapshot | None,
    cfg: TrainConfig,
    first_task: bool,
    batch_x: torch.Tensor,
    batch_y: torch.Tensor,
    text_active: torch.Tensor,
    soft_targets,
    old_text: torch.Tensor | None,
    kd_targets,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """One batch's (total, contrastive, soft-label, distillation) losses."""
    features = encoder.encode(batch_x)
    task_logits = clip_logits(features, text_active, cfg.beta).values

    # Square matched-pair matrix: column j holds each image against sample j's
    # own class embedding; duplicate classes are masked inside the loss.
    pair_logits = task_logits[:, batch_y]
    l_con = contrastive_loss(pair_logits, labels=batch_y)

    zero = torch.zeros((), dtype=l_con.dtype)
    l_rl = zero
    if cfg.mode != "ft":
        l_rl = sg_rl_loss(task_logits, batch_y, soft_targets)

    l_kd = zero
    if not first_task and cfg.mode in _KD_MODES:
        prev_features = prev.encode(batch_x)
        cur_old = clip_logits(features, old_text, cfg.beta).values
        prev_old = clip_logits(prev_features, old_text, cfg.beta).values
        if cfg.mode == "full":
            rows = select_target_rows(kd_targets, batch_y)
            l_kd = sg_kd_loss(cur_old, prev_old, rows, cfg.weights.mu)
        else:
            l_kd = naive_kd_loss(cur_old, prev_old)

    l_total = total_loss(l_con, l_rl, l_kd, cfg.weights, first_task)
    return l_total, l_con, l_rl, l_kd


def train_task(state: TrainerState, task: TaskSpec, cfg: TrainConfig) -> TrainerState:
    """Train one task in place and extend memory + snapshot; returns ``state``."""
    first_task = task.task_id == 0
    if first_task != (state.prev is None):
        raise ProtocolError(
            f"task {task.task_id}: previous snapshot {'missing' if state.prev is None else 'present'}"
        )
    old_labels = state.seen_labels
    overlap = set(task.labels) & set(old_labels)
    if overlap:
        raise ProtocolError(f"task classes {sorted(overlap)} were already trained")

    # Active label set: current classes plus the classes replay can inject.
    active_labels = list(task.labels) + state.store.classes
    state.table.require_labels(active_labels + old_labels)
    active_emb = embed_labels(state.table, active_labels)
    dtype = next(state.encoder.parameters()).dtype
    text_active = torch.as_tensor(active_emb, dtype=dtype)

    soft_targets = None
    if cfg.mode == "one-hot":
        soft_targets = one_hot_labels(len(active_labels), class_order=active_labels)
    elif cfg.mode != "ft":
        soft_targets = soft_labels(intra_similarity(active_emb), cfg.alpha, active_labels)

    old_text = None
    kd_targets = None
    if not first_task and cfg.mode in _KD_MODES:
        old_emb = embed_labels(state.table, old_labels)
        old_text = torch.as_tensor(old_emb, dtype=dtype)
        if cfg.mode == "full":
            kd_targets = distill_targets(
                inter_similarity(active_emb, old_emb), cfg.tau, active_labels, old_labels
            )

    cur_x, cur_names = state.dataset.train_rows(task.labels, shots=task.shots)
    ex_x, ex_names = state.store.union()
    if ex_x.size:
        pool_x = np.concatenate([cur_x, ex_x], axis=0)
        pool_names = cur_names + ex_names
    else:
        pool_x, pool_names = cur_x, cur_names
    if pool_x.shape[0] == 0:
        raise ProtocolError(f"task {task.task_id} has no training samples")
    active_index = {lab: i for i, lab in enumerate(active_labels)}
    pool_y = np.array([active_index[name] for name in pool_names], dtype=np.int64)

    params = state.encoder.trainable_parameters()
    optimizer = (
        torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        if params
        else None
    )

    epochs = cfg.epochs_for(state.dataset.name)
    trace: list[dict] = []
    n = pool_x.shape[0]
    for epoch in range(epochs):
        order = state.rng.permutation(n)
        sums = {"contrastive": 0.0, "sg_rl": 0.0, "kd": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_x = torch.as_tensor(pool_x[idx], dtype=dtype)
            batch_y = torch.as_tensor(pool_y[idx])
            l_total, l_con, l_rl, l_kd = compute_batch_losses(
                state.encoder, state.prev, cfg, first_task, batch_x, batch_y,
                text_active, soft_targets, old_text, kd_targets,
            )
            if not torch.isfinite(l_total):
                raise FloatingPointError(
                    f"non-finite loss at task {task.task_id} epoch {epoch} "
                    f"batch {n_batches}: contrastive={float(l_con.detach())}, "
                    f"sg_rl={float(l_rl.detach())}, kd={float(l_kd.detach())}"
                )
            if optimizer is not None:
                optimizer.zero_grad()
                l_total.backward()
                optimizer.step()
            sums["contrastive"] += float(l_con.detach())
            sums["sg_rl"] += float(l_rl.detach())
            sums["kd"] += float(l_kd.detach())
            sums["total"] += float(l_total.detach())
            n_batches += 1
        trace.append(
            {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        )
    state.traces[str(task.task_id)] = trace

    # Herding runs on features from the encoder state at the end of the
    # class's own task; exemplar sets are never recomputed later.
    if cfg.exemplars_per_class > 0:
        with torch.no_grad():
            for label in task.labels:
                class_x, _ = state.dataset.train_rows([label], shots=task.shots)
                feats = state.encoder.encode(torch.as_tensor(class_x, dtype=dtype))
                state.store.add_class(label, class_x, feats.numpy().astype(np.float64))

    state.prev = state.encoder.snapshot()
    state.completed.append(task)
    return state


def run_stream(
    stream: TaskStream,
    cfg: TrainConfig,
    dataset: FeatureDataset,
    table: EmbeddingTable,
    encoder_spec: EncoderSpec | None = None,
    checkpoint_dir: Path | None = None,
) -> RunReport:
    """Train all tasks in order, evaluating on the cumulative test set after each.

    With ``checkpoint_dir`` set, each task leaves ``task<t>/{params.pt, store/,
    report.json}`` behind for resumption and inspection.
    """
    if set(stream.all_labels) != set(dataset.classes):
        raise ProtocolError("stream classes must cover the dataset classes exactly")
    table.require_labels(stream.all_labels)
    state = TrainerState.create(dataset, table, cfg, encoder_spec)

    config_echo = cfg.to_dict()
    config_echo["encoder"] = {
        "kind": state.encoder.spec.kind,
        "input_dim": state.encoder.spec.input_dim,
        "feature_dim": state.encoder.spec.feature_dim,
        "hidden": list(state.encoder.spec.hidden),
        "trainable_tail": state.encoder.spec.trainable_tail,
        "init": state.encoder.spec.init,
        "init_seed": state.encoder.spec.init_seed,
    }
    config_echo["dataset"] = dataset.name
    report = RunReport(config=config_echo, stream=stream.describe(), seed=cfg.seed)

    expected_test = 0
    class_index = {c: i for i, c in enumerate(dataset.classes)}
    for task in stream:
        state = train_task(state, task, cfg)
        seen = stream.seen_labels(task.task_id)
        result = evaluate(state.encoder, table, dataset, seen)
        for lab in task.labels:
            expected_test += int(
                np.sum((dataset.labels == class_index[lab]) & ~dataset.train_mask)
            )
        if result.n_samples != expected_test:
            raise ProtocolError(
                f"evaluation used {result.n_samples} test samples, expected {expected_test}"
            )
        report.add_task(task.task_id, result, seen=len(seen), store_size=len(state.store))
        if checkpoint_dir is not None:
            task_dir = Path(checkpoint_dir) / f"task{task.task_id}"
            task_dir.mkdir(parents=True, exist_ok=True)
            torch.save(state.encoder.state_dict(), task_dir / "params.pt")
            state.store.save(task_dir / "store")
            partial = RunReport(
                config=config_echo, stream=report.stream, seed=cfg.seed,
                per_task=list(report.per_task), loss_traces=dict(state.traces),
            )
            partial.save_json(task_dir / "report.json")
    report.loss_traces = state.traces
    return report
