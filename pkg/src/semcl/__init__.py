"""Continual learning with frozen text-label embeddings.

Within-task supervision is softened by intra-task label similarity, and
cross-task distillation is guided by inter-task label similarity, on top of a
contrastive image/label objective with exemplar replay.
"""

from .embeddings import EmbeddingTable, LabelEmbedding, embed_labels, load_table, save_table
from .encoder import Encoder, EncoderSnapshot, EncoderSpec
from .errors import ConfigError, ManifestError, ProtocolError, SemclError
from .evaluator import EvalResult, RunReport, evaluate, predict
from .losses import (
    LogitMatrix,
    LossWeights,
    clip_logits,
    contrastive_loss,
    naive_kd_loss,
    sg_kd_loss,
    sg_rl_loss,
    total_loss,
)
from .memory import ExemplarStore, herding_select, replay_batch
from .protocol import (
    FeatureDataset,
    TaskSpec,
    TaskStream,
    build_fewshot_stream,
    build_stream,
    build_stream_from_groups,
    parse_split,
    synth_benchmark,
)
from .semantics import (
    DistillTargetMatrix,
    SoftLabelMatrix,
    distill_targets,
    inter_similarity,
    intra_similarity,
    one_hot_labels,
    soft_labels,
)
from .trainer import MODES, TrainConfig, TrainerState, run_stream, train_task

__version__ = "0.1.0"
