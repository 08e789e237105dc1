"""Few-shot prototypical learning and demographic evaluation over embedding
manifests: a trainable projection head with hand-written backprop, episodic
meta-training, nearest-prototype classification, and a nested-shot testing
protocol with per-class authentication-rate reporting."""

from .checkpoint import load_head, load_head_file, save_head, save_head_file
from .evaluator import EvalReport, run_assignment, run_protocol
from .head import BatchNormState, HeadParams, head_backward, head_forward, init_head
from .optim import AdamState, CosineSchedule, adam_step, clip_grad_norm, cosine_lr
from .protonet import (
    PrototypeSet,
    VerificationPair,
    bce_loss,
    classify,
    compute_prototypes,
    cross_entropy,
    episode_logits,
    euclidean_distance,
    verification_pairs,
    verification_score,
)
from .store import (
    DatasetManifest,
    EmbeddingRecord,
    Split,
    concat_features,
    load_manifest,
    load_manifest_file,
    nested_support_query,
    save_manifest,
    save_manifest_file,
    synthesize_clusters,
    vit_only_view,
)
from .trainer import Episode, EpisodeConfig, TrainHistory, episode_loss, sample_episode, train, validate

__version__ = "0.1.0"
