"""Continual test-time adaptation with dual-rank adapters on dense models.

A source-pretrained classifier gains two purely linear bottleneck branches
per layer (a low-rank one for domain-shared knowledge and a high-rank one
for the current domain), fused residually with per-sample scales set by a
dropout-based uncertainty gate. Adaptation runs online on unlabeled
batches through a teacher-student consistency loss, and the branches fold
exactly back into plain weights for deployment.
"""

from .adapters import (
    AdaptedLinear,
    AdaptedModel,
    DualRankAdapter,
    ScalePair,
    attach_adapters,
)
from .datasets import DomainSpec, DomainStream, generate_stream
from .estimators import ContinualAdapter, MlpClassifier
from .gating import GateConfig, allot_scales, mc_dropout_probs, uncertainty
from .harness import (
    RunConfig,
    RunReport,
    run_ablation,
    run_ctta,
    run_dg,
    run_metrics,
    run_multiround,
)
from .layers import LinearLayer, MlpModel, soft_cross_entropy, softmax
from .metrics import (
    histogram_features,
    intra_class_divergence,
    js_divergence,
    kl_divergence,
    per_domain_error,
)
from .optim import Adam
from .serialize import WeightsFormatError, load_weights, save_weights
from .trainer import AugmentConfig, TeacherStudent, adapt_step, augment, ema_update, run_stream

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdaptedLinear",
    "AdaptedModel",
    "AugmentConfig",
    "ContinualAdapter",
    "DomainSpec",
    "DomainStream",
    "DualRankAdapter",
    "GateConfig",
    "LinearLayer",
    "MlpClassifier",
    "MlpModel",
    "RunConfig",
    "RunReport",
    "ScalePair",
    "TeacherStudent",
    "WeightsFormatError",
    "adapt_step",
    "allot_scales",
    "attach_adapters",
    "augment",
    "ema_update",
    "generate_stream",
    "histogram_features",
    "intra_class_divergence",
    "js_divergence",
    "kl_divergence",
    "load_weights",
    "mc_dropout_probs",
    "per_domain_error",
    "run_ablation",
    "run_ctta",
    "run_dg",
    "run_metrics",
    "run_multiround",
    "run_stream",
    "save_weights",
    "soft_cross_entropy",
    "softmax",
    "uncertainty",
]
