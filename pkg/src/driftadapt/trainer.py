"""Teacher-student continual adaptation on unlabeled batch streams.

The student adapts its branch weights to match soft teacher predictions on
jittered inputs; the teacher trails the student as an exponential moving
average. Base weights never move, so the source model can always be
recovered exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaptedModel, attach_adapters
from .gating import GateConfig, gate_batch
from .layers import MlpModel, soft_cross_entropy, soft_cross_entropy_grad, softmax
from .optim import Adam
from .validation import as_matrix

# Multiplier list mirrors the usual multi-resolution augmentation ladder.
DEFAULT_SCALE_FACTORS = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)

AUGMENT_KINDS = ("gaussian_jitter", "feature_scale")


@dataclass
class AugmentConfig:
    """Input perturbation for the teacher pass.

    gaussian_jitter adds N(0, sigma^2) noise; feature_scale multiplies each
    sample by a factor drawn uniformly from ``factors``.
    """

    kind: str = "gaussian_jitter"
    sigma: float = 0.05
    factors: tuple[float, ...] = DEFAULT_SCALE_FACTORS

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"kind must be one of {AUGMENT_KINDS}, got '{self.kind}'")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.factors:
            raise ValueError("factors must be non-empty")


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = as_matrix(x, "x")
    if cfg.kind == "gaussian_jitter":
        if cfg.sigma == 0.0:
            return x
        return x + rng.normal(0.0, cfg.sigma, size=x.shape)
    factors = np.asarray(cfg.factors, dtype=np.float64)
    picks = factors[rng.integers(0, len(factors), size=x.shape[0])]
    return x * picks[:, None]


def pseudo_label(teacher: AdaptedModel, x_aug: np.ndarray, scales) -> np.ndarray:
    """Soft teacher predictions (dropout off) used as consistency targets."""
    return softmax(teacher.forward(x_aug, scales))


@dataclass
class TeacherStudent:
    """Two structurally identical adapted models plus the EMA coefficient."""

    teacher: AdaptedModel
    student: AdaptedModel
    alpha: float = 0.999
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        shapes_t = [p.shape for p in self.teacher.adapter_parameters()]
        shapes_s = [p.shape for p in self.student.adapter_parameters()]
        if shapes_t != shapes_s:
            raise RuntimeError("teacher and student are structurally different")

    @classmethod
    def from_source(
        cls,
        source: MlpModel,
        low_rank: int,
        high_rank: int,
        rng: np.random.Generator,
        alpha: float = 0.999,
        init: str = "zero_out_proj",
        sigma: float = 0.01,
        low_gain: float = 1.0,
        enforce_rank_split: bool = True,
    ) -> "TeacherStudent":
        """Attach adapters to the source checkpoint and clone into a pair."""
        student = attach_adapters(
            source,
            low_rank,
            high_rank,
            rng,
            init=init,
            sigma=sigma,
            low_gain=low_gain,
            enforce_rank_split=enforce_rank_split,
        )
        return cls(teacher=student.copy(), student=student, alpha=alpha)


def ema_update(ts: TeacherStudent) -> None:
    """Teacher trainable params become alpha * teacher + (1 - alpha) * student.

    Frozen base weights are equal by construction and are left alone.
    """
    t_params = ts.teacher.adapter_parameters()
    s_params = ts.student.adapter_parameters()
    if len(t_params) != len(s_params):
        raise RuntimeError("teacher and student are structurally different")
    a = ts.alpha
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise RuntimeError("teacher and student are structurally different")
        t *= a
        t += (1.0 - a) * s


@dataclass
class AdaptOutcome:
    """Everything observed during one online step, captured pre-update."""

    loss: float
    student_probs: np.ndarray
    teacher_probs: np.ndarray
    uncertainty: np.ndarray
    features: np.ndarray


def adapt_step(
    ts: TeacherStudent,
    x: np.ndarray,
    gate_cfg: GateConfig,
    opt: Adam,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
) -> AdaptOutcome:
    """One online adaptation step on an unlabeled batch.

    The teacher sees a jittered copy of the batch: its stochastic passes set
    the per-sample branch scales and its deterministic pass provides the
    soft targets. The student scores the original batch with the same
    scales; the consistency loss then updates the student's adapter weights
    only, and the teacher is refreshed by EMA.
    """
    x = as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ValueError("batch is empty")
    x_aug = augment(x, aug_cfg, rng)
    u, scales = gate_batch(ts.teacher, x_aug, gate_cfg, rng)
    y_tilde = pseudo_label(ts.teacher, x_aug, scales)
    student_logits = ts.student.forward(x, scales)
    y_hat = softmax(student_logits)
    features = np.array(ts.student.last_hidden)
    teacher_probs = softmax(ts.teacher.forward(x, scales))
    loss = soft_cross_entropy(y_tilde, y_hat)
    ts.student.backward(soft_cross_entropy_grad(y_tilde, y_hat))
    opt.step(ts.student.adapter_gradients())
    ts.student.zero_grad()
    ts.step += 1
    ema_update(ts)
    return AdaptOutcome(
        loss=loss,
        student_probs=y_hat,
        teacher_probs=teacher_probs,
        uncertainty=u,
        features=features,
    )


@dataclass
class DomainResult:
    """Per-domain aggregates from one pass over a stream."""

    domain_index: int
    kind: str
    severity: float
    error: float
    teacher_error: float
    mean_loss: float
    features: np.ndarray
    labels: np.ndarray


@dataclass
class StreamResult:
    domains: list[DomainResult] = field(default_factory=list)

    @property
    def per_domain_errors(self) -> list[float]:
        return [d.error for d in self.domains]

    @property
    def mean_error(self) -> float:
        errors = self.per_domain_errors
        return float(np.mean(errors)) if errors else float("nan")


def run_stream(
    ts: TeacherStudent,
    stream,
    gate_cfg: GateConfig,
    opt: Adam,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
) -> StreamResult:
    """Visit every target batch once, in order: score it, then adapt on it.

    The recorded error is the student's, taken from the same forward pass
    that feeds the adaptation step (the model state as the batch arrives);
    the teacher's error on the original batch is logged alongside.
    """
    if not stream.domains:
        raise ValueError("stream has no target domains")
    result = StreamResult()
    for domain in stream.domains:
        if not domain.batches:
            raise ValueError(f"domain {domain.index} has no batches")
        s_hits, t_hits, total = 0, 0, 0
        losses = []
        feats = []
        labels = []
        for x, y in domain.batches:
            y = np.asarray(y)
            outcome = adapt_step(ts, x, gate_cfg, opt, aug_cfg, rng)
            s_hits += int((outcome.student_probs.argmax(axis=1) == y).sum())
            t_hits += int((outcome.teacher_probs.argmax(axis=1) == y).sum())
            total += len(y)
            losses.append(outcome.loss)
            feats.append(outcome.features)
            labels.append(y)
        result.domains.append(
            DomainResult(
                domain_index=domain.index,
                kind=domain.spec.kind,
                severity=domain.spec.severity,
                error=1.0 - s_hits / total,
                teacher_error=1.0 - t_hits / total,
                mean_loss=float(np.mean(losses)),
                features=np.vstack(feats),
                labels=np.concatenate(labels),
            )
        )
    return result
