"""Experiment protocols and machine-readable reports.

Wires the pieces together: synthetic stream generation, source
pretraining, the online adaptation protocol, its multi-round and
domain-generalization variants, the component ablation grid, and CSV/JSON
report emission. Everything is deterministic in (seed, config).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import ScalePair
from .datasets import DomainStream, generate_stream
from .estimators import MlpClassifier
from .gating import GateConfig, gate_batch
from .layers import MlpModel, softmax
from .metrics import feature_js, group_by_class, intra_class_divergence, per_domain_error
from .optim import Adam
from .trainer import (
    AugmentConfig,
    DomainResult,
    StreamResult,
    TeacherStudent,
    run_stream,
)

ABLATION_VARIANTS = (
    "source",
    "high_only",
    "low_only",
    "both_fixed",
    "both_hka",
    "both_ihka",
    "two_low",
    "two_high",
)

# rng namespaces so protocols draw independent, reproducible streams
_TAG_PRETRAIN = 1
_TAG_ATTACH = 2
_TAG_ADAPT = 3
_TAG_EVAL = 4


@dataclass
class RunConfig:
    """Every knob of the harness; mirrors the CLI flags and config file."""

    # data / stream
    class_count: int = 4
    dim: int = 16
    n_domains: int = 8
    batches_per_domain: int = 50
    batch_size: int = 32
    source_size: int = 4096
    radius: float = 3.0
    spread: float = 1.0
    severity: float = 1.0
    # source model / pretraining
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 30
    pretrain_batch_size: int = 64
    pretrain_lr: float = 1e-3
    # adaptation method; lr, alpha and dropout_rate are re-tuned for the
    # 400-step toy protocol (the literature values target far longer runs)
    method: str = "adapt"
    dl: int = 1
    dh: int = 128
    alpha: float = 0.99
    lr: float = 5e-3
    hka_mode: str = "normal"
    hka_m: int = 5
    hka_theta: float = 0.2
    dropout_rate: float = 0.25
    lambda_high: float = 1.0
    lambda_low: float = 1.0
    augment_kind: str = "gaussian_jitter"
    augment_sigma: float = 0.05
    adapter_init: str = "zero_out_proj"
    low_gain: float = 2.0
    # protocol
    rounds: int = 1
    adapt_domains: int = 4
    # analysis
    n_bins: int = 1000
    js_mode: str = "flat"
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("adapt", "source"):
            raise ValueError(f"method must be 'adapt' or 'source', got '{self.method}'")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def gate_config(self) -> GateConfig:
        return GateConfig(
            passes=self.hka_m,
            threshold=self.hka_theta,
            dropout_rate=self.dropout_rate,
            mode=self.hka_mode,
            fixed_high=self.lambda_high,
            fixed_low=self.lambda_low,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(kind=self.augment_kind, sigma=self.augment_sigma)


def tagged_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))


def build_stream(cfg: RunConfig, means=None, specs=None) -> DomainStream:
    return generate_stream(
        class_count=cfg.class_count,
        dim=cfg.dim,
        n_domains=cfg.n_domains,
        batches_per_domain=cfg.batches_per_domain,
        batch_size=cfg.batch_size,
        source_size=cfg.source_size,
        radius=cfg.radius,
        spread=cfg.spread,
        severity=cfg.severity,
        seed=cfg.seed,
        means=means,
        specs=specs,
    )


def pretrain_source(cfg: RunConfig, stream: DomainStream | None = None) -> tuple[MlpClassifier, dict]:
    """Fit the plain source classifier on the stream's labeled source data."""
    if stream is None:
        stream = build_stream(cfg)
    clf = MlpClassifier(
        hidden_layer_sizes=cfg.hidden,
        epochs=cfg.epochs,
        batch_size=cfg.pretrain_batch_size,
        learning_rate=cfg.pretrain_lr,
        random_state=int(tagged_rng(cfg.seed, _TAG_PRETRAIN).integers(0, 2**31)),
    )
    clf.fit(stream.source_x, stream.source_y)
    train_error = per_domain_error(clf.predict_proba(stream.source_x), stream.source_y)
    summary = {
        "train_error": train_error,
        "final_loss": clf.loss_curve_[-1] if clf.loss_curve_ else float("nan"),
        "epochs": cfg.epochs,
    }
    return clf, summary


def build_pair(source: MlpModel, cfg: RunConfig) -> TeacherStudent:
    # equal ranks are the same-structure ablation pairs; skip the split check there
    return TeacherStudent.from_source(
        source,
        cfg.dl,
        cfg.dh,
        tagged_rng(cfg.seed, _TAG_ATTACH),
        alpha=cfg.alpha,
        init=cfg.adapter_init,
        low_gain=cfg.low_gain,
        enforce_rank_split=cfg.dl != cfg.dh,
    )


def evaluate_frozen(model: MlpModel, stream: DomainStream) -> StreamResult:
    """Score every domain with the plain model; no state changes anywhere."""
    result = StreamResult()
    for domain in stream.domains:
        hits, total = 0, 0
        feats, labels = [], []
        for x, y in domain.batches:
            probs = softmax(model.forward(x))
            hits += int((probs.argmax(axis=1) == np.asarray(y)).sum())
            total += len(y)
            feats.append(np.array(model.last_hidden))
            labels.append(np.asarray(y))
        err = 1.0 - hits / total
        result.domains.append(
            DomainResult(
                domain_index=domain.index,
                kind=domain.spec.kind,
                severity=domain.spec.severity,
                error=err,
                teacher_error=err,
                mean_loss=float("nan"),
                features=np.vstack(feats),
                labels=np.concatenate(labels),
            )
        )
    return result


def source_hidden_features(model: MlpModel, stream: DomainStream) -> np.ndarray:
    model.forward(stream.source_x)
    return np.array(model.last_hidden)


def metric_rows(
    source_features: np.ndarray,
    result: StreamResult,
    cfg: RunConfig,
) -> list[dict]:
    """Shift metrics per domain: JS against the previous domain's features
    (the source for the first domain) and mean normalized class dispersion."""
    rows = []
    prev = source_features
    for dom in result.domains:
        js = feature_js(dom.features, prev, n_bins=cfg.n_bins, mode=cfg.js_mode)
        by_class = group_by_class(dom.features, dom.labels)
        norm = intra_class_divergence(by_class)
        rows.append(
            {
                "domain_index": dom.domain_index,
                "js_prev_domain": js,
                "mean_intra_class_divergence": float(np.mean(list(norm.values()))),
                "error": dom.error,
            }
        )
        prev = dom.features
    return rows


@dataclass
class RunReport:
    """Rows plus summary; serializes to report.csv and report.json.

    ``state`` optionally carries the final in-memory model pair for callers
    that persist weights; it never enters the serialized report.
    """

    protocol: str
    seed: int
    config: dict
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    state: object = field(default=None, repr=False, compare=False)

    def to_json_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "config": self.config,
            "columns": self.columns,
            "rows": self.rows,
            "summary": self.summary,
        }

    def csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_format_cell(row.get(c)) for c in self.columns))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "report.csv"
        json_path = out / "report.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_json_dict(), indent=1) + "\n")
        return csv_path, json_path


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


CTTA_COLUMNS = [
    "round",
    "domain_index",
    "kind",
    "severity",
    "error",
    "teacher_error",
    "source_error",
    "js_prev_domain",
    "mean_intra_class_divergence",
    "mean_loss",
]


def _ctta_rows(
    round_index: int,
    result: StreamResult,
    frozen: StreamResult,
    metrics: list[dict],
) -> list[dict]:
    rows = []
    for dom, frz, met in zip(result.domains, frozen.domains, metrics):
        rows.append(
            {
                "round": round_index,
                "domain_index": dom.domain_index,
                "kind": dom.kind,
                "severity": dom.severity,
                "error": dom.error,
                "teacher_error": dom.teacher_error,
                "source_error": frz.error,
                "js_prev_domain": met["js_prev_domain"],
                "mean_intra_class_divergence": met["mean_intra_class_divergence"],
                "mean_loss": dom.mean_loss,
            }
        )
    return rows


def run_ctta(source: MlpModel, stream: DomainStream, cfg: RunConfig) -> RunReport:
    """One pass over the target sequence; the online protocol of the task.

    Scoring uses the model state as each batch arrives (pre-adaptation);
    the frozen-source baseline over the same stream provides the gain.
    """
    return run_multiround(source, stream, replace(cfg, rounds=1))


def run_multiround(source: MlpModel, stream: DomainStream, cfg: RunConfig) -> RunReport:
    """Repeat the same target sequence ``cfg.rounds`` times without resetting."""
    if cfg.rounds < 1:
        raise ValueError("rounds must be >= 1")
    source_feats = source_hidden_features(source, stream)
    frozen = evaluate_frozen(source, stream)
    rows: list[dict] = []
    per_round_means: list[float] = []
    ts = None
    if cfg.method == "source":
        metrics = metric_rows(source_feats, frozen, cfg)
        for r in range(1, cfg.rounds + 1):
            rows.extend(_ctta_rows(r, frozen, frozen, metrics))
            per_round_means.append(frozen.mean_error)
    else:
        ts = build_pair(source, cfg)
        opt = Adam(ts.student.adapter_parameters(), lr=cfg.lr)
        rng = tagged_rng(cfg.seed, _TAG_ADAPT)
        for r in range(1, cfg.rounds + 1):
            result = run_stream(ts, stream, cfg.gate_config(), opt, cfg.augment_config(), rng)
            metrics = metric_rows(source_feats, result, cfg)
            rows.extend(_ctta_rows(r, result, frozen, metrics))
            per_round_means.append(result.mean_error)
    errors = [row["error"] for row in rows]
    mean_error = float(np.mean(errors))
    summary = {
        "mean_error": mean_error,
        "per_round_means": per_round_means,
        "per_domain_errors_last_round": [
            row["error"] for row in rows if row["round"] == cfg.rounds
        ],
        "source_mean_error": frozen.mean_error,
        "source_per_domain_errors": frozen.per_domain_errors,
        "gain": frozen.mean_error - mean_error,
        "evaluation_timing": "pre_adaptation",
    }
    protocol = "ctta" if cfg.rounds == 1 else "multiround"
    return RunReport(
        protocol=protocol,
        seed=cfg.seed,
        config=cfg.to_dict(),
        columns=CTTA_COLUMNS,
        rows=rows,
        summary=summary,
        state=ts,
    )


def _parameter_checksum(ts: TeacherStudent) -> str:
    digest = hashlib.sha256()
    for model in (ts.teacher, ts.student):
        for p in model.base_parameters() + model.adapter_parameters():
            digest.update(p.tobytes())
    return digest.hexdigest()


def _gated_frozen_eval(
    ts: TeacherStudent,
    domains,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> list[dict]:
    """Score domains with the adapted pair's gated inference, updating nothing."""
    gate_cfg = cfg.gate_config()
    rows = []
    for domain in domains:
        hits, total = 0, 0
        for x, y in domain.batches:
            _, scales = gate_batch(ts.teacher, x, gate_cfg, rng)
            probs = softmax(ts.student.forward(x, scales))
            hits += int((probs.argmax(axis=1) == np.asarray(y)).sum())
            total += len(y)
        rows.append({"domain": domain, "error": 1.0 - hits / total})
    return rows


def run_dg(source: MlpModel, stream: DomainStream, cfg: RunConfig) -> RunReport:
    """Adapt on the first ``cfg.adapt_domains`` domains, then freeze and
    score the remaining domains with no parameter updates."""
    k = cfg.adapt_domains
    n = len(stream.domains)
    if not 1 <= k < n:
        raise ValueError(f"adapt_domains must lie in [1, {n - 1}], got {k}")
    if cfg.method != "adapt":
        raise ValueError("run_dg requires method='adapt'")
    seen = replace(stream, domains=stream.domains[:k])
    frozen = evaluate_frozen(source, stream)
    ts = build_pair(source, cfg)
    opt = Adam(ts.student.adapter_parameters(), lr=cfg.lr)
    rng = tagged_rng(cfg.seed, _TAG_ADAPT)
    adapt_result = run_stream(ts, seen, cfg.gate_config(), opt, cfg.augment_config(), rng)
    checksum_before = _parameter_checksum(ts)
    eval_rng = tagged_rng(cfg.seed, _TAG_EVAL)
    unseen_rows = _gated_frozen_eval(ts, stream.domains[k:], cfg, eval_rng)
    checksum_after = _parameter_checksum(ts)
    if checksum_before != checksum_after:
        raise RuntimeError("parameters changed during unseen-domain evaluation")
    rows = []
    for dom, frz in zip(adapt_result.domains, frozen.domains[:k]):
        rows.append(
            {
                "phase": "adapt",
                "domain_index": dom.domain_index,
                "kind": dom.kind,
                "severity": dom.severity,
                "error": dom.error,
                "source_error": frz.error,
            }
        )
    for row, frz in zip(unseen_rows, frozen.domains[k:]):
        dom = row["domain"]
        rows.append(
            {
                "phase": "unseen",
                "domain_index": dom.index,
                "kind": dom.spec.kind,
                "severity": dom.spec.severity,
                "error": row["error"],
                "source_error": frz.error,
            }
        )
    unseen_adapted = [r["error"] for r in rows if r["phase"] == "unseen"]
    unseen_source = [r["source_error"] for r in rows if r["phase"] == "unseen"]
    summary = {
        "adapt_domains": k,
        "adapt_mean_error": adapt_result.mean_error,
        "unseen_mean_error": float(np.mean(unseen_adapted)),
        "unseen_source_mean_error": float(np.mean(unseen_source)),
        "unseen_gain": float(np.mean(unseen_source) - np.mean(unseen_adapted)),
        "parameters_frozen_during_unseen_eval": True,
        "parameter_checksum": checksum_after,
    }
    return RunReport(
        protocol="dg",
        seed=cfg.seed,
        config=cfg.to_dict(),
        columns=["phase", "domain_index", "kind", "severity", "error", "source_error"],
        rows=rows,
        summary=summary,
        state=ts,
    )


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """Translate an ablation variant name into a concrete configuration."""
    if variant == "source":
        return replace(cfg, method="source", rounds=1)
    base = replace(cfg, method="adapt", rounds=1)
    if variant == "high_only":
        return replace(base, hka_mode="fixed", lambda_high=1.0, lambda_low=0.0)
    if variant == "low_only":
        return replace(base, hka_mode="fixed", lambda_high=0.0, lambda_low=1.0)
    if variant == "both_fixed":
        return replace(base, hka_mode="fixed", lambda_high=1.0, lambda_low=1.0)
    if variant == "both_hka":
        return replace(base, hka_mode="normal")
    if variant == "both_ihka":
        return replace(base, hka_mode="inverted")
    if variant == "two_low":
        return replace(base, hka_mode="fixed", lambda_high=1.0, lambda_low=1.0, dh=cfg.dl)
    if variant == "two_high":
        return replace(base, hka_mode="fixed", lambda_high=1.0, lambda_low=1.0, dl=cfg.dh)
    raise ValueError(f"unknown ablation variant '{variant}'")


def run_ablation(
    source: MlpModel,
    stream: DomainStream,
    cfg: RunConfig,
    variants=ABLATION_VARIANTS,
) -> RunReport:
    """Run each variant on the identical stream and compare mean errors."""
    variants = list(variants)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant '{v}'")
    frozen = evaluate_frozen(source, stream)
    rows = []
    variant_means: dict[str, float] = {}
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        if variant == "source":
            result = frozen
        else:
            ts = build_pair(source, vcfg)
            opt = Adam(ts.student.adapter_parameters(), lr=vcfg.lr)
            rng = tagged_rng(vcfg.seed, _TAG_ADAPT)
            result = run_stream(ts, stream, vcfg.gate_config(), opt, vcfg.augment_config(), rng)
        variant_means[variant] = result.mean_error
        for dom in result.domains:
            rows.append(
                {
                    "variant": variant,
                    "domain_index": dom.domain_index,
                    "kind": dom.kind,
                    "severity": dom.severity,
                    "error": dom.error,
                    "source_error": frozen.domains[dom.domain_index].error,
                }
            )
    summary = {
        "variant_means": variant_means,
        "variant_gains": {v: frozen.mean_error - m for v, m in variant_means.items()},
        "source_mean_error": frozen.mean_error,
    }
    return RunReport(
        protocol="ablate",
        seed=cfg.seed,
        config=cfg.to_dict(),
        columns=["variant", "domain_index", "kind", "severity", "error", "source_error"],
        rows=rows,
        summary=summary,
    )


def run_metrics(model: MlpModel, stream: DomainStream, cfg: RunConfig) -> RunReport:
    """Shift analysis of a fixed model over a stream: no adaptation at all."""
    source_feats = source_hidden_features(model, stream)
    frozen = evaluate_frozen(model, stream)
    metrics = metric_rows(source_feats, frozen, cfg)
    summary = {
        "mean_error": frozen.mean_error,
        "mean_js": float(np.mean([m["js_prev_domain"] for m in metrics])),
    }
    return RunReport(
        protocol="metrics",
        seed=cfg.seed,
        config=cfg.to_dict(),
        columns=["domain_index", "js_prev_domain", "mean_intra_class_divergence", "error"],
        rows=metrics,
        summary=summary,
    )


def fold_checkpoint(model, scale_high: float = 1.0, scale_low: float = 1.0) -> MlpModel:
    """Collapse an adapted checkpoint into a plain model at fixed scales."""
    if isinstance(model, MlpModel):
        return model
    return model.fold(ScalePair(scale_high, scale_low))
