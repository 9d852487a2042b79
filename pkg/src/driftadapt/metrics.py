"""Distribution-shift analysis: histogram divergences and class dispersion.

Feature matrices are flattened into one scalar distribution, binned over a
shared range, smoothed, and compared with KL / Jensen-Shannon divergence.
Intra-class divergence measures how tightly each class clusters around its
centroid, normalized across the classes of a domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMOOTHING = 1e-10

NORMALIZERS = ("minmax_over_classes", "divide_by_max")


@dataclass
class FeatureHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    probs: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def histogram_features(values, n_bins: int = 1000, value_range=None) -> FeatureHistogram:
    """Equal-width histogram of all entries of ``values``, smoothed.

    Out-of-range values clamp into the edge bins. Every bin receives an
    additive 1e-10 before normalization so downstream divergences never
    divide by zero; with no samples at all the probs are uniform.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size and not np.all(np.isfinite(flat)):
        raise ValueError("values contain non-finite entries")
    if value_range is None:
        if flat.size == 0:
            raise ValueError("value_range is required for empty input")
        lo, hi = float(flat.min()), float(flat.max())
        if hi <= lo:
            lo, hi = lo - 0.5, lo + 0.5
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
        if hi <= lo:
            raise ValueError(f"degenerate range [{lo}, {hi}]")
    edges = np.linspace(lo, hi, n_bins + 1)
    counts = np.zeros(n_bins, dtype=np.int64)
    if flat.size:
        idx = np.floor((flat - lo) / (hi - lo) * n_bins).astype(np.int64)
        np.clip(idx, 0, n_bins - 1, out=idx)
        np.add.at(counts, idx, 1)
    smoothed = counts + SMOOTHING
    probs = smoothed / smoothed.sum()
    return FeatureHistogram(bin_edges=edges, counts=counts, probs=probs)


def kl_divergence(p, q) -> float:
    """sum_i p_i * log(p_i / q_i), natural log; zero p entries contribute 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        raise ValueError("q must be positive wherever p is")
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def js_divergence(p, q) -> float:
    """Symmetrized divergence 0.5*KL(p||m) + 0.5*KL(q||m), m the midpoint."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def feature_js(
    features_a: np.ndarray,
    features_b: np.ndarray,
    n_bins: int = 1000,
    mode: str = "flat",
) -> float:
    """JS divergence between two feature matrices.

    "flat" pools all entries of each matrix into one scalar histogram over
    the observed joint range; "per_dim" histograms each column separately
    and averages the per-dimension divergences.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if mode == "flat":
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if hi <= lo:
            lo, hi = lo - 0.5, lo + 0.5
        ha = histogram_features(a, n_bins, (lo, hi))
        hb = histogram_features(b, n_bins, (lo, hi))
        return js_divergence(ha.probs, hb.probs)
    if mode == "per_dim":
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ValueError("per_dim mode needs 2-D inputs with matching width")
        vals = []
        for j in range(a.shape[1]):
            lo = min(a[:, j].min(), b[:, j].min())
            hi = max(a[:, j].max(), b[:, j].max())
            if hi <= lo:
                lo, hi = lo - 0.5, lo + 0.5
            ha = histogram_features(a[:, j], n_bins, (lo, hi))
            hb = histogram_features(b[:, j], n_bins, (lo, hi))
            vals.append(js_divergence(ha.probs, hb.probs))
        return float(np.mean(vals))
    raise ValueError(f"unknown mode '{mode}'")


def raw_intra_class_divergence(members: np.ndarray) -> float:
    """Mean squared Euclidean distance of class members to their centroid."""
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 2 or members.shape[0] == 0:
        raise ValueError("class needs a non-empty 2-D member matrix")
    mu = members.mean(axis=0)
    return float(((members - mu) ** 2).sum(axis=1).mean())


def intra_class_divergence(features_by_class: dict, normalizer: str = "minmax_over_classes") -> dict:
    """Normalized per-class dispersion, in [0, 1] across the given classes.

    minmax_over_classes maps the smallest raw value to 0 and the largest to
    1; divide_by_max divides by the largest. Degenerate spreads (all raw
    values equal, or all zero) normalize to 0.
    """
    if normalizer not in NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    if not features_by_class:
        raise ValueError("no classes given")
    raw = {c: raw_intra_class_divergence(m) for c, m in features_by_class.items()}
    vals = np.array(list(raw.values()))
    if normalizer == "minmax_over_classes":
        lo, hi = vals.min(), vals.max()
        span = hi - lo
        if span == 0.0:
            return {c: 0.0 for c in raw}
        return {c: float((v - lo) / span) for c, v in raw.items()}
    hi = vals.max()
    if hi == 0.0:
        return {c: 0.0 for c in raw}
    return {c: float(v / hi) for c, v in raw.items()}


def group_by_class(features: np.ndarray, labels: np.ndarray) -> dict:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree on sample count")
    return {int(c): features[labels == c] for c in np.unique(labels)}


def per_domain_error(predictions, labels) -> float:
    """Fraction of argmax mismatches; predictions may be prob rows or class ids."""
    preds = np.asarray(predictions)
    labels = np.asarray(labels).reshape(-1)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    else:
        preds = preds.reshape(-1)
    if preds.shape[0] != labels.shape[0]:
        raise ValueError("predictions and labels disagree on sample count")
    return float((preds != labels).mean())
