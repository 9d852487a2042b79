"""Per-sample uncertainty gating of the two adapter branches.

Uncertainty is the spread of repeated stochastic (dropout) predictions.
Samples above the threshold get more weight on the high-rank branch, the
rest more weight on the low-rank branch; the two fusion weights always sum
to 2. An inverted mode swaps the assignment and a fixed mode bypasses the
rule entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdaptedModel, NEUTRAL_SCALES, ScalePair
from .layers import softmax

SQRT2 = float(np.sqrt(2.0))

GATE_MODES = ("normal", "inverted", "fixed")


@dataclass
class GateConfig:
    """Knobs for the uncertainty gate.

    passes: number of stochastic forward passes (m), at least 2.
    threshold: uncertainty split point, in (0, sqrt(2)).
    dropout_rate: dropout applied to hidden pre-activations during the passes.
    mode: "normal", "inverted", or "fixed"; fixed uses (fixed_high, fixed_low).
    """

    passes: int = 5
    threshold: float = 0.2
    dropout_rate: float = 0.1
    mode: str = "normal"
    fixed_high: float = 1.0
    fixed_low: float = 1.0

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("passes must be >= 2")
        if not 0.0 < self.threshold < SQRT2:
            raise ValueError(f"threshold must lie in (0, sqrt(2)), got {self.threshold}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.mode not in GATE_MODES:
            raise ValueError(f"mode must be one of {GATE_MODES}, got '{self.mode}'")


def mc_dropout_probs(
    model: AdaptedModel,
    x: np.ndarray,
    cfg: GateConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stack of ``cfg.passes`` row-stochastic predictions, one per dropout mask.

    The passes run with neutral branch scales (1, 1): the gate output is not
    known yet while the gate input is being measured.
    """
    runs = []
    for _ in range(cfg.passes):
        logits = model.forward(x, NEUTRAL_SCALES, rng=rng, dropout_rate=cfg.dropout_rate)
        runs.append(softmax(logits))
    return np.stack(runs, axis=0)


def uncertainty(passes: np.ndarray) -> np.ndarray:
    """Per-sample spread sqrt(mean_i ||p_i - mu||^2) over the pass axis.

    ``passes`` has shape (m, batch, classes); the norm is Euclidean over
    classes and mu is the elementwise mean over the m passes.
    """
    passes = np.asarray(passes, dtype=np.float64)
    if passes.ndim != 3:
        raise ValueError(f"passes must have shape (m, batch, classes), got {passes.shape}")
    mu = passes.mean(axis=0)
    sq = ((passes - mu) ** 2).sum(axis=2).mean(axis=0)
    return np.sqrt(sq)


def allot_scales(u, cfg: GateConfig) -> ScalePair:
    """Map uncertainty to fusion weights.

    u is clamped to [0, 1] first. In normal mode, u >= threshold gives
    (1+u, 1-u) and u < threshold gives (1-u, 1+u); inverted mode swaps the
    two; fixed mode returns the configured constants. Scalars in, scalars
    out; arrays in, per-sample arrays out.
    """
    if cfg.mode == "fixed":
        return ScalePair(cfg.fixed_high, cfg.fixed_low)
    arr = np.asarray(u, dtype=np.float64)
    scalar = arr.ndim == 0
    uc = np.clip(arr, 0.0, 1.0)
    shifted_up = 1.0 + uc
    shifted_down = 1.0 - uc
    big = uc >= cfg.threshold
    high = np.where(big, shifted_up, shifted_down)
    low = np.where(big, shifted_down, shifted_up)
    if cfg.mode == "inverted":
        high, low = low, high
    if scalar:
        return ScalePair(float(high), float(low))
    return ScalePair(high, low)


def gate_batch(
    model: AdaptedModel,
    x: np.ndarray,
    cfg: GateConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ScalePair]:
    """Full gate: stochastic passes -> uncertainty -> per-sample scales.

    In fixed mode no passes are run (and the generator is untouched);
    uncertainty is reported as zeros.
    """
    if cfg.mode == "fixed":
        n = np.asarray(x).shape[0]
        return np.zeros(n), ScalePair(cfg.fixed_high, cfg.fixed_low)
    passes = mc_dropout_probs(model, x, cfg, rng)
    u = uncertainty(passes)
    return u, allot_scales(u, cfg)
