"""Dual-rank bottleneck adapters attached in parallel to linear layers.

Each adapted layer carries two purely linear branches next to the frozen
base layer: a low-rank bottleneck (down-project to ``low_rank`` then back
up) meant to hold knowledge shared across domains, and a high-rank one
(up-project to ``high_rank >= d`` then back down) meant to track the
current domain. Branch outputs are fused residually with per-sample scale
factors, and because everything is linear the branches fold exactly into
the base weight matrix for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LinearLayer, MlpModel, dropout, relu, relu_backward, softmax
from .validation import as_matrix, check_cols


@dataclass
class ScalePair:
    """Fusion weights (high, low) for the two branches.

    Either scalars or per-sample vectors of length ``batch``. Treated as
    constants by the backward pass.
    """

    high: float | np.ndarray
    low: float | np.ndarray

    def columns(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        """Broadcastable (batch, 1) columns for row-wise fusion."""
        return _as_column(self.high, batch, "high"), _as_column(self.low, batch, "low")

    def as_scalars(self) -> tuple[float, float]:
        high, low = self.high, self.low
        if np.ndim(high) != 0 or np.ndim(low) != 0:
            raise ValueError("per-sample scales cannot be folded; supply scalars")
        return float(high), float(low)


NEUTRAL_SCALES = ScalePair(1.0, 1.0)


def _as_column(value, batch: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((batch, 1), float(arr))
    arr = arr.reshape(-1)
    if arr.shape[0] != batch:
        raise ValueError(f"scale '{name}' has length {arr.shape[0]}, batch is {batch}")
    return arr[:, None]


class DualRankAdapter:
    """The four projection matrices of one adapted layer, plus gradients.

    Shapes for a base layer mapping d_in -> d_out:
      low_down  (low_rank, d_in)    high_up   (high_rank, d_in)
      low_up    (d_out, low_rank)   high_down (d_out, high_rank)

    Branches carry no bias and no nonlinearity, which keeps folding exact.
    """

    def __init__(self, low_down, low_up, high_up, high_down):
        self.low_down = as_matrix(low_down, "low_down")
        self.low_up = as_matrix(low_up, "low_up")
        self.high_up = as_matrix(high_up, "high_up")
        self.high_down = as_matrix(high_down, "high_down")
        if self.low_up.shape[1] != self.low_down.shape[0]:
            raise ValueError("low branch ranks disagree")
        if self.high_down.shape[1] != self.high_up.shape[0]:
            raise ValueError("high branch ranks disagree")
        if self.low_down.shape[1] != self.high_up.shape[1]:
            raise ValueError("branch input widths disagree")
        if self.low_up.shape[0] != self.high_down.shape[0]:
            raise ValueError("branch output widths disagree")
        self.low_down_grad = np.zeros_like(self.low_down)
        self.low_up_grad = np.zeros_like(self.low_up)
        self.high_up_grad = np.zeros_like(self.high_up)
        self.high_down_grad = np.zeros_like(self.high_down)

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        low_rank: int,
        high_rank: int,
        rng: np.random.Generator,
        init: str = "zero_out_proj",
        sigma: float = 0.01,
        low_gain: float = 1.0,
        enforce_rank_split: bool = True,
    ) -> "DualRankAdapter":
        """Build a fresh adapter for a d_in -> d_out base layer.

        ``zero_out_proj`` draws the first projection of each branch randomly
        and zeroes the second, so the adapted layer starts out extensionally
        equal to the base layer. The low branch's first projection is scaled
        by ``low_gain * sqrt(high_rank / low_rank)``: the sqrt factor alone
        makes one optimizer step move both branches' functions comparably
        despite the low branch holding far fewer elements, and ``low_gain``
        above 1 makes the rank-limited branch the faster, coarse one.
        ``gaussian`` draws all four matrices from N(0, sigma^2).
        """
        if low_rank < 1:
            raise ValueError("low_rank must be >= 1")
        if high_rank < 1:
            raise ValueError("high_rank must be >= 1")
        if enforce_rank_split:
            if low_rank >= min(d_in, d_out):
                raise ValueError(
                    f"low_rank {low_rank} is not a bottleneck for {d_in}->{d_out}"
                )
            if high_rank < max(d_in, d_out):
                raise ValueError(
                    f"high_rank {high_rank} is below the layer width for {d_in}->{d_out}"
                )
        if init == "zero_out_proj":
            scale = 1.0 / np.sqrt(d_in)
            balance = low_gain * np.sqrt(high_rank / low_rank)
            low_down = rng.normal(0.0, balance * scale, size=(low_rank, d_in))
            high_up = rng.normal(0.0, scale, size=(high_rank, d_in))
            low_up = np.zeros((d_out, low_rank))
            high_down = np.zeros((d_out, high_rank))
        elif init == "gaussian":
            low_down = rng.normal(0.0, sigma, size=(low_rank, d_in))
            high_up = rng.normal(0.0, sigma, size=(high_rank, d_in))
            low_up = rng.normal(0.0, sigma, size=(d_out, low_rank))
            high_down = rng.normal(0.0, sigma, size=(d_out, high_rank))
        else:
            raise ValueError(f"unknown adapter init '{init}'")
        return cls(low_down, low_up, high_up, high_down)

    @property
    def low_rank(self) -> int:
        return self.low_down.shape[0]

    @property
    def high_rank(self) -> int:
        return self.high_up.shape[0]

    def branch_forward(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row branch features: f_h = high_down (high_up f), f_l = low_up (low_down f)."""
        f = as_matrix(f, "f")
        check_cols(f, self.high_up.shape[1], "f")
        f_h = (f @ self.high_up.T) @ self.high_down.T
        f_l = (f @ self.low_down.T) @ self.low_up.T
        return f_h, f_l

    def parameters(self) -> list[np.ndarray]:
        return [self.low_down, self.low_up, self.high_up, self.high_down]

    def gradients(self) -> list[np.ndarray]:
        return [self.low_down_grad, self.low_up_grad, self.high_up_grad, self.high_down_grad]

    def zero_grad(self) -> None:
        for g in self.gradients():
            g[:] = 0.0

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DualRankAdapter":
        out = DualRankAdapter(
            self.low_down.copy(), self.low_up.copy(), self.high_up.copy(), self.high_down.copy()
        )
        for dst, src in zip(out.gradients(), self.gradients()):
            dst[:] = src
        return out


class AdaptedLinear:
    """A frozen base linear layer fused with a trainable dual-rank adapter.

    Forward caches intermediates; backward routes gradients into the four
    adapter matrices only (scaled by the fusion weights) and leaves the
    base parameters and their grads untouched. One in-flight pass per
    instance.
    """

    def __init__(self, base: LinearLayer, adapter: DualRankAdapter):
        if adapter.low_down.shape[1] != base.d_in or adapter.low_up.shape[0] != base.d_out:
            raise ValueError("adapter shapes do not match the base layer")
        base.trainable = False
        self.base = base
        self.adapter = adapter
        self._cache = None

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    def forward(self, x: np.ndarray, scales: ScalePair) -> np.ndarray:
        """f_o + scale_high * f_h + scale_low * f_l, row-wise."""
        x = as_matrix(x, "x")
        check_cols(x, self.d_in, "x")
        col_h, col_l = scales.columns(x.shape[0])
        z_h = x @ self.adapter.high_up.T
        z_l = x @ self.adapter.low_down.T
        f_h = z_h @ self.adapter.high_down.T
        f_l = z_l @ self.adapter.low_up.T
        out = self.base.forward(x) + col_h * f_h + col_l * f_l
        self._cache = (x, z_h, z_l, col_h, col_l)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, z_h, z_l, col_h, col_l = self._cache
        grad_out = as_matrix(grad_out, "grad_out")
        check_cols(grad_out, self.d_out, "grad_out")
        if grad_out.shape[0] != x.shape[0]:
            raise ValueError("grad_out batch size does not match cached forward")
        ad = self.adapter
        g_h = grad_out * col_h
        g_l = grad_out * col_l
        ad.high_down_grad += g_h.T @ z_h
        grad_zh = g_h @ ad.high_down
        ad.high_up_grad += grad_zh.T @ x
        ad.low_up_grad += g_l.T @ z_l
        grad_zl = g_l @ ad.low_up
        ad.low_down_grad += grad_zl.T @ x
        return grad_out @ self.base.weight + grad_zh @ ad.high_up + grad_zl @ ad.low_down

    def fold(self, scales: ScalePair) -> LinearLayer:
        """Collapse both branches into a plain layer with identical function.

        W_eff = W + s_h * (high_down @ high_up) + s_l * (low_up @ low_down);
        the bias is unchanged. Requires scalar scales.
        """
        s_h, s_l = scales.as_scalars()
        ad = self.adapter
        weight = (
            self.base.weight
            + s_h * (ad.high_down @ ad.high_up)
            + s_l * (ad.low_up @ ad.low_down)
        )
        return LinearLayer(weight, self.base.bias.copy(), trainable=True)

    def copy(self) -> "AdaptedLinear":
        return AdaptedLinear(self.base.copy(), self.adapter.copy())


class AdaptedModel:
    """An MLP whose every linear layer carries a dual-rank adapter.

    Mirrors :class:`MlpModel`'s forward structure (ReLU between hidden
    layers, dropout on hidden pre-activations when a generator is passed).
    ``last_hidden`` holds the final hidden activation of the most recent
    forward, for feature-distribution analysis.
    """

    def __init__(self, layers: list[AdaptedLinear], dropout_rate: float = 0.0):
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"layer dims do not chain: {prev.d_out} -> {nxt.d_in}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.layers = layers
        self.dropout_rate = dropout_rate
        self._cache: list[np.ndarray] | None = None
        self.last_hidden: np.ndarray | None = None

    @property
    def class_count(self) -> int:
        return self.layers[-1].d_out

    @property
    def dim_in(self) -> int:
        return self.layers[0].d_in

    def forward(
        self,
        x: np.ndarray,
        scales: ScalePair = NEUTRAL_SCALES,
        rng: np.random.Generator | None = None,
        dropout_rate: float | None = None,
    ) -> np.ndarray:
        rate = self.dropout_rate if dropout_rate is None else dropout_rate
        stochastic = rng is not None and rate > 0.0
        h = as_matrix(x, "x")
        pre_acts: list[np.ndarray] = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer.forward(h, scales)
            if i < last:
                if stochastic:
                    z = dropout(z, rate, rng, active=True)
                pre_acts.append(z)
                h = relu(z)
            else:
                self.last_hidden = h
                h = z
        self._cache = None if stochastic else pre_acts
        return h

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backprop the cached deterministic pass into the adapter grads only."""
        if self._cache is None:
            raise RuntimeError("backward requires a preceding deterministic forward")
        grad = as_matrix(grad_logits, "grad_logits")
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i < last:
                grad = relu_backward(grad, self._cache[i])
            grad = self.layers[i].backward(grad)
        return grad

    def predict_proba(self, x: np.ndarray, scales: ScalePair = NEUTRAL_SCALES) -> np.ndarray:
        return softmax(self.forward(x, scales))

    def adapter_parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.adapter.parameters())
        return out

    def adapter_gradients(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.adapter.gradients())
        return out

    def base_parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend([layer.base.weight, layer.base.bias])
        return out

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.adapter.zero_grad()
            layer.base.zero_grad()

    def fold(self, scales: ScalePair = NEUTRAL_SCALES) -> MlpModel:
        """Plain model computing exactly the fused forward at fixed scales."""
        return MlpModel([layer.fold(scales) for layer in self.layers], dropout_rate=self.dropout_rate)

    def copy(self) -> "AdaptedModel":
        return AdaptedModel([layer.copy() for layer in self.layers], dropout_rate=self.dropout_rate)


def attach_adapters(
    model: MlpModel,
    low_rank: int,
    high_rank: int,
    rng: np.random.Generator,
    init: str = "zero_out_proj",
    sigma: float = 0.01,
    low_gain: float = 1.0,
    enforce_rank_split: bool = True,
) -> AdaptedModel:
    """Attach a dual-rank adapter to every linear layer of ``model``.

    The base layers are copied and frozen, so the source model is left
    untouched. With the default init the returned model is functionally
    identical to the source.
    """
    adapted = []
    for layer in model.layers:
        base = layer.copy()
        adapter = DualRankAdapter.create(
            base.d_in,
            base.d_out,
            low_rank,
            high_rank,
            rng,
            init=init,
            sigma=sigma,
            low_gain=low_gain,
            enforce_rank_split=enforce_rank_split,
        )
        adapted.append(AdaptedLinear(base, adapter))
    return AdaptedModel(adapted, dropout_rate=model.dropout_rate)
