"""Dense network substrate: linear layers, softmax, losses, dropout, MLP.

All math is float64 and every gradient is derived by hand; there is no
autodiff. Layers accumulate parameter gradients in place, so one training
step is forward -> backward -> optimizer step -> zero_grad.
"""

from __future__ import annotations

import numpy as np

from .validation import as_matrix, as_vector, check_cols, check_prob_rows, check_same_shape

LOG_CLAMP = 1e-12


class LinearLayer:
    """Affine map ``y = x @ W.T + b`` with in-place gradient accumulation.

    ``weight`` is (d_out, d_in) so a row of the output is ``weight @ x_row + bias``.
    """

    def __init__(self, weight, bias, trainable: bool = True):
        self.weight = as_matrix(weight, "weight")
        self.bias = as_vector(bias, "bias")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match d_out {self.weight.shape[0]}"
            )
        self.weight_grad = np.zeros_like(self.weight)
        self.bias_grad = np.zeros_like(self.bias)
        self.trainable = trainable

    @classmethod
    def random(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: float | None = None):
        """He-style init: N(0, 1/d_in) weights, zero bias."""
        if scale is None:
            scale = 1.0 / np.sqrt(d_in)
        return cls(rng.normal(0.0, scale, size=(d_out, d_in)), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_matrix(x, "x")
        check_cols(x, self.d_in, "x")
        return x @ self.weight.T + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for the pass ``forward(x)`` and return dL/dx."""
        x = as_matrix(x, "x")
        grad_out = as_matrix(grad_out, "grad_out")
        check_cols(x, self.d_in, "x")
        check_cols(grad_out, self.d_out, "grad_out")
        if x.shape[0] != grad_out.shape[0]:
            raise ValueError("x and grad_out disagree on batch size")
        self.weight_grad += grad_out.T @ x
        self.bias_grad += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grad(self) -> None:
        self.weight_grad[:] = 0.0
        self.bias_grad[:] = 0.0

    def copy(self) -> "LinearLayer":
        out = LinearLayer(self.weight.copy(), self.bias.copy(), trainable=self.trainable)
        out.weight_grad = self.weight_grad.copy()
        out.bias_grad = self.bias_grad.copy()
        return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    return grad_out * (pre_activation > 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = as_matrix(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_cross_entropy(y_tilde: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean over the batch of ``-(1/C) * sum_c y_tilde[c] * log y_hat[c]``.

    ``y_hat`` is clamped below at 1e-12 before the log so the value stays
    finite for degenerate predictions.
    """
    y_tilde = check_prob_rows(y_tilde, "y_tilde")
    y_hat = check_prob_rows(y_hat, "y_hat")
    check_same_shape(y_tilde, y_hat, "y_tilde/y_hat")
    c = y_tilde.shape[1]
    logs = np.log(np.maximum(y_hat, LOG_CLAMP))
    return float(-(y_tilde * logs).sum(axis=1).mean() / c)


def soft_cross_entropy_grad(y_tilde: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`soft_cross_entropy` w.r.t. the logits behind ``y_hat``.

    Valid for ``y_hat = softmax(logits)`` and row-stochastic targets:
    d/dz = (y_hat - y_tilde) / (C * batch).
    """
    y_tilde = check_prob_rows(y_tilde, "y_tilde")
    y_hat = check_prob_rows(y_hat, "y_hat")
    check_same_shape(y_tilde, y_hat, "y_tilde/y_hat")
    batch, c = y_hat.shape
    return (y_hat - y_tilde) / (c * batch)


def hard_cross_entropy(labels: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean negative log-likelihood of integer class labels."""
    y_hat = check_prob_rows(y_hat, "y_hat")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    picked = y_hat[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())


def hard_cross_entropy_grad(labels: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`hard_cross_entropy` w.r.t. the logits behind ``y_hat``."""
    y_hat = check_prob_rows(y_hat, "y_hat")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    grad = y_hat.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, active: bool = True) -> np.ndarray:
    """Inverted dropout: zero entries with probability ``rate``, scale survivors.

    Identity when inactive or ``rate == 0``; in that case the generator is not
    consumed, which keeps rng trajectories comparable across configurations.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_matrix(x, "x")
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs a random generator")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate)


class MlpModel:
    """Plain ReLU multilayer perceptron over row-feature matrices.

    Hidden layers are followed by ReLU; dropout (when a generator is passed
    to :meth:`forward`) acts on each hidden layer's pre-activation output.
    The final layer emits logits for ``class_count`` classes.
    """

    def __init__(self, layers: list[LinearLayer], dropout_rate: float = 0.0):
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(
                    f"layer dims do not chain: {prev.d_out} -> {nxt.d_in}"
                )
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.layers = layers
        self.dropout_rate = dropout_rate
        self._cache: list[tuple[np.ndarray, np.ndarray]] | None = None
        self.last_hidden: np.ndarray | None = None

    @classmethod
    def init(
        cls,
        dim_in: int,
        hidden: tuple[int, ...] | list[int],
        class_count: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
    ) -> "MlpModel":
        dims = [dim_in, *hidden, class_count]
        layers = [LinearLayer.random(a, b, rng) for a, b in zip(dims, dims[1:])]
        return cls(layers, dropout_rate=dropout_rate)

    @property
    def class_count(self) -> int:
        return self.layers[-1].d_out

    @property
    def dim_in(self) -> int:
        return self.layers[0].d_in

    def forward(
        self,
        x: np.ndarray,
        rng: np.random.Generator | None = None,
        dropout_rate: float | None = None,
    ) -> np.ndarray:
        """Return logits. Dropout is active only when ``rng`` is given.

        A deterministic pass caches activations for :meth:`backward`; a
        stochastic pass invalidates the cache instead.
        """
        rate = self.dropout_rate if dropout_rate is None else dropout_rate
        stochastic = rng is not None and rate > 0.0
        h = as_matrix(x, "x")
        cache: list[tuple[np.ndarray, np.ndarray]] = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer.forward(h)
            if i < last:
                if stochastic:
                    z = dropout(z, rate, rng, active=True)
                cache.append((h, z))
                h = relu(z)
            else:
                cache.append((h, z))
                self.last_hidden = h
                h = z
        self._cache = None if stochastic else cache
        return h

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backprop through the cached deterministic forward pass."""
        if self._cache is None:
            raise RuntimeError("backward requires a preceding deterministic forward")
        grad = as_matrix(grad_logits, "grad_logits")
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            x_in, z = self._cache[i]
            if i < last:
                grad = relu_backward(grad, z)
            grad = self.layers[i].backward(x_in, grad)
        return grad

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x))

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def gradients(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend([layer.weight_grad, layer.bias_grad])
        return out

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers], dropout_rate=self.dropout_rate)
