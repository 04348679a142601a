"""Small MLP feature extractor with exact manual gradients.

Architecture: obs_dim -> hidden layers (ReLU) -> embedding dim, followed
by column-wise l2 normalization. The backward pass applies the
normalization Jacobian (I - u u^T) / ||z|| by hand, so no autodiff
framework is involved anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ZERO_NORM_FLOOR, FeatureMatrix, ShapeMismatchError


@dataclass
class ForwardCache:
    """Intermediate activations needed by the backward pass."""

    inputs: np.ndarray                 # (obs_dim, m)
    pre_activations: list[np.ndarray]  # z_l per layer, before nonlinearity
    hidden: list[np.ndarray]           # post-ReLU activations per hidden layer
    prenorm: np.ndarray                # final layer output before normalization
    norms: np.ndarray                  # clamped column norms of prenorm
    outputs: np.ndarray                # unit columns


class Encoder:
    """Trainable feature extractor phi mapping observations to unit vectors."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ShapeMismatchError("weights and biases must pair up, one per layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatchError("each bias must match its weight's output dim")

    @classmethod
    def initialize(cls, layer_sizes: tuple[int, ...], rng: np.random.Generator) -> "Encoder":
        """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        if len(layer_sizes) < 2:
            raise ShapeMismatchError("need at least input and output sizes")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in declaration order: W1, b1, W2, b2, ..."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        expected = self.parameters()
        if len(params) != len(expected):
            raise ShapeMismatchError(f"expected {len(expected)} parameter arrays")
        for target, source in zip(expected, params):
            if target.shape != np.shape(source):
                raise ShapeMismatchError("parameter shape mismatch")
            target[...] = source

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def embed(self, observations: np.ndarray) -> np.ndarray:
        """Raw (d, m) unit-column embeddings without gradient bookkeeping."""
        return self._run(observations)[0]

    def forward(self, observations: np.ndarray) -> tuple[FeatureMatrix, ForwardCache]:
        """Encode a batch of observation columns, caching activations."""
        outputs, cache = self._run(observations, keep_cache=True)
        assert cache is not None
        return FeatureMatrix(outputs), cache

    def _run(self, observations: np.ndarray,
             keep_cache: bool = False) -> tuple[np.ndarray, ForwardCache | None]:
        a = np.asarray(observations, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != self.weights[0].shape[1]:
            raise ShapeMismatchError(
                f"expected ({self.weights[0].shape[1]}, m) observations, got {a.shape}"
            )
        if not np.all(np.isfinite(a)):
            raise ValueError("observations contain non-finite entries")
        inputs = a
        pre_activations: list[np.ndarray] = []
        hidden: list[np.ndarray] = []
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ a + b[:, None]
            pre_activations.append(z)
            if idx < len(self.weights) - 1:
                a = np.maximum(z, 0.0)
                hidden.append(a)
        prenorm = pre_activations[-1]
        norms = np.maximum(np.linalg.norm(prenorm, axis=0), ZERO_NORM_FLOOR)
        outputs = prenorm / norms
        cache = None
        if keep_cache:
            cache = ForwardCache(
                inputs=inputs,
                pre_activations=pre_activations,
                hidden=hidden,
                prenorm=prenorm,
                norms=norms,
                outputs=outputs,
            )
        return outputs, cache

    def backward(self, cache: ForwardCache, grad_outputs: np.ndarray) -> list[np.ndarray]:
        """Exact parameter gradients given upstream gradients on the unit
        outputs, in the same order as ``parameters()``.

        The normalization Jacobian annihilates the radial direction:
        g_z = (g_u - u (u . g_u)) / ||z||.
        """
        grad_outputs = np.asarray(grad_outputs, dtype=np.float64)
        if grad_outputs.shape != cache.outputs.shape:
            raise ShapeMismatchError(
                f"upstream gradient shape {grad_outputs.shape} does not match "
                f"outputs {cache.outputs.shape}"
            )
        u = cache.outputs
        radial = (u * grad_outputs).sum(axis=0, keepdims=True)
        grad = (grad_outputs - u * radial) / cache.norms

        grads_w: list[np.ndarray] = [np.zeros(0)] * len(self.weights)
        grads_b: list[np.ndarray] = [np.zeros(0)] * len(self.biases)
        for idx in range(len(self.weights) - 1, -1, -1):
            below = cache.hidden[idx - 1] if idx > 0 else cache.inputs
            grads_w[idx] = grad @ below.T
            grads_b[idx] = grad.sum(axis=1)
            if idx > 0:
                grad = self.weights[idx].T @ grad
                grad = grad * (cache.pre_activations[idx - 1] > 0.0)

        out: list[np.ndarray] = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        return out
