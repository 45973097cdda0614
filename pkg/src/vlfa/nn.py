"""Small MLP building blocks and an Adam optimizer on top of `tensor`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        scale = np.sqrt(2.0 / n_in)
        self.name = name
        self.weight = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias.broadcast_to(y.shape)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Fully connected network with ReLU between layers (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp"):
        self.sizes = list(sizes)
        self.name = name
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = tn.relu(h)
        return h

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass for inference."""
        h = np.asarray(x, dtype=self.layers[0].weight.data.dtype)
        for i, layer in enumerate(self.layers):
            h = h @ layer.weight.data + layer.bias.data
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state_dict(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        prefix = self.name if prefix is None else prefix
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight.data
            out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str | None = None) -> None:
        prefix = self.name if prefix is None else prefix
        for i, layer in enumerate(self.layers):
            layer.weight = Tensor(state[f"{prefix}.{i}.weight"], requires_grad=True)
            layer.bias = Tensor(state[f"{prefix}.{i}.bias"], requires_grad=True)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer-style timestep embedding, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
