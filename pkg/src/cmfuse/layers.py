"""Parameter containers shared by the encoders, fusion heads and classifier."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add_bias, matmul, mul


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Row-vector affine map ``x @ W (+ b)`` for x of shape (rows, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, name: str = "linear"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = (Tensor(np.zeros((1, out_dim)), requires_grad=True, name=f"{name}.bias")
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add_bias(y, self.bias)
        return y

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None (evaluation)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def count_parameters(params) -> int:
    return int(sum(p.size for p in params))
