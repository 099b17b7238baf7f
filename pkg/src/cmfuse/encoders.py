"""Unimodal encoders: attention MIL pooling for tile bags, a feed-forward net for omics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, dropout
from .tensor import (
    DimensionError,
    Tensor,
    matmul,
    mul,
    relu,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

IMAGE_DIM = 1024
FEATURE_DIM = 128


class EmptyBagError(ValueError):
    pass


@dataclass
class InstanceBag:
    instances: np.ndarray  # (K, image_dim)
    patient_id: str = ""

    def __post_init__(self):
        if self.instances.ndim != 2 or self.instances.shape[0] == 0:
            raise EmptyBagError(f"bag {self.patient_id!r} has no tiles")

    @property
    def n_tiles(self) -> int:
        return self.instances.shape[0]


class AmilParams:
    """Attention-MIL encoder weights.

    ``variant="gated"`` scores tiles with ``w . (tanh(V h) * sigmoid(U h))``;
    ``"plain"`` drops the sigmoid gate and ``U``.
    """

    def __init__(self, rng: np.random.Generator, image_dim: int = IMAGE_DIM,
                 embed_dim: int = 512, attn_dim: int = 256, out_dim: int = FEATURE_DIM,
                 variant: str = "gated", dropout: float = 0.0):
        if variant not in ("gated", "plain"):
            raise ValueError(f"unknown AMIL variant {variant!r}")
        self.variant = variant
        self.image_dim = image_dim
        self.dropout = dropout
        self.embed = Linear(image_dim, embed_dim, rng, name="amil.embed")
        self.attn_V = Linear(embed_dim, attn_dim, rng, bias=False, name="amil.attn_V")
        self.attn_U = (Linear(embed_dim, attn_dim, rng, bias=False, name="amil.attn_U")
                       if variant == "gated" else None)
        self.attn_w = Linear(attn_dim, 1, rng, bias=False, name="amil.attn_w")
        self.project = Linear(embed_dim, out_dim, rng, name="amil.project")

    @property
    def out_dim(self) -> int:
        return self.project.out_dim

    def parameters(self) -> list[Tensor]:
        layers = [self.embed, self.attn_V, self.attn_U, self.attn_w, self.project]
        return [p for layer in layers if layer is not None for p in layer.parameters()]


def amil_encode(bag: InstanceBag | np.ndarray | Tensor, params: AmilParams,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Pool a bag of tile features into one patient vector.

    Returns ``(feature, tile_attention)`` with shapes (1, out_dim) and (K, 1).
    ``rng`` is only used for dropout during training.
    """
    x = bag
    if isinstance(x, InstanceBag):
        x = x.instances
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptyBagError("empty bag")
        x = Tensor(x)
    if x.cols != params.image_dim:
        raise DimensionError(f"bag has {x.cols} channels, encoder expects {params.image_dim}")

    h = dropout(relu(params.embed(x)), params.dropout, rng)
    a = tanh(params.attn_V(h))
    if params.attn_U is not None:
        a = mul(a, sigmoid(params.attn_U(h)))
    scores = params.attn_w(a)  # (K, 1)
    attention = softmax(scores)
    pooled = matmul(transpose(attention), h)  # (1, embed_dim)
    return params.project(pooled), attention


class FnnParams:
    def __init__(self, rng: np.random.Generator, n_genes: int = 154, hidden: int = 256,
                 out_dim: int = FEATURE_DIM, dropout: float = 0.0):
        self.n_genes = n_genes
        self.dropout = dropout
        self.layer1 = Linear(n_genes, hidden, rng, name="fnn.layer1")
        self.layer2 = Linear(hidden, out_dim, rng, name="fnn.layer2")

    @property
    def out_dim(self) -> int:
        return self.layer2.out_dim

    def parameters(self) -> list[Tensor]:
        return self.layer1.parameters() + self.layer2.parameters()


def fnn_encode(omics: np.ndarray | Tensor, params: FnnParams,
               rng: np.random.Generator | None = None) -> Tensor:
    """``relu(W2 relu(W1 x + b1) + b2)`` for a single omics row."""
    x = omics if isinstance(omics, Tensor) else Tensor(np.asarray(omics, dtype=np.float64).reshape(1, -1))
    if x.shape != (1, params.n_genes):
        raise DimensionError(f"omics vector has shape {x.shape}, expected (1, {params.n_genes})")
    h = dropout(relu(params.layer1(x)), params.dropout, rng)
    return relu(params.layer2(h))
