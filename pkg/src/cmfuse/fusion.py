"""Fusion heads that merge the image and omics features into one vector.

``cmmf`` scores each modality with a small two-layer kernel
``score_m = w . act(V f_m)``, softmaxes the scores across modalities and
returns the attention-weighted sum of the features. The kernel is either
shared by all modalities or duplicated per modality.

The remaining designs are the comparison baselines: raw concatenation
(omics bypass their encoder), concatenation, elementwise mean, bilinear
(Kronecker) pooling and modality gating.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Linear
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    append_one,
    concat,
    kron,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

ACTIVATIONS = {"tanh": tanh, "relu": relu}
SHARING = ("shared", "per-modality")
DESIGNS = ("cmmf", "raw-concat", "concat", "mean", "bilinear", "gated-attention")


class CmmfParams:
    """Attention kernel of the cross-modality head.

    ``V`` maps an L-dim feature to N hidden channels and ``W`` maps those to a
    scalar score; both are bias-free. With ``sharing="per-modality"`` each of
    the M modalities owns its own ``(V, W)`` pair.
    """

    def __init__(self, rng: np.random.Generator, L: int = 128, N: int = 64, M: int = 2,
                 sharing: str = "shared", activation: str = "tanh"):
        if sharing not in SHARING:
            raise ValueError(f"sharing must be one of {SHARING}, got {sharing!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {tuple(ACTIVATIONS)}, got {activation!r}")
        if M < 2:
            raise ValueError("cross-modality attention needs at least two modalities")
        self.L, self.N, self.M = L, N, M
        self.sharing = sharing
        self.activation = activation
        n_kernels = 1 if sharing == "shared" else M
        self.V = [Linear(L, N, rng, bias=False, name=f"cmmf.V{i}") for i in range(n_kernels)]
        self.W = [Linear(N, 1, rng, bias=False, name=f"cmmf.W{i}") for i in range(n_kernels)]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.V + self.W for p in layer.parameters()]


def cmmf_fuse(features: Sequence[Tensor], params: CmmfParams) -> tuple[Tensor, Tensor]:
    """Return ``(fused (1, L), modality_attention (M, 1))``."""
    if len(features) != params.M:
        raise DimensionError(f"expected {params.M} modality features, got {len(features)}")
    for f in features:
        if f.shape != (1, params.L):
            raise DimensionError(f"modality feature shape {f.shape}, expected (1, {params.L})")
    act = ACTIVATIONS[params.activation]
    stacked = concat(list(features), axis=0)  # (M, L)
    if params.sharing == "shared":
        scores = params.W[0](act(params.V[0](stacked)))
    else:
        scores = concat([params.W[m](act(params.V[m](f))) for m, f in enumerate(features)], axis=0)
    attention = softmax(scores)
    fused = matmul(transpose(attention), stacked)
    return fused, attention


class FusionDesign:
    """A fusion head with a fixed output width.

    Call with ``(image_feat, omic_input)``; ``omic_input`` is the FNN output
    for every design except ``raw-concat``, which takes the preprocessed gene
    vector directly. Returns ``(fused, modality_attention_or_None)``.
    """

    def __init__(self, kind: str, rng: np.random.Generator, feature_dim: int = 128,
                 n_genes: int = 154, hidden: int = 64, sharing: str = "shared",
                 activation: str = "tanh"):
        if kind not in DESIGNS:
            raise ValueError(f"unknown fusion design {kind!r}; choose from {DESIGNS}")
        self.kind = kind
        self.feature_dim = feature_dim
        self.n_genes = n_genes
        self.cmmf: CmmfParams | None = None
        self.bilinear: Linear | None = None
        self.gate: Linear | None = None
        self.value: Linear | None = None
        L = feature_dim
        if kind == "cmmf":
            self.cmmf = CmmfParams(rng, L=L, N=hidden, M=2, sharing=sharing, activation=activation)
            self.out_dim = L
        elif kind == "raw-concat":
            self.out_dim = L + n_genes
        elif kind == "concat":
            self.out_dim = 2 * L
        elif kind == "mean":
            self.out_dim = L
        elif kind == "bilinear":
            self.bilinear = Linear((L + 1) ** 2, L, rng, name="bilinear.project")
            self.out_dim = L
        else:
            self.gate = Linear(L, L, rng, bias=False, name="gated.Wg")
            self.value = Linear(L, L, rng, bias=False, name="gated.Wh")
            self.out_dim = L

    @property
    def uses_omics_encoder(self) -> bool:
        return self.kind != "raw-concat"

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.cmmf is not None:
            params += self.cmmf.parameters()
        for layer in (self.bilinear, self.gate, self.value):
            if layer is not None:
                params += layer.parameters()
        return params

    def __call__(self, image_feat: Tensor, omic_input: Tensor) -> tuple[Tensor, Tensor | None]:
        if image_feat.shape != (1, self.feature_dim):
            raise ContractError(f"{self.kind}: image feature shape {image_feat.shape}")
        expected = self.n_genes if self.kind == "raw-concat" else self.feature_dim
        if omic_input.shape != (1, expected):
            raise ContractError(
                f"{self.kind}: omics input shape {omic_input.shape}, expected (1, {expected})")
        if self.kind == "cmmf":
            return cmmf_fuse([image_feat, omic_input], self.cmmf)
        return baseline_fuse(self, image_feat, omic_input), None


def baseline_fuse(design: FusionDesign, image_feat: Tensor, omic_input: Tensor) -> Tensor:
    kind = design.kind
    if kind in ("raw-concat", "concat"):
        return concat([image_feat, omic_input], axis=1)
    if kind == "mean":
        return scale(add(image_feat, omic_input), 0.5)
    if kind == "bilinear":
        return design.bilinear(kron(append_one(image_feat), append_one(omic_input)))
    if kind == "gated-attention":
        fused = None
        for f in (image_feat, omic_input):
            term = mul(sigmoid(design.gate(f)), design.value(f))
            fused = term if fused is None else add(fused, term)
        return fused
    raise ContractError(f"baseline_fuse does not handle design {kind!r}")
