"""End-to-end survival network: encoder(s), optional fusion head, linear hazard classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .encoders import FEATURE_DIM, IMAGE_DIM, AmilParams, FnnParams, amil_encode, fnn_encode
from .fusion import DESIGNS, FusionDesign
from .layers import Linear, count_parameters
from .survival import N_BINS, HazardOutput, hazard_output
from .tensor import Tensor, minmax_scale

MODEL_KINDS = ("unimodal-image", "unimodal-omics", "multimodal")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "multimodal"
    design: str = "cmmf"
    sharing: str = "shared"
    activation: str = "tanh"
    hidden: int = 64
    amil_variant: str = "gated"
    amil_embed_dim: int = 512
    amil_attn_dim: int = 256
    fnn_hidden: int = 256
    dropout: float = 0.0
    normalize_features: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.kind == "multimodal" and self.design not in DESIGNS:
            raise ValueError(f"unknown fusion design {self.design!r}")

    @property
    def name(self) -> str:
        if self.kind == "unimodal-image":
            return "amil"
        if self.kind == "unimodal-omics":
            return "fnn"
        if self.design == "cmmf":
            return f"cmmf-{self.sharing}-{self.activation}"
        return self.design

    @property
    def uses_image(self) -> bool:
        return self.kind != "unimodal-omics"

    @property
    def uses_omics(self) -> bool:
        return self.kind != "unimodal-image"

    def row(self) -> dict:
        """Report columns: design/sharing/activation are blank where they do not apply."""
        multimodal = self.kind == "multimodal"
        cmmf = multimodal and self.design == "cmmf"
        return {
            "model": self.name,
            "design": self.design if multimodal else "none",
            "sharing": self.sharing if cmmf else "",
            "activation": self.activation if cmmf else "",
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    output: HazardOutput
    modality_attention: np.ndarray | None = None
    tile_attention: np.ndarray | None = None


class SurvivalModel:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, n_genes: int = 154,
                 image_dim: int = IMAGE_DIM):
        self.spec = spec
        self.amil = None
        self.fnn = None
        self.fusion = None
        if spec.uses_image:
            self.amil = AmilParams(rng, image_dim=image_dim, embed_dim=spec.amil_embed_dim,
                                   attn_dim=spec.amil_attn_dim, out_dim=FEATURE_DIM,
                                   variant=spec.amil_variant, dropout=spec.dropout)
        if spec.kind == "multimodal":
            self.fusion = FusionDesign(spec.design, rng, feature_dim=FEATURE_DIM, n_genes=n_genes,
                                       hidden=spec.hidden, sharing=spec.sharing,
                                       activation=spec.activation)
        if spec.uses_omics and (self.fusion is None or self.fusion.uses_omics_encoder):
            self.fnn = FnnParams(rng, n_genes=n_genes, out_dim=FEATURE_DIM, dropout=spec.dropout)
        width = self.fusion.out_dim if self.fusion is not None else FEATURE_DIM
        self.classifier = Linear(width, N_BINS, rng, name="classifier")

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for part in (self.amil, self.fnn, self.fusion):
            if part is not None:
                params += part.parameters()
        return params + self.classifier.parameters()

    def n_parameters(self) -> int:
        return count_parameters(self.parameters())

    def __call__(self, bag: np.ndarray | None, omics: np.ndarray | None,
                 rng: np.random.Generator | None = None) -> Prediction:
        tile_attn = None
        image_feat = omic_feat = None
        if self.amil is not None:
            image_feat, tile_attn = amil_encode(bag, self.amil, rng)
        if self.spec.uses_omics:
            omics_t = Tensor(np.asarray(omics, dtype=np.float64).reshape(1, -1))
            omic_feat = fnn_encode(omics_t, self.fnn, rng) if self.fnn is not None else omics_t
        if self.spec.normalize_features:
            image_feat = None if image_feat is None else minmax_scale(image_feat)
            omic_feat = None if omic_feat is None else minmax_scale(omic_feat)
        modality_attn = None
        if self.fusion is not None:
            fused, modality_attn = self.fusion(image_feat, omic_feat)
        else:
            fused = image_feat if image_feat is not None else omic_feat
        out = hazard_output(self.classifier(fused))
        return Prediction(
            out,
            None if modality_attn is None else modality_attn.data[:, 0].copy(),
            None if tile_attn is None else tile_attn.data[:, 0].copy(),
        )
