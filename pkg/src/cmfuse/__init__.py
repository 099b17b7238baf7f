"""Cross-modality attention fusion of tile bags and omics for discrete-time survival."""

__version__ = "0.1.0"
