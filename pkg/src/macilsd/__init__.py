"""Weakly-supervised audio-visual violence detection with modality-aware
contrastive instance learning and EMA self-distillation."""

__version__ = "0.1.0"
