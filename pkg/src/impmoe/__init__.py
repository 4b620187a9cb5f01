"""Alternating-gradient multimodal training with an expert-choice MoE encoder."""

__version__ = "0.1.0"
