"""Multimodal conditioned neural fields with iterative cross-modal refinement."""

from .model import ContextSet, ModalityObservations, ModelConfig, OmniFieldModel, QuerySet

__version__ = "0.1.0"

__all__ = ["ContextSet", "ModalityObservations", "ModelConfig", "OmniFieldModel", "QuerySet", "__version__"]
