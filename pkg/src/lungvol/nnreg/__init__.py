"""From-scratch tensor layers, regression architectures, and checkpointing."""

from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .models import (
    ModelSpec,
    build_dual_cnn,
    build_six_layer_cnn,
    ensemble_predict,
    instantiate_model,
    mse_loss,
    register_backbone,
)

__all__ = [
    "ModelSpec",
    "build_dual_cnn",
    "build_six_layer_cnn",
    "ensemble_predict",
    "instantiate_model",
    "load_checkpoint",
    "load_model",
    "mse_loss",
    "register_backbone",
    "save_checkpoint",
]
