from .attention import STANDARD_SPECS, AttentionSpec, SelfAttention2d, StudentAttentionModule
from .omniad import (
    AnomalyMap,
    ModelConfig,
    OmniAD,
    ReverseDistillation,
    anomaly_map,
    anomaly_maps_from_features,
    build_model,
    cosine_distance_map,
    distillation_loss,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AnomalyMap", "AttentionSpec", "ModelConfig", "OmniAD", "ReverseDistillation", "STANDARD_SPECS",
    "SelfAttention2d", "StudentAttentionModule", "anomaly_map", "anomaly_maps_from_features",
    "build_model", "cosine_distance_map", "distillation_loss", "load_checkpoint", "save_checkpoint",
]
