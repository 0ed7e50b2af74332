"""Deep Koopman car-following predictor."""

from .losses import LossWeights, dwa_update, lifted_paths, loss_components, loss_total
from .network import VARIANTS, AdapKoopnet, ModelConfig, temporal_encoding
from .training import DeepEncoder, Predictor, TrainingDivergedError, load_predictor, train

__all__ = [
    "AdapKoopnet", "DeepEncoder", "LossWeights", "ModelConfig", "Predictor", "TrainingDivergedError",
    "VARIANTS", "dwa_update", "lifted_paths", "load_predictor", "loss_components", "loss_total",
    "temporal_encoding", "train",
]
