"""Memory-guided video scene parsing at toy scale."""
from .config import InferenceConfig, ModelConfig, RunConfig, TrainConfig
from .memory import FeatureMemory
from .model import SegModel
from .pipeline import ensemble, multi_scale_flip_infer, multi_stage_infer, video_infer
from .tensor import Tensor

__all__ = ["FeatureMemory", "InferenceConfig", "ModelConfig", "RunConfig", "SegModel", "Tensor",
           "TrainConfig", "ensemble", "multi_scale_flip_infer", "multi_stage_infer", "video_infer"]
