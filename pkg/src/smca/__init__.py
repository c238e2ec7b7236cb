"""Set-prediction object detection with spatially modulated co-attention."""
from .config import SceneConfig, TrainConfig
from .estimator import SMCADetector
from .model import SMCAModel

__all__ = ["SMCADetector", "SMCAModel", "SceneConfig", "TrainConfig"]
__version__ = "0.1.0"
