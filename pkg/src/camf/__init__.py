"""Cross-attentive multi-modal fusion of FC matrices and structural volumes."""

from camf.fusion import FUSION_MODES, CAMFModel, ModelConfig
from camf.training import TrainConfig

__all__ = ["FUSION_MODES", "CAMFModel", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
