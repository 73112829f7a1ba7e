"""DINO self-distillation with random masking of the student's global views."""

from .config import RunConfig
from .distill import TrainState, dino_loss, train, train_step
from .views import ViewConfig, ViewSet, make_views
from .vit import ViTConfig

__all__ = ["RunConfig", "TrainState", "ViTConfig", "ViewConfig", "ViewSet", "dino_loss",
           "make_views", "train", "train_step"]
__version__ = "0.1.0"
