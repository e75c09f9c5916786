"""Deep ensembles diversified by penalising conditional redundancy between member features."""

from .config import PRESETS, TrainConfig, preset
from .models import Architecture, EnsembleModel
from .training import train_run, train_step

__all__ = ["Architecture", "EnsembleModel", "PRESETS", "TrainConfig", "preset", "train_run", "train_step"]
__version__ = "0.1.0"
