"""fogdet: desk-scale fog-robust detection experiments.

A tiny autodiff engine, synthetic foggy scenes via the atmospheric
scattering model, attention-based detector variants, perceptual-loss
distillation, and mAP@50 evaluation, wired together by a CLI harness.
"""

from .autodiff import Tensor, backward, gradient_check, no_grad
from .config import RunConfig
from .detector import Detector, DetectorConfig
from .fogsim import FogParams, apply_fog, transmission

__all__ = [
    "Tensor", "backward", "gradient_check", "no_grad",
    "RunConfig", "Detector", "DetectorConfig",
    "FogParams", "apply_fog", "transmission",
]

__version__ = "0.1.0"
