"""panscan: interleaved multimodal selective-scan pan-sharpening in numpy."""
from .model import ModelConfig, PanSharpNet, count_params
from .numerics import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["ModelConfig", "PanSharpNet", "Tensor", "backward", "count_params", "no_grad"]
