"""Vision transformer with saliency-guided class-token attention, in numpy."""

from .model import SMViT, attention_heatmap, forward, init_params, load_checkpoint, save_checkpoint
from .tokenizer import ConfigError, ViTConfig

__all__ = [
    "ConfigError",
    "SMViT",
    "ViTConfig",
    "attention_heatmap",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
