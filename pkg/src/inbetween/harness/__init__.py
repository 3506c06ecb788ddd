from .checkpoint import LoRACheckpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config

__all__ = ["LoRACheckpoint", "RunConfig", "load_checkpoint", "load_config", "parse_config", "save_checkpoint"]
