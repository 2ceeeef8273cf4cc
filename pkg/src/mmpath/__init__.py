"""Multi-modal (road network + imagery) path representation learning."""

from .config import TINY, TrainConfig
from .world import World, WorldConfig, generate_synthetic_world, load_world, save_world, synth_labels

__version__ = "0.1.0"

__all__ = ["TINY", "TrainConfig", "World", "WorldConfig", "generate_synthetic_world", "load_world",
           "save_world", "synth_labels"]
