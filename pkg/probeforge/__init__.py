"""
probeforge - a desk-scale transformer interpretability workbench.

Instrumented forward passes, MHA/FFN module swaps between checkpoints,
retrieval-head scoring, attention entropy, FFN activation statistics,
knowledge-conflict probing and long/short corpus mixing.
"""

__version__ = "0.1.0"
__author__ = "probeforge developers"

from .checkpoint import load_checkpoint, save_checkpoint
from .model import Checkpoint, ModelConfig, forward, generate_greedy

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "forward",
    "generate_greedy",
    "load_checkpoint",
    "save_checkpoint",
]
