"""Referential games about numerosity between neural agents.

Dot-image stimuli, token and sketch channels, training loops, code analysis
and an experiment runner. Kernels run under numba unless ``NUMGAME_JIT=0``.
"""

from .stimuli import Dataset, DatasetSpec, DotImage, build_dataset, generate_dot_image
from .game import GameConfig, evaluate, train
from .transcript import Transcript

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetSpec",
    "DotImage",
    "GameConfig",
    "Transcript",
    "build_dataset",
    "evaluate",
    "generate_dot_image",
    "train",
]
