"""Few-shot segmentation with self-distilled prototypes and supervised affinity attention.

Everything runs on a small numpy autodiff engine; see ``sdaanet.tensor``.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Episode, Sample, generate_sample, make_episode, sample_episode
from .model import ModelConfig, SDAANet
from .sdpm import KShotStrategy
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Episode", "KShotStrategy", "ModelConfig", "SDAANet", "Sample", "Tensor", "TrainConfig",
    "backward", "evaluate", "generate_sample", "load_checkpoint", "make_episode", "no_grad",
    "sample_episode", "save_checkpoint", "train",
]
