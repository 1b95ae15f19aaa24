"""Task-switchable conditional diffusion over heartbeat spectrograms."""
from .augment import BeatClassifier
from .estimator import BeatDiffusion
from .signal import BeatClass, Heartbeat, Mask, TaskKind
from .spectral import Spectrogrammer

__version__ = "0.1.0"
