"""Multi-modal gait recognition toolkit: synthetic data generation,
per-sensor preprocessing, a unified gated-fusion recognition network with
hand-rolled training, and gallery/probe retrieval protocols."""

__version__ = "0.1.0"

from . import core, errors, evalproto, losses, preprocess, synthgen, trainer
from .core import Modality
from .model import GaitNet, OmniGaitConfig

__all__ = ["core", "errors", "evalproto", "losses", "preprocess", "synthgen",
           "trainer", "Modality", "GaitNet", "OmniGaitConfig", "__version__"]
