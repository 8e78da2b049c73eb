from .network import (FusionModule, GaitNet, InferenceFeature,
                      OmniGaitConfig)
from . import layers

__all__ = ["FusionModule", "GaitNet", "InferenceFeature", "OmniGaitConfig",
           "layers"]
