from .encoders import Backbone, PromptState
from .estimator import SPTRClassifier
from .metrics import harmonic_mean

__version__ = "0.1.0"
__all__ = ["Backbone", "PromptState", "SPTRClassifier", "harmonic_mean"]
