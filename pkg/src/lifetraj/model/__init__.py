from .config import ModelConfig
from .encoder import TripletClassifier, Featurizer, Representations

__all__ = ["ModelConfig", "TripletClassifier", "Featurizer", "Representations"]
