"""Per-domain linear re-ranking of NLU hypotheses with calibration-aware losses."""

from .schema import Annotation, ConfigurationError, DomainSchema, Slot, Utterance, default_schemas
from .reranker import LossConfig, OptimizerSettings, Scheme, WeightVector, train
from .metrics import semer

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "ConfigurationError",
    "DomainSchema",
    "LossConfig",
    "OptimizerSettings",
    "Scheme",
    "Slot",
    "Utterance",
    "WeightVector",
    "default_schemas",
    "semer",
    "train",
]
