"""Cluster-and-aggregate fusion of variable-size feature sets."""

from .config import CorpusConfig, ModelConfig, TrainConfig
from .model import CAFace
from .records import FeatureRecord, RecordSet
from .streaming import FusionSession, absorb, finalize, open_session

__all__ = [
    "CAFace",
    "CorpusConfig",
    "FeatureRecord",
    "FusionSession",
    "ModelConfig",
    "RecordSet",
    "TrainConfig",
    "absorb",
    "finalize",
    "open_session",
]
