"""Desk-scale sparse mixture-of-experts lab: model, synthetic compositional
reasoning tasks, training harness, and sparsity/generalization theory tools."""

from .common import ConfigError, NumericDomainError
from .model import ModelConfig, RouterOutput, SMoETransformer, route
from .training import RunRecord, TrainConfig, evaluate, train

__all__ = [
    "ConfigError",
    "NumericDomainError",
    "ModelConfig",
    "RouterOutput",
    "SMoETransformer",
    "route",
    "RunRecord",
    "TrainConfig",
    "evaluate",
    "train",
]
