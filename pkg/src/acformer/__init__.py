"""Anchor Former vision-language connector, baselines, analysis and cost model."""

from .connector import (
    AggregatorWeights,
    ConnectorConfig,
    acformer_backward,
    acformer_forward,
    build_lm_input,
    init_weights,
    load_weights,
    save_weights,
    toy_train,
)
from .errors import (
    AcFormerError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    UsageError,
)
from .selector import gather_anchors, select_anchors

__version__ = "0.1.0"

__all__ = [
    "AcFormerError",
    "AggregatorWeights",
    "ConfigError",
    "ConnectorConfig",
    "DataError",
    "NumericError",
    "ShapeError",
    "UsageError",
    "acformer_backward",
    "acformer_forward",
    "build_lm_input",
    "gather_anchors",
    "init_weights",
    "load_weights",
    "save_weights",
    "select_anchors",
    "toy_train",
]
