"""Skew-normal mixture models for predicting CT intensities from MR channels."""

from .errors import (
    ComponentCollapseError,
    InputError,
    NumericalError,
    SkewMixError,
)
from .mixture import FitConfig, MixtureModel, fit
from .predictor import (
    PartitionedModel,
    PartitionSpec,
    predict_partitioned,
    predict_volume,
    train_partitioned,
)
from .skewnormal import SkewNormalParams, sn_logpdf, sn_sample

__version__ = "0.1.0"

__all__ = [
    "ComponentCollapseError",
    "FitConfig",
    "InputError",
    "MixtureModel",
    "NumericalError",
    "PartitionSpec",
    "PartitionedModel",
    "SkewMixError",
    "SkewNormalParams",
    "fit",
    "predict_partitioned",
    "predict_volume",
    "sn_logpdf",
    "sn_sample",
    "train_partitioned",
]
