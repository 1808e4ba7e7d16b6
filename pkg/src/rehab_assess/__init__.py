"""Assessment of rehabilitation exercise executions from skeleton sequences.

Two assessors share one preprocessing pipeline: a Gaussian mixture movement
model with a calibrated log-likelihood threshold, and a spatio-temporal
graph convolutional classifier.
"""
from .errors import (
    ConfigurationError, DataError, NumericalError, ParseError, PreprocessError,
    RehabError, SchemaError, SizingError, UsageError,
)
from .sequence import MotionSequence, PreprocessConfig, preprocess
from .skeleton import BLAZEPOSE, KINECT_V2, OPENPOSE, SkeletonGraph, get_graph

__version__ = "0.1.0"

__all__ = [
    "BLAZEPOSE", "KINECT_V2", "OPENPOSE", "ConfigurationError", "DataError",
    "MotionSequence", "NumericalError", "ParseError", "PreprocessConfig",
    "PreprocessError", "RehabError", "SchemaError", "SizingError", "SkeletonGraph",
    "UsageError", "get_graph", "preprocess",
]
