"""Saliency-tiled streaming of dynamic Gaussian-splat scenes."""
from .errors import (DegenerateInputError, FormatError, InfeasibleError, ParameterError,
                     RangeError, SchemaError, SizeError, SplatStreamError, StageError,
                     TraceCoverageError, TruncationError)
from .model import FrameSequence, GaussianCloud, GaussianPrimitive, raw_size_bytes, read_ply

__version__ = "0.1.0"

__all__ = ["DegenerateInputError", "FormatError", "InfeasibleError", "ParameterError", "RangeError",
           "SchemaError", "SizeError", "SplatStreamError", "StageError", "TraceCoverageError",
           "TruncationError", "FrameSequence", "GaussianCloud", "GaussianPrimitive",
           "raw_size_bytes", "read_ply"]
