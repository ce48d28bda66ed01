"""QUIC ECN validation, path tracing and measurement campaign tooling."""

from .core import EcnCodepoint, EcnCounts, MirrorClass, UsageClass
from .validator import Validator, ValidatorConfig

__all__ = ["EcnCodepoint", "EcnCounts", "MirrorClass", "UsageClass", "Validator", "ValidatorConfig"]
__version__ = "0.1.0"
