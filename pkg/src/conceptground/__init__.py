"""Unsupervised phrase grounding through concept-batch self-supervision.

The package is organised as:

- ``numcore``: dense float64 kernels, hand-written backward passes, Adam.
- ``grounder``: the attention encoder and concept decoders.
- ``corpus``: synthetic planted-concept scenes, JSON-Lines IO, standardization,
  concept-batch sampling.
- ``train``: surrogate losses, the step loop and checkpoints.
- ``evaluate``: pointing game, baselines, ablation and reports.
- ``cli``: the ``conceptground`` command.
"""

__version__ = "0.1.0"


class GroundingError(Exception):
    """Base class for all package errors."""


class ShapeError(GroundingError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(GroundingError, ValueError):
    """A configuration is invalid or inconsistent with its inputs."""


class DataError(GroundingError, ValueError):
    """Input data is malformed or insufficient."""


class NumericError(GroundingError, ArithmeticError):
    """A computation produced a non-finite value."""
