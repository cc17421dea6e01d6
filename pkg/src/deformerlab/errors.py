"""Exception hierarchy shared by every deformerlab module."""

from __future__ import annotations


class DeformerLabError(Exception):
    """Base class for all package errors."""


class SizeError(DeformerLabError, ValueError):
    """A count or cloud size is out of the accepted range."""


class ShapeError(DeformerLabError, ValueError):
    """Array shapes do not line up."""


class ParameterError(DeformerLabError, ValueError):
    """A configuration or physical parameter is invalid."""


class DegenerateBatchError(DeformerLabError, ValueError):
    """Training-mode batch normalization was asked to normalize a single row."""


class DegenerateGeometryError(DeformerLabError, ValueError):
    """The input cloud carries no usable geometry (e.g. all points identical)."""


class StateError(DeformerLabError, RuntimeError):
    """An operation was called without the cached state it depends on."""


class GraspMissError(DeformerLabError, ValueError):
    """No surface vertex lies within the grasp radius."""


class GraspConflictError(DeformerLabError, ValueError):
    """The grasp would attach vertices that are already clamped."""


class ConvergenceError(DeformerLabError, RuntimeError):
    """The equilibrium solver did not reach tolerance."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"equilibrium not reached: residual {residual:.3e} N after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


class DivergenceError(DeformerLabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class CorrespondenceError(DeformerLabError, ValueError):
    """Keypoint correspondence needs source ids that are missing."""


class NoDeformationError(DeformerLabError, ValueError):
    """The selected keypoints did not move, so there is no direction to act on."""


class ModelMissingError(DeformerLabError, RuntimeError):
    """A trained model required by the requested method is not available."""


class InvalidMPError(DeformerLabError, ValueError):
    """A predicted manipulation point could not be grasped."""

    def __init__(self, point):
        super().__init__(f"cannot grasp at predicted manipulation point {tuple(float(v) for v in point)}")
        self.point = point


class FormatError(DeformerLabError, ValueError):
    """A binary file does not match the expected layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class GenerationError(DeformerLabError, RuntimeError):
    """Too many samples failed during dataset generation."""
