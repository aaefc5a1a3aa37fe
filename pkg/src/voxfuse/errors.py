"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and data problems exit 2,
anything unexpected exits 3 (usage errors are handled by the argument parser
and exit 1).
"""


class VoxfuseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VoxfuseError):
    """Invalid configuration value or inconsistent shapes/options."""


class BoundsError(VoxfuseError):
    """Pixel coordinate outside the image."""


class InvalidSampleError(VoxfuseError):
    """Sample violates a geometric precondition (e.g. non-positive depth)."""


class BehindCameraError(VoxfuseError):
    """World point projects behind the camera (z <= 0 in camera frame)."""


class AllocationError(VoxfuseError):
    """Volume allocation refused; carries the number of bytes required."""

    def __init__(self, message: str, required_bytes: int):
        super().__init__(message)
        self.required_bytes = required_bytes


class DataFormatError(VoxfuseError):
    """Malformed input file; message names the path and the violated expectation."""

    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)
        self.detail = detail


class PredictorFaultError(VoxfuseError):
    """Predictor produced non-finite updates or negative weights."""


class EmptyMeshError(VoxfuseError):
    """Both meshes of an evaluation pair are empty."""
