"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid ranges, sizes or option combinations."""


class DegeneratePoseError(ValueError):
    """Pose for which the look-at frame is undefined (|elevation| >= pi/2)."""


class DegenerateEstimateError(ValueError):
    """Regressor output that does not decode to a valid pose.

    Either the (sin, cos) azimuth pair has zero norm or the elevation or
    radius falls outside the pose domain.
    """


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
