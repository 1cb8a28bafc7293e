"""Viewpoint-token conditioning for text-to-image generation on toy scenes.

Light modules (geometry, encodings, rendering, evaluation bookkeeping) are
re-exported here. The torch models live in :mod:`viewtoken.generator` and
:mod:`viewtoken.regressor`.
"""

from .camera import (
    CameraFrame,
    CameraPose,
    SamplingRanges,
    angular_difference,
    pose_errors,
    pose_to_camera_frame,
    sample_pose,
    sample_poses,
)
from .encoding import (
    FactorizedEncoder,
    Matrix12Encoder,
    PluckerEncoder,
    SinusoidalEncoder,
    ViewpointEncoding,
    decode_factorized,
    encode_factorized,
    encode_matrix12,
    encode_plucker,
    encode_sinusoidal,
    make_encoder,
)
from .exceptions import (
    ConfigurationError,
    DegenerateEstimateError,
    DegeneratePoseError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "CameraFrame",
    "CameraPose",
    "SamplingRanges",
    "angular_difference",
    "pose_errors",
    "pose_to_camera_frame",
    "sample_pose",
    "sample_poses",
    "FactorizedEncoder",
    "Matrix12Encoder",
    "PluckerEncoder",
    "SinusoidalEncoder",
    "ViewpointEncoding",
    "decode_factorized",
    "encode_factorized",
    "encode_matrix12",
    "encode_plucker",
    "encode_sinusoidal",
    "make_encoder",
    "ConfigurationError",
    "DegenerateEstimateError",
    "DegeneratePoseError",
    "TrainingDivergedError",
]
