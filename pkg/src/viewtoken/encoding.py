"""Fixed viewpoint encodings and their transformer wrappers.

Four encodings are provided:

* ``factorized``: ``[sin az, cos az, el, r_norm, pitch, yaw]``
* ``sinusoidal``: NeRF-style frequency ladder over the five parameters
* ``matrix12``: flattened 3x4 world-to-camera matrix
* ``plucker``: per-pixel Plücker rays ``(d, p x d)``

The transformers accept an ``(n, 5)`` pose array with columns
``azimuth, elevation, radius, pitch, yaw`` (radians) or a list of
:class:`~viewtoken.camera.CameraPose`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .camera import (
    DEFAULT_FOV_DEG,
    DEFAULT_RADIUS_RANGE,
    CameraPose,
    clamp_radius,
    pose_to_camera_frame,
    wrap_azimuth,
)
from .exceptions import ConfigurationError, DegenerateEstimateError
from .validation import check_poses, check_radius_range

ENCODING_KINDS = ("factorized", "sinusoidal", "matrix12", "plucker")


@dataclass(frozen=True)
class ViewpointEncoding:
    kind: str
    data: np.ndarray

    def __len__(self):
        return len(self.data)


def normalize_radius(radius: float, radius_range=DEFAULT_RADIUS_RANGE) -> float:
    lo, hi = check_radius_range(radius_range)
    return (clamp_radius(radius, (lo, hi)) - lo) / (hi - lo)


def encode_factorized(pose: CameraPose, radius_range=DEFAULT_RADIUS_RANGE) -> ViewpointEncoding:
    r_norm = normalize_radius(pose.radius, radius_range)
    data = np.array(
        [
            math.sin(pose.azimuth),
            math.cos(pose.azimuth),
            pose.elevation,
            r_norm,
            pose.pitch,
            pose.yaw,
        ]
    )
    return ViewpointEncoding("factorized", data)


def decode_factorized(vector, radius_range=DEFAULT_RADIUS_RANGE) -> CameraPose:
    """Inverse of :func:`encode_factorized`.

    The (sin, cos) pair is renormalized first, so any non-zero pair decodes.
    """
    s, c, el, r_norm, pitch, yaw = (float(v) for v in np.asarray(vector).reshape(6))
    lo, hi = check_radius_range(radius_range)
    norm = math.hypot(s, c)
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateEstimateError(f"cannot decode azimuth from (sin, cos) = ({s}, {c})")
    azimuth = math.atan2(s / norm, c / norm)
    radius = lo + r_norm * (hi - lo)
    if not all(math.isfinite(v) for v in (el, radius, pitch, yaw)) or abs(el) >= math.pi / 2 or radius <= 0:
        raise DegenerateEstimateError(f"decoded pose outside its domain: elevation {el}, radius {radius}")
    return CameraPose(wrap_azimuth(azimuth), el, radius, pitch, yaw)


def encode_sinusoidal(
    pose: CameraPose, num_freqs: int = 4, radius_range=DEFAULT_RADIUS_RANGE
) -> ViewpointEncoding:
    """Frequency-ladder encoding, length ``20 * num_freqs``.

    For each parameter ``p`` (azimuth, elevation, normalized radius, pitch,
    yaw) and each base scale ``b`` in ``(1, pi)`` emit ``sin(2^k b p),
    cos(2^k b p)`` for ``k = 0 .. F-1``.
    """
    if int(num_freqs) != num_freqs or num_freqs < 1:
        raise ConfigurationError(f"num_freqs must be a positive integer, got {num_freqs}")
    params = np.array(
        [
            pose.azimuth,
            pose.elevation,
            normalize_radius(pose.radius, radius_range),
            pose.pitch,
            pose.yaw,
        ]
    )
    ladder = 2.0 ** np.arange(int(num_freqs))
    scales = np.concatenate([ladder, math.pi * ladder])  # (2F,)
    args = params[:, None] * scales[None, :]  # (5, 2F)
    data = np.stack([np.sin(args), np.cos(args)], axis=-1).reshape(-1)
    return ViewpointEncoding("sinusoidal", data)


def encode_matrix12(pose: CameraPose, fov_deg: float = DEFAULT_FOV_DEG) -> ViewpointEncoding:
    frame = pose_to_camera_frame(pose, fov_deg)
    return ViewpointEncoding("matrix12", frame.world_to_camera().reshape(-1))


def plucker_rays(pose: CameraPose, grid_h: int, grid_w: int, fov_deg: float = DEFAULT_FOV_DEG):
    """Per-pixel ``(d, m)`` rays as an ``(grid_h, grid_w, 6)`` array.

    Pixel centers sample an image plane whose horizontal field of view is
    ``fov_deg``; pixels are square.
    """
    if grid_h < 1 or grid_w < 1:
        raise ConfigurationError(f"grid must be at least 1x1, got {grid_h}x{grid_w}")
    frame = pose_to_camera_frame(pose, fov_deg)
    f = frame.focal_px(grid_w)
    ys, xs = np.meshgrid(
        (np.arange(grid_h) + 0.5 - grid_h / 2.0) / f,
        (np.arange(grid_w) + 0.5 - grid_w / 2.0) / f,
        indexing="ij",
    )
    cam = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    d = cam @ frame.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    px, py, pz = frame.position
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    m = np.stack([py * dz - pz * dy, pz * dx - px * dz, px * dy - py * dx], axis=-1)
    return np.concatenate([d, m], axis=-1)


def encode_plucker(
    pose: CameraPose, grid_h: int = 8, grid_w: int = 8, fov_deg: float = DEFAULT_FOV_DEG
) -> ViewpointEncoding:
    return ViewpointEncoding("plucker", plucker_rays(pose, grid_h, grid_w, fov_deg).reshape(-1))


class _PoseEncoder(TransformerMixin, BaseEstimator):
    kind = None

    def fit(self, X, y=None):
        check_poses(X)
        self.n_features_out_ = self.output_dim
        return self

    def transform(self, X):
        poses = check_poses(X)
        return np.stack([self.encode(p).data for p in poses]).astype(float)

    def encode(self, pose: CameraPose) -> ViewpointEncoding:
        raise NotImplementedError

    @property
    def output_dim(self) -> int:
        raise NotImplementedError


class FactorizedEncoder(_PoseEncoder):
    kind = "factorized"

    def __init__(self, radius_range=DEFAULT_RADIUS_RANGE):
        self.radius_range = radius_range

    def encode(self, pose):
        return encode_factorized(pose, self.radius_range)

    def inverse_transform(self, X):
        return np.stack(
            [decode_factorized(row, self.radius_range).to_array() for row in np.asarray(X)]
        )

    @property
    def output_dim(self):
        return 6


class SinusoidalEncoder(_PoseEncoder):
    kind = "sinusoidal"

    def __init__(self, num_freqs=4, radius_range=DEFAULT_RADIUS_RANGE):
        self.num_freqs = num_freqs
        self.radius_range = radius_range

    def encode(self, pose):
        return encode_sinusoidal(pose, self.num_freqs, self.radius_range)

    @property
    def output_dim(self):
        return 20 * self.num_freqs


class Matrix12Encoder(_PoseEncoder):
    kind = "matrix12"

    def __init__(self, fov_deg=DEFAULT_FOV_DEG):
        self.fov_deg = fov_deg

    def encode(self, pose):
        return encode_matrix12(pose, self.fov_deg)

    @property
    def output_dim(self):
        return 12


class PluckerEncoder(_PoseEncoder):
    kind = "plucker"

    def __init__(self, grid_h=8, grid_w=8, fov_deg=DEFAULT_FOV_DEG):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.fov_deg = fov_deg

    def encode(self, pose):
        return encode_plucker(pose, self.grid_h, self.grid_w, self.fov_deg)

    @property
    def output_dim(self):
        return 6 * self.grid_h * self.grid_w


_ENCODERS = {
    "factorized": FactorizedEncoder,
    "sinusoidal": SinusoidalEncoder,
    "matrix12": Matrix12Encoder,
    "plucker": PluckerEncoder,
}


def make_encoder(kind: str, radius_range=DEFAULT_RADIUS_RANGE, **params) -> _PoseEncoder:
    """Build an encoder by name; ``radius_range`` is ignored where unused."""
    if kind not in _ENCODERS:
        raise ConfigurationError(f"unknown encoding kind {kind!r}; choose from {ENCODING_KINDS}")
    cls = _ENCODERS[kind]
    if kind in ("factorized", "sinusoidal"):
        params.setdefault("radius_range", tuple(radius_range))
    return cls(**params)
