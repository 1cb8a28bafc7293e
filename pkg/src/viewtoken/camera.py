"""Object-centric camera model.

World frame is right-handed with +x the object's front and +z up. A camera
is placed on a sphere around the origin by (azimuth, elevation, radius) and
then rotated relative to the look-at direction by (yaw, pitch). Camera axes
follow the OpenCV convention: x right, y down, z forward.

Angles are radians in memory and degrees in files.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DegeneratePoseError

TWO_PI = 2.0 * math.pi
DEFAULT_FOV_DEG = 54.4
DEFAULT_RADIUS_RANGE = (4.0 / 3.0, 2.0)
WORLD_UP = np.array([0.0, 0.0, 1.0])

POSE_FIELDS = ("azimuth", "elevation", "radius", "pitch", "yaw")


def wrap_azimuth(azimuth: float) -> float:
    """Wrap an angle to [0, 2*pi).

    The result is snapped to a 1e-12 rad grid so that ``a`` and ``a + 2*pi*k``
    land on the same float for inputs that live on that grid.
    """
    wrapped = round(math.fmod(float(azimuth), TWO_PI), 12)
    if wrapped < 0.0:
        wrapped = round(wrapped + TWO_PI, 12)
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped + 0.0  # drop negative zero


@dataclass(frozen=True)
class CameraPose:
    """Five-parameter viewpoint. ``radius`` is in object diameters."""

    azimuth: float
    elevation: float
    radius: float
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        values = [self.azimuth, self.elevation, self.radius, self.pitch, self.yaw]
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f"non-finite pose component in {values}")
        if self.radius <= 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}")
        if abs(self.elevation) >= math.pi / 2:
            raise DegeneratePoseError(
                f"elevation {self.elevation} rad is degenerate with world-up"
            )
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))
        for name in ("elevation", "radius", "pitch", "yaw"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.radius, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, values) -> "CameraPose":
        az, el, r, pitch, yaw = (float(v) for v in values)
        return cls(az, el, r, pitch, yaw)

    def to_record(self) -> dict:
        """Flat record with angles in degrees, as stored in metadata files."""
        return {
            "azimuth_deg": math.degrees(self.azimuth),
            "elevation_deg": math.degrees(self.elevation),
            "radius": self.radius,
            "pitch_deg": math.degrees(self.pitch),
            "yaw_deg": math.degrees(self.yaw),
        }

    @classmethod
    def from_record(cls, record: dict) -> "CameraPose":
        return cls(
            math.radians(record["azimuth_deg"]),
            math.radians(record["elevation_deg"]),
            float(record["radius"]),
            math.radians(record["pitch_deg"]),
            math.radians(record["yaw_deg"]),
        )

    @classmethod
    def from_degrees(cls, azimuth, elevation, radius, pitch=0.0, yaw=0.0) -> "CameraPose":
        return cls(
            math.radians(azimuth),
            math.radians(elevation),
            radius,
            math.radians(pitch),
            math.radians(yaw),
        )


def poses_to_array(poses) -> np.ndarray:
    """Stack poses into an ``(n, 5)`` array ordered as ``POSE_FIELDS``."""
    return np.array([p.to_array() for p in poses], dtype=float).reshape(-1, 5)


@dataclass(frozen=True)
class SamplingRanges:
    """Uniform sampling box for camera poses. Defaults are the training ranges."""

    radius_min: float = 4.0 / 3.0
    radius_max: float = 2.0
    elevation_min: float = 0.0
    elevation_max: float = math.pi / 4
    pitch_bound: float = math.pi / 12
    yaw_bound: float = math.pi / 12
    full_azimuth: bool = True

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigurationError(
                f"need 0 < radius_min <= radius_max, got {self.radius_min}, {self.radius_max}"
            )
        if not self.elevation_min <= self.elevation_max:
            raise ConfigurationError("elevation_min > elevation_max")
        if not (-math.pi / 2 < self.elevation_min and self.elevation_max < math.pi / 2):
            raise ConfigurationError("elevation range must lie inside (-pi/2, pi/2)")
        if self.pitch_bound < 0 or self.yaw_bound < 0:
            raise ConfigurationError("pitch/yaw bounds must be non-negative")

    @property
    def radius_range(self) -> tuple[float, float]:
        return (self.radius_min, self.radius_max)

    def contains(self, pose: CameraPose, atol: float = 1e-9) -> bool:
        return (
            self.radius_min - atol <= pose.radius <= self.radius_max + atol
            and self.elevation_min - atol <= pose.elevation <= self.elevation_max + atol
            and abs(pose.pitch) <= self.pitch_bound + atol
            and abs(pose.yaw) <= self.yaw_bound + atol
        )

    def to_record(self) -> dict:
        return {
            "radius_min": self.radius_min,
            "radius_max": self.radius_max,
            "elevation_min_deg": math.degrees(self.elevation_min),
            "elevation_max_deg": math.degrees(self.elevation_max),
            "pitch_bound_deg": math.degrees(self.pitch_bound),
            "yaw_bound_deg": math.degrees(self.yaw_bound),
            "full_azimuth": self.full_azimuth,
        }

    @classmethod
    def from_record(cls, record: dict) -> "SamplingRanges":
        return cls(
            radius_min=float(record["radius_min"]),
            radius_max=float(record["radius_max"]),
            elevation_min=math.radians(record["elevation_min_deg"]),
            elevation_max=math.radians(record["elevation_max_deg"]),
            pitch_bound=math.radians(record["pitch_bound_deg"]),
            yaw_bound=math.radians(record["yaw_bound_deg"]),
            full_azimuth=bool(record.get("full_azimuth", True)),
        )


def sample_pose(rng: np.random.Generator, ranges: SamplingRanges | None = None) -> CameraPose:
    """Draw one pose, each component independent and uniform over its range."""
    return sample_poses(rng, ranges, 1)[0]


def sample_poses(rng: np.random.Generator, ranges: SamplingRanges | None, n: int) -> list[CameraPose]:
    ranges = SamplingRanges() if ranges is None else ranges
    if not isinstance(ranges, SamplingRanges):
        raise ConfigurationError(f"expected SamplingRanges, got {type(ranges).__name__}")
    u = rng.random((n, 5))
    az = u[:, 0] * TWO_PI if ranges.full_azimuth else np.zeros(n)
    el = ranges.elevation_min + u[:, 1] * (ranges.elevation_max - ranges.elevation_min)
    r = ranges.radius_min + u[:, 2] * (ranges.radius_max - ranges.radius_min)
    pitch = (2.0 * u[:, 3] - 1.0) * ranges.pitch_bound
    yaw = (2.0 * u[:, 4] - 1.0) * ranges.yaw_bound
    return [CameraPose(*row) for row in np.stack([az, el, r, pitch, yaw], axis=1)]


@dataclass(frozen=True)
class CameraFrame:
    """Camera-to-world rigid transform plus field of view.

    Columns of ``rotation`` are the camera right, down and forward axes in
    world coordinates.
    """

    rotation: np.ndarray
    position: np.ndarray
    fov_deg: float = DEFAULT_FOV_DEG

    @property
    def right(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def down(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def up(self) -> np.ndarray:
        return -self.rotation[:, 1]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def world_to_camera(self) -> np.ndarray:
        """3x4 matrix ``[R^T | -R^T p]``."""
        r_inv = self.rotation.T
        return np.concatenate([r_inv, (-r_inv @ self.position)[:, None]], axis=1)

    def focal_px(self, width: int) -> float:
        return (width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)


def camera_position(pose: CameraPose) -> np.ndarray:
    ce = math.cos(pose.elevation)
    return pose.radius * np.array(
        [ce * math.cos(pose.azimuth), ce * math.sin(pose.azimuth), math.sin(pose.elevation)]
    )


def pose_to_camera_frame(pose: CameraPose, fov_deg: float = DEFAULT_FOV_DEG) -> CameraFrame:
    """Build the camera frame for ``pose``.

    Starts from a roll-free look-at toward the origin, then yaws about the
    camera up axis (positive turns left) and pitches about the resulting right
    axis (positive turns down).
    """
    if abs(pose.elevation) >= math.pi / 2:
        raise DegeneratePoseError(f"elevation {pose.elevation} is degenerate")
    position = camera_position(pose)
    # closed forms of forward x world-up and right x forward; away from the
    # poles cos(elevation) > 0, so no normalization is needed
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    ce, se = math.cos(pose.elevation), math.sin(pose.elevation)
    # rows: look-at forward, right, up
    basis = np.array([[-ce * ca, -ce * sa, -se], [-sa, ca, 0.0], [-se * ca, -se * sa, ce]])

    # yaw mixes forward and right; pitch then mixes the yawed forward and up.
    # Rows of ``mix`` are the final right, down (= -up) and forward axes
    # expressed in the look-at basis.
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    mix = np.array([[sy, cy, 0.0], [-sp * cy, sp * sy, -cp], [cp * cy, -cp * sy, -sp]])
    rotation = (mix @ basis).T
    return CameraFrame(rotation=rotation, position=position, fov_deg=fov_deg)


def angular_difference(a_deg, b_deg):
    """Minimal circular distance in degrees, in [0, 180]. Vectorised."""
    d = np.abs(np.mod(np.asarray(a_deg, dtype=float) - np.asarray(b_deg, dtype=float), 360.0))
    d = np.minimum(d, 360.0 - d)
    if np.ndim(d) == 0:
        return float(d)
    return d


def clamp_radius(radius: float, radius_range) -> float:
    lo, hi = radius_range
    if radius < lo or radius > hi:
        warnings.warn(
            f"radius {radius:.4f} outside normalization range [{lo:.4f}, {hi:.4f}]; clamping",
            RuntimeWarning,
            stacklevel=3,
        )
        return min(max(radius, lo), hi)
    return radius


def pose_errors(requested, estimated) -> dict:
    """Per-component absolute errors between two equal-length pose lists.

    Angles in degrees (azimuth via circular distance), radius in object
    diameters.
    """
    a = np.array([p.to_array() for p in requested], float).reshape(-1, 5)
    b = np.array([p.to_array() for p in estimated], float).reshape(-1, 5)
    return {
        "azimuth": angular_difference(np.degrees(a[:, 0]), np.degrees(b[:, 0])),
        "elevation": np.abs(np.degrees(a[:, 1] - b[:, 1])),
        "radius": np.abs(a[:, 2] - b[:, 2]),
        "yaw": np.abs(np.degrees(a[:, 4] - b[:, 4])),
        "pitch": np.abs(np.degrees(a[:, 3] - b[:, 3])),
    }
