"""Toy objects and a deterministic z-buffered software rasterizer.

Objects are unions of small convex parts. Every kind faces +x and is
mirror-symmetric about the xz-plane; a marker-coloured part sits at the front
so front/back is never ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .camera import DEFAULT_FOV_DEG, CameraPose, pose_to_camera_frame
from .exceptions import ConfigurationError

OBJECT_KINDS = ("car", "animal", "chair", "signpost")

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.62, 0.20),
    "blue": (0.20, 0.35, 0.90),
    "purple": (0.60, 0.25, 0.75),
    "teal": (0.10, 0.60, 0.60),
}

MARKER_RGB = (1.0, 0.85, 0.10)
DARK_RGB = (0.18, 0.18, 0.20)
LIGHT_DIR = np.array([0.35, 0.5, 0.8]) / np.linalg.norm([0.35, 0.5, 0.8])
AMBIENT = 0.4
NEAR_PLANE = 0.05

BACKGROUNDS = ("transparent", "flat-color", "procedural-texture")


def _box(x0, x1, y0, y1, z0, z1):
    return np.array([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)], float)


def _wedge_nose(x0, x1, half_w, z0, z1):
    """Square base at x0 tapering to a vertical edge at x1."""
    return np.array(
        [
            [x0, -half_w, z0], [x0, half_w, z0], [x0, -half_w, z1], [x0, half_w, z1],
            [x1, 0.0, z0], [x1, 0.0, z1],
        ],
        float,
    )


def _pyramid_x(x0, x1, half_w, z0, z1):
    zc = 0.5 * (z0 + z1)
    return np.array(
        [[x0, -half_w, z0], [x0, half_w, z0], [x0, -half_w, z1], [x0, half_w, z1], [x1, 0.0, zc]],
        float,
    )


def _legs(xs, ys, z0, z1, half):
    return [("dark", _box(x - half, x + half, y - half, y + half, z0, z1)) for x in xs for y in ys]


def _parts(kind):
    if kind == "car":
        parts = [
            ("body", _box(-0.50, 0.30, -0.22, 0.22, -0.10, 0.12)),
            ("body", _box(-0.32, 0.08, -0.18, 0.18, 0.12, 0.30)),
            ("marker", _pyramid_x(0.30, 0.52, 0.20, -0.10, 0.12)),
        ]
        parts += [
            ("dark", _box(x - 0.08, x + 0.08, y - 0.04, y + 0.04, -0.24, -0.06))
            for x in (-0.32, 0.18)
            for y in (-0.24, 0.24)
        ]
        return parts
    if kind == "animal":
        parts = [
            ("body", _box(-0.30, 0.20, -0.12, 0.12, 0.00, 0.24)),
            ("body", _box(0.14, 0.30, -0.07, 0.07, 0.18, 0.40)),
            ("body", _box(0.22, 0.42, -0.10, 0.10, 0.36, 0.52)),
            ("marker", _wedge_nose(0.42, 0.55, 0.07, 0.38, 0.48)),
            ("dark", _box(-0.52, -0.30, -0.025, 0.025, 0.17, 0.21)),
        ]
        parts += _legs((-0.24, 0.14), (-0.08, 0.08), -0.30, 0.00, 0.035)
        return parts
    if kind == "chair":
        parts = [
            ("body", _box(-0.25, 0.22, -0.25, 0.25, -0.04, 0.04)),
            ("body", _box(-0.25, -0.17, -0.25, 0.25, 0.04, 0.55)),
            ("marker", _box(0.22, 0.28, -0.25, 0.25, -0.05, 0.05)),
        ]
        parts += _legs((-0.21, 0.20), (-0.21, 0.21), -0.45, -0.04, 0.03)
        return parts
    if kind == "signpost":
        return [
            ("body", _box(-0.05, 0.05, -0.05, 0.05, -0.50, 0.50)),
            ("body", _box(0.05, 0.28, -0.04, 0.04, 0.28, 0.40)),
            ("marker", _wedge_nose(0.28, 0.50, 0.06, 0.20, 0.48)),
        ]
    raise ConfigurationError(f"unknown object kind {kind!r}; choose from {OBJECT_KINDS}")


@dataclass(frozen=True)
class ToyObject:
    """Triangle mesh normalized so its bounding box has max side 1 and is centered."""

    kind: str
    color: tuple
    vertices: np.ndarray = field(repr=False)
    faces: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)
    face_parts: tuple = field(repr=False)
    color_name: str | None = None

    @property
    def name(self) -> str:
        return f"{self.color_name or 'custom'}-{self.kind}"

    def part_mask(self, part: str) -> np.ndarray:
        return np.array([p == part for p in self.face_parts])

    def face_colors(self, color=None) -> np.ndarray:
        base = np.asarray(self.color if color is None else color, float)
        palette = {"body": base, "marker": np.array(MARKER_RGB), "dark": np.array(DARK_RGB)}
        return np.stack([palette[p] for p in self.face_parts])


def make_object(kind: str, color="red") -> ToyObject:
    """Build the mesh for ``kind`` in ``color`` (a name from ``COLORS`` or an RGB triple)."""
    if isinstance(color, str):
        if color not in COLORS:
            raise ConfigurationError(f"unknown color {color!r}; choose from {sorted(COLORS)}")
        color_name, rgb = color, COLORS[color]
    else:
        color_name, rgb = None, tuple(float(c) for c in color)
        if len(rgb) != 3:
            raise ConfigurationError("color must be an RGB triple")
    parts = _parts(kind)

    all_pts = np.concatenate([pts for _, pts in parts])
    lo, hi = all_pts.min(axis=0), all_pts.max(axis=0)
    center, scale = 0.5 * (lo + hi), 1.0 / float(np.max(hi - lo))

    verts, faces, normals, labels = [], [], [], []
    offset = 0
    for label, pts in parts:
        pts = (pts - center) * scale
        hull = ConvexHull(pts)
        centroid = pts.mean(axis=0)
        for simplex in hull.simplices:
            a, b, c = pts[simplex]
            n = np.cross(b - a, c - a)
            n /= np.linalg.norm(n)
            if np.dot(n, a - centroid) < 0:
                n = -n
                simplex = simplex[[0, 2, 1]]
            faces.append(simplex + offset)
            normals.append(n)
            labels.append(label)
        verts.append(pts)
        offset += len(pts)
    return ToyObject(
        kind=kind,
        color=tuple(rgb),
        vertices=np.concatenate(verts),
        faces=np.array(faces, dtype=np.int64),
        normals=np.array(normals),
        face_parts=tuple(labels),
        color_name=color_name,
    )


@dataclass(frozen=True)
class RenderSpec:
    width: int = 64
    height: int = 64
    fov_deg: float = DEFAULT_FOV_DEG
    background: str = "transparent"
    background_rgb: tuple = (1.0, 1.0, 1.0)
    background_image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigurationError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"unknown background {self.background!r}")
        if self.background == "procedural-texture":
            if self.background_image is None:
                raise ConfigurationError("procedural-texture background needs background_image")
            if self.background_image.shape[:2] != (self.height, self.width):
                raise ConfigurationError("background_image does not match render size")


def rasterize(obj: ToyObject, pose: CameraPose, width: int, height: int, fov_deg=DEFAULT_FOV_DEG):
    """Return the visible face index per pixel (``-1`` for background)."""
    frame = pose_to_camera_frame(pose, fov_deg)
    cam = (obj.vertices - frame.position) @ frame.rotation
    f = frame.focal_px(width)

    tri = cam[obj.faces]  # (T, 3, 3)
    keep = np.all(tri[:, :, 2] > NEAR_PLANE, axis=1)
    face_ids = np.nonzero(keep)[0]
    tri = tri[keep]
    z = tri[:, :, 2]
    uv = np.stack(
        [f * tri[:, :, 0] / z + width / 2.0, f * tri[:, :, 1] / z + height / 2.0], axis=-1
    )

    py, px = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    qx, qy = px.reshape(-1), py.reshape(-1)
    best_iz = np.full(qx.shape, -np.inf)
    best_face = np.full(qx.shape, -1, dtype=np.int64)

    chunk = max(1, 2_000_000 // max(qx.size, 1))
    for start in range(0, len(face_ids), chunk):
        sl = slice(start, start + chunk)
        p0, p1, p2 = uv[sl, 0], uv[sl, 1], uv[sl, 2]
        area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
            p2[:, 0] - p0[:, 0]
        )
        valid = np.abs(area) > 1e-12
        area = np.where(valid, area, 1.0)[:, None]

        def edge(a, b):
            return (b[:, 0:1] - a[:, 0:1]) * (qy[None] - a[:, 1:2]) - (b[:, 1:2] - a[:, 1:2]) * (
                qx[None] - a[:, 0:1]
            )

        w0 = edge(p1, p2) / area
        w1 = edge(p2, p0) / area
        w2 = edge(p0, p1) / area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & valid[:, None]
        zc = z[sl]
        iz = w0 / zc[:, 0:1] + w1 / zc[:, 1:2] + w2 / zc[:, 2:3]
        iz = np.where(inside, iz, -np.inf)
        local = np.argmax(iz, axis=0)
        local_iz = iz[local, np.arange(qx.size)]
        better = local_iz > best_iz
        best_iz = np.where(better, local_iz, best_iz)
        best_face = np.where(better, face_ids[sl][local], best_face)
    return best_face.reshape(height, width)


def shade_faces(obj: ToyObject, color=None) -> np.ndarray:
    diffuse = np.clip(obj.normals @ LIGHT_DIR, 0.0, None)
    return np.clip(obj.face_colors(color) * (AMBIENT + (1 - AMBIENT) * diffuse)[:, None], 0.0, 1.0)


def render(obj: ToyObject, pose: CameraPose, spec: RenderSpec | None = None, color=None) -> np.ndarray:
    """Render ``obj`` seen from ``pose`` as an ``(H, W, 4)`` uint8 RGBA image.

    ``color`` overrides the body colour without changing geometry.
    """
    spec = RenderSpec() if spec is None else spec
    face_idx = rasterize(obj, pose, spec.width, spec.height, spec.fov_deg)
    covered = face_idx >= 0
    shaded = shade_faces(obj, color)

    rgb = np.zeros((spec.height, spec.width, 3))
    if spec.background == "flat-color":
        rgb[:] = np.asarray(spec.background_rgb, float)
    elif spec.background == "procedural-texture":
        rgb[:] = np.asarray(spec.background_image, float)
    rgb[covered] = shaded[face_idx[covered]]

    alpha = np.full((spec.height, spec.width), 255, np.uint8)
    if spec.background == "transparent":
        alpha = np.where(covered, 255, 0).astype(np.uint8)
    out = np.empty((spec.height, spec.width, 4), np.uint8)
    out[..., :3] = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    out[..., 3] = alpha
    return out


def composite_over(rgba: np.ndarray, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Composite uint8 RGBA over a flat colour; returns float32 RGB in [0, 1]."""
    img = rgba.astype(np.float32) / 255.0
    alpha = img[..., 3:4]
    return img[..., :3] * alpha + np.asarray(background, np.float32) * (1.0 - alpha)


def silhouette_height(rgba: np.ndarray) -> int:
    rows = np.nonzero(rgba[..., 3].any(axis=1))[0]
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)
