"""Pinhole camera model, lines of sight, and event-to-face geometric quantities.

All distances are metric (meters). The three quantities relating an event's
line of sight to a mesh face are:

* lateral distance: minimum distance between the sight line and the closest
  edge of the face, with a sign indicating whether the ray pierces the face
  interior,
* longitudinal distance: ray parameter of the face centroid's orthogonal
  projection onto the sight line,
* angular error: absolute cosine between the ray direction and the face
  normal (zero for a perfect contour face).

Scalar single-face functions are provided alongside vectorized batch versions
used by the tracker's dense event-to-face evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "GeometryError",
    "PinholeCamera",
    "Ray",
    "TriFace",
    "FaceEventGeometry",
    "line_of_sight",
    "lateral_distance",
    "longitudinal_distance",
    "angular_error",
    "face_event_geometry",
    "batch_geometry",
]

_DEGENERATE_EPS = 1e-12


class GeometryError(ValueError):
    """Raised on invalid geometric inputs (out-of-bounds pixel, degenerate face)."""


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics plus an optional rigid camera-to-world transform.

    By default the camera sits at the world origin looking down +z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    r_cam_to_world: NDArray[np.float64] = field(
        default_factory=lambda: np.eye(3)
    )
    t_cam_to_world: NDArray[np.float64] = field(
        default_factory=lambda: np.zeros(3)
    )

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the sensor")
        object.__setattr__(self, "r_cam_to_world", np.asarray(self.r_cam_to_world, dtype=float))
        object.__setattr__(self, "t_cam_to_world", np.asarray(self.t_cam_to_world, dtype=float))

    @property
    def center(self) -> NDArray[np.float64]:
        """Camera center in world coordinates."""
        return self.t_cam_to_world

    def to_camera_frame(self, points_world: NDArray[np.float64]) -> NDArray[np.float64]:
        """Map world points (... , 3) into the camera frame."""
        pts = np.asarray(points_world, dtype=float)
        return (pts - self.t_cam_to_world) @ self.r_cam_to_world

    def project(self, points_world: NDArray[np.float64]) -> NDArray[np.float64]:
        """Project world points (..., 3) to pixel coordinates (..., 2).

        Points at or behind the camera plane produce non-finite pixels.
        """
        pc = self.to_camera_frame(points_world)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        out = np.stack([u, v], axis=-1)
        out[z <= 0] = np.nan
        return out

    def unproject(self, pixel, depth: float) -> NDArray[np.float64]:
        """World point at camera-frame depth `depth` along the pixel's sight line."""
        px, py = float(pixel[0]), float(pixel[1])
        pc = np.array([(px - self.cx) / self.fx * depth,
                       (py - self.cy) / self.fy * depth,
                       depth])
        return self.r_cam_to_world @ pc + self.t_cam_to_world


@dataclass(frozen=True)
class Ray:
    """A sight line: origin plus unit direction, both in world coordinates."""

    origin: NDArray[np.float64]
    direction: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class TriFace:
    """A single triangle with cached unit normal and centroid."""

    v0: NDArray[np.float64]
    v1: NDArray[np.float64]
    v2: NDArray[np.float64]
    normal: NDArray[np.float64] = field(init=False)
    centroid: NDArray[np.float64] = field(init=False)

    def __post_init__(self):
        v0 = np.asarray(self.v0, dtype=float)
        v1 = np.asarray(self.v1, dtype=float)
        v2 = np.asarray(self.v2, dtype=float)
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)
        cross = np.cross(v1 - v0, v2 - v0)
        area2 = np.linalg.norm(cross)
        if area2 <= _DEGENERATE_EPS:
            raise GeometryError("degenerate triangle face")
        object.__setattr__(self, "normal", cross / area2)
        object.__setattr__(self, "centroid", (v0 + v1 + v2) / 3.0)


@dataclass(frozen=True)
class FaceEventGeometry:
    """The (d_lat, sign, d_long, r_ang) tuple for one (ray, face) pair."""

    d_lat: float
    sign: int
    d_long: float
    r_ang: float


def line_of_sight(camera: PinholeCamera, pixel) -> Ray:
    """Build the world-frame sight line through a pixel.

    Raises GeometryError when the pixel lies outside the sensor.
    """
    px, py = float(pixel[0]), float(pixel[1])
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise GeometryError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} sensor")
    d_cam = np.array([(px - camera.cx) / camera.fx,
                      (py - camera.cy) / camera.fy,
                      1.0])
    d_world = camera.r_cam_to_world @ d_cam
    return Ray(origin=camera.center, direction=d_world / np.linalg.norm(d_world))


def _segment_line_distance(a, b, origin, direction):
    """Min distance between segment [a, b] and the infinite line (origin, direction)."""
    # distance of a point p to the line is ||(I - dd^T)(p - o)||; minimizing the
    # quadratic in the segment parameter and clamping to [0, 1] is exact because
    # the squared distance is convex along the segment.
    e = b - a
    u = (a - origin) - np.dot(a - origin, direction) * direction
    w = e - np.dot(e, direction) * direction
    ww = np.dot(w, w)
    if ww <= _DEGENERATE_EPS:
        s = 0.0
    else:
        s = np.clip(-np.dot(u, w) / ww, 0.0, 1.0)
    return float(np.linalg.norm(u + s * w))


def _ray_hits_interior(ray: Ray, face: TriFace) -> bool:
    """True when the sight line pierces the triangle interior in front of the origin."""
    denom = np.dot(ray.direction, face.normal)
    if abs(denom) <= _DEGENERATE_EPS:
        return False
    t = np.dot(face.centroid - ray.origin, face.normal) / denom
    if t < 0:
        return False
    p = ray.origin + t * ray.direction
    # barycentric test with a small negative slack so edge hits count as interior
    e0, e1 = face.v1 - face.v0, face.v2 - face.v0
    q = p - face.v0
    d00, d01, d11 = np.dot(e0, e0), np.dot(e0, e1), np.dot(e1, e1)
    q0, q1 = np.dot(q, e0), np.dot(q, e1)
    det = d00 * d11 - d01 * d01
    if det <= _DEGENERATE_EPS:
        return False
    b1 = (d11 * q0 - d01 * q1) / det
    b2 = (d00 * q1 - d01 * q0) / det
    b0 = 1.0 - b1 - b2
    return b0 >= -1e-9 and b1 >= -1e-9 and b2 >= -1e-9


def lateral_distance(ray: Ray, face: TriFace) -> tuple[float, int]:
    """Lateral distance and sign indicator for one (ray, face) pair.

    Returns the minimum over the three face edges of the segment-to-line
    distance, and +1 when the sight line pierces the face interior, -1
    otherwise.
    """
    d = min(
        _segment_line_distance(face.v0, face.v1, ray.origin, ray.direction),
        _segment_line_distance(face.v1, face.v2, ray.origin, ray.direction),
        _segment_line_distance(face.v2, face.v0, ray.origin, ray.direction),
    )
    sign = 1 if (d == 0.0 or _ray_hits_interior(ray, face)) else -1
    return d, sign


def longitudinal_distance(ray: Ray, face: TriFace) -> float:
    """Ray parameter of the face centroid's orthogonal projection onto the line.

    Non-positive values mean the face sits behind the camera; callers treat
    such faces as non-associable.
    """
    return float(np.dot(face.centroid - ray.origin, ray.direction))


def angular_error(ray: Ray, face: TriFace) -> float:
    """Absolute cosine between ray direction and face normal, in [0, 1]."""
    return float(min(1.0, abs(np.dot(ray.direction, face.normal))))


def face_event_geometry(ray: Ray, face: TriFace) -> FaceEventGeometry:
    """All three quantities plus the sign for one (ray, face) pair."""
    d_lat, sign = lateral_distance(ray, face)
    return FaceEventGeometry(
        d_lat=d_lat,
        sign=sign,
        d_long=longitudinal_distance(ray, face),
        r_ang=angular_error(ray, face),
    )


def batch_geometry(origins, directions, v0, v1, v2, normals, centroids):
    """Dense event-to-face geometry for N rays against F faces.

    origins/directions: (N, 3); v0/v1/v2/normals/centroids: (F, 3).
    Returns (d_lat, sign, d_long, r_ang), each of shape (N, F). Matches the
    scalar functions to floating-point round-off.
    """
    o = np.asarray(origins, dtype=float)[:, None, :]      # (N,1,3)
    d = np.asarray(directions, dtype=float)[:, None, :]   # (N,1,3)

    d_lat = None
    for a, b in ((v0, v1), (v1, v2), (v2, v0)):
        a = np.asarray(a, dtype=float)[None, :, :]        # (1,F,3)
        e = np.asarray(b, dtype=float)[None, :, :] - a
        ao = a - o
        u = ao - np.sum(ao * d, axis=-1, keepdims=True) * d
        w = e - np.sum(e * d, axis=-1, keepdims=True) * d
        ww = np.sum(w * w, axis=-1)
        uw = np.sum(u * w, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.clip(-uw / ww, 0.0, 1.0)
        s = np.where(ww <= _DEGENERATE_EPS, 0.0, s)
        dist = np.linalg.norm(u + s[..., None] * w, axis=-1)
        d_lat = dist if d_lat is None else np.minimum(d_lat, dist)

    n = np.asarray(normals, dtype=float)[None, :, :]
    c = np.asarray(centroids, dtype=float)[None, :, :]

    d_long = np.sum((c - o) * d, axis=-1)
    r_ang = np.minimum(1.0, np.abs(np.sum(d * n, axis=-1)))

    # sign: pierce test via plane intersection + barycentric coordinates
    denom = np.sum(d * n, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sum((c - o) * n, axis=-1) / denom
    valid = (np.abs(denom) > _DEGENERATE_EPS) & (t >= 0)
    with np.errstate(invalid="ignore"):
        p = o + np.where(valid, t, 0.0)[..., None] * d
    a0 = np.asarray(v0, dtype=float)[None, :, :]
    e0 = np.asarray(v1, dtype=float)[None, :, :] - a0
    e1 = np.asarray(v2, dtype=float)[None, :, :] - a0
    q = p - a0
    d00 = np.sum(e0 * e0, axis=-1)
    d01 = np.sum(e0 * e1, axis=-1)
    d11 = np.sum(e1 * e1, axis=-1)
    q0 = np.sum(q * e0, axis=-1)
    q1 = np.sum(q * e1, axis=-1)
    det = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        b1 = (d11 * q0 - d01 * q1) / det
        b2 = (d00 * q1 - d01 * q0) / det
    b0 = 1.0 - b1 - b2
    inside = valid & (det > _DEGENERATE_EPS) & (b0 >= -1e-9) & (b1 >= -1e-9) & (b2 >= -1e-9)
    sign = np.where(inside | (d_lat == 0.0), 1, -1)

    return d_lat, sign, d_long, r_ang
