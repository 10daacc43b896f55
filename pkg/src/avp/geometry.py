"""Rigid transforms and pinhole projection.

Points are plain ``numpy`` arrays of shape ``(3,)`` in meters. Unless noted
otherwise they live in the robot-base frame. Pixel coordinates use a top-left
origin with ``u`` to the right and ``v`` downward; pixel ``(i, j)`` covers
``[i, i+1) x [j, j+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AVPError, BehindCamera

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-9


def as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise AVPError(f"point has non-finite components: {p}")
    return p


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps base-frame points to camera-frame points: ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = as_point(self.translation)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def orthonormality_error(self) -> float:
        """Largest deviation from ``R^T R = I`` and ``det R = 1``."""
        r = self.rotation
        e = np.max(np.abs(r.T @ r - np.eye(3)))
        return float(max(e, abs(np.linalg.det(r) - 1.0)))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return self.orthonormality_error() <= tol

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __call__(self, p) -> np.ndarray:
        return transform_point(self, p)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise AVPError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelAnchor:
    """A continuous image-plane location. ``depth`` is the camera-frame z."""

    u: float
    v: float
    depth: float

    def __iter__(self):
        return iter((self.u, self.v, self.depth))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform ``p -> a(b(p))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ as_point(p) + t.translation


def project(k: CameraIntrinsics, t: RigidTransform, p) -> PixelAnchor:
    """Perspective projection of a base-frame point.

    Raises ``BehindCamera`` when the camera-frame depth is not above 1e-9 m.
    """
    pc = transform_point(t, p)
    z = pc[2]
    if z <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {z:.3g} m is not in front of the camera")
    return PixelAnchor(float(k.fx * pc[0] / z + k.cx), float(k.fy * pc[1] / z + k.cy), float(z))


def unproject(k: CameraIntrinsics, t: RigidTransform, a: PixelAnchor) -> np.ndarray:
    """Lift a pixel anchor with known depth back to a base-frame point."""
    if not a.depth > 0:
        raise AVPError(f"anchor depth must be positive, got {a.depth}")
    pc = np.array([(a.u - k.cx) * a.depth / k.fx, (a.v - k.cy) * a.depth / k.fy, a.depth])
    return t.rotation.T @ (pc - t.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Base-to-camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z along the optical axis.
    """
    eye = as_point(eye)
    fwd = as_point(target) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, as_point(up))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise AVPError("viewing direction is parallel to the up vector")
    right /= n
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return RigidTransform(r, -r @ eye)
