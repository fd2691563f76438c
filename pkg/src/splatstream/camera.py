"""Pinhole camera with an OpenCV-style frame: x right, y down, z forward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParameterError
from .model import quat_to_matrix


@dataclass(frozen=True)
class Camera:
    position: tuple
    orientation: tuple  # camera-to-world unit quaternion (w, x, y, z)
    vertical_fov: float = np.pi / 3
    aspect: float = 16 / 9
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        q = np.asarray(self.orientation, dtype=np.float64)
        n = np.linalg.norm(q)
        if q.shape != (4,) or n == 0:
            raise ParameterError("orientation must be a non-zero quaternion")
        object.__setattr__(self, "orientation", tuple((q / n).tolist()))
        if not 0 < self.vertical_fov < np.pi:
            raise ParameterError("vertical_fov must lie in (0, pi)")
        if not self.aspect > 0:
            raise ParameterError("aspect must be positive")
        if not 0 < self.near < self.far:
            raise ParameterError("need 0 < near < far")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), **kw) -> "Camera":
        """Camera at eye looking at target; `up` is the world direction of image-up."""
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        if not np.linalg.norm(fwd) > 0:
            raise ParameterError("eye and target coincide")
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, float))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(fwd, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        m = np.stack([right, down, fwd], axis=1)
        x, y, z, w = Rotation.from_matrix(m).as_quat()
        return cls(tuple(eye), (w, x, y, z), **kw)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        ty = float(np.tan(self.vertical_fov / 2))
        return ty * self.aspect, ty

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (p - np.asarray(self.position)) @ self.rotation

    def frustum_planes(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space planes (normals, offsets); inside means n.x + d >= 0."""
        tx, ty = self.tan_half_fov
        n_cam = np.array([
            [0, 0, 1], [0, 0, -1],
            [1, 0, tx], [-1, 0, tx],
            [0, 1, ty], [0, -1, ty],
        ], dtype=np.float64)
        d_cam = np.array([-self.near, self.far, 0, 0, 0, 0], dtype=np.float64)
        n_world = n_cam @ self.rotation.T
        d_world = d_cam - n_world @ np.asarray(self.position)
        return n_world, d_world

    def contains(self, points) -> np.ndarray:
        pc = self.to_camera(points)
        tx, ty = self.tan_half_fov
        z = pc[:, 2]
        return ((z > self.near) & (z < self.far)
                & (np.abs(pc[:, 0]) <= z * tx) & (np.abs(pc[:, 1]) <= z * ty))


def aabb_in_frustum(cam: Camera, lo, hi, tol: float = 1e-9) -> bool:
    """Conservative plane test: False only if the box is fully outside one plane."""
    n, d = cam.frustum_planes()
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    pvert = np.where(n >= 0, hi, lo)
    return bool(np.all(np.einsum("ij,ij->i", n, pvert) + d >= -tol))


def frustum_coverage(cam: Camera, lo, hi, samples: int = 20) -> float:
    """Fraction of a box's volume inside the frustum, by a regular sample lattice."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    axes = [lo[a] + (np.arange(samples) + 0.5) / samples * (hi[a] - lo[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return float(np.mean(cam.contains(grid)))
