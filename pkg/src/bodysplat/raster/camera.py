"""Pinhole camera with OpenCV axes: x right, y down, z forward.

Rays go through integer pixel coordinates, so the ray of pixel (cx, cy)
is exactly the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..quatgeom import normalize


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4) rigid

    def __post_init__(self):
        object.__setattr__(self, "world_to_camera",
                           np.asarray(self.world_to_camera, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        m = self.world_to_camera
        if m.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-5 or np.linalg.det(r) < 0.0:
            raise ValueError("world_to_camera rotation block is not a proper rotation")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-8:
            raise ValueError("world_to_camera last row must be (0, 0, 0, 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center_world(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into the camera frame."""
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (..., 2) and camera depth (...,) of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        x = self.fx * pc[..., 0] / z + self.cx
        y = self.fy * pc[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def ray_dir(self, x: float, y: float) -> np.ndarray:
        """Camera-frame ray direction through pixel (x, y), z-normalized."""
        return np.array([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_camera": [[float(v) for v in row] for row in self.world_to_camera],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
        )


def make_lookat_camera(eye: np.ndarray, target: np.ndarray,
                       fx: float, fy: float, cx: float, cy: float,
                       width: int, height: int,
                       up_hint: np.ndarray = (0.0, 1.0, 0.0)) -> Camera:
    """Camera at `eye` looking at `target`; up_hint fixes the roll."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = normalize(np.asarray(target, dtype=np.float64) - eye)
    right = normalize(np.cross(forward, np.asarray(up_hint, dtype=np.float64)))
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = -rot @ eye
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  world_to_camera=m)
