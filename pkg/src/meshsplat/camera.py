"""Pinhole camera model, look-at construction, and the camera set file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    """Invalid camera parameters or camera file."""


@dataclass(frozen=True)
class Camera:
    """World-to-camera rigid transform plus pixel-unit pinhole intrinsics.

    Convention: p_cam = rotation @ p_world + translation, camera looks down
    +z, x right, y down; pixel centers sit at integer coordinates with (0,0)
    the top-left pixel center; image arrays are indexed [v, u].
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise CameraError("rotation is not orthonormal (tolerance 1e-9)")
        if not (0 < self.near < self.far):
            raise CameraError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width < 1 or self.height < 1:
            raise CameraError("width and height must be >= 1")
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def look_at(position, target, up_hint=(0.0, 0.0, 1.0), **intrinsics) -> Camera:
    """Camera at `position` with +z aimed at `target`.

    When the viewing direction is (anti)parallel to up_hint the hint falls
    back to +y, keeping the top-down view well defined.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise CameraError("camera position coincides with the look-at target")
    forward = forward / dist
    up = np.asarray(up_hint, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if abs(forward @ up) > 1.0 - 1e-8:
        up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(forward, up)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(forward, x_axis)
    rotation = np.stack([x_axis, y_axis, forward])
    return Camera(rotation=rotation, translation=-rotation @ position, **intrinsics)


def default_intrinsics(width: int, height: int, focal_scale: float = 1.2) -> dict:
    """Square-pixel intrinsics with the principal point at the image center.

    focal = focal_scale * min(width, height); the default keeps a unit-radius
    object at distance 3 comfortably inside the frame.
    """
    f = focal_scale * min(width, height)
    return {
        "fx": f, "fy": f,
        "cx": (width - 1) / 2.0, "cy": (height - 1) / 2.0,
        "width": width, "height": height,
    }


# ---------------------------------------------------------------------------
# Camera set file: '#' comments; one view per line:
# r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz fx fy cx cy width height
# ---------------------------------------------------------------------------

def save_cameras(cameras, path) -> None:
    lines = [
        "# camera set: one view per line",
        "# r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz fx fy cx cy width height",
    ]
    for cam in cameras:
        vals = [*cam.rotation.reshape(-1), *cam.translation, cam.fx, cam.fy, cam.cx, cam.cy]
        lines.append(" ".join("%.17g" % v for v in vals) + f" {cam.width} {cam.height}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list:
    cameras = []
    path = Path(path)
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 18:
                raise CameraError(f"{path}:{lineno}: expected 18 values, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise CameraError(f"{path}:{lineno}: non-numeric value")
            cameras.append(Camera(
                rotation=np.array(vals[0:9]).reshape(3, 3),
                translation=np.array(vals[9:12]),
                fx=vals[12], fy=vals[13], cx=vals[14], cy=vals[15],
                width=int(vals[16]), height=int(vals[17]),
            ))
    return cameras
