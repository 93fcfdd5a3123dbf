"""Orbit camera model and per-pixel ray generation.

Convention (used by every consumer in this package):

* world up is +y, the camera sits on a sphere of ``radius`` around the origin
  and always looks at the origin;
* ``pitch`` rotates about the horizontal (x) axis, ``yaw`` about the vertical
  (y) axis, both in radians;
* ``pitch = yaw = 0`` puts the camera at ``(0, 0, radius)``;
* camera-to-world rotation is ``R_y(yaw) @ R_x(-pitch)`` and the camera looks
  along its local -z axis, so the camera position is
  ``radius * (cos(pitch)·sin(yaw), sin(pitch), cos(pitch)·cos(yaw))``.

Rays use a perspective pinhole model with a square field of view: one ray per
pixel, through the pixel center, directions normalized to unit length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError

DEFAULT_FOV_DEG = 12.0
DEFAULT_RADIUS = 1.0
DEFAULT_NEAR = 0.88
DEFAULT_FAR = 1.12


@dataclass(frozen=True)
class CameraView:
    """A single viewpoint: orbit angles plus the intrinsics of the orbit camera."""

    pitch: float = 0.0
    yaw: float = 0.0
    fov: float = DEFAULT_FOV_DEG  # full field of view, degrees
    radius: float = DEFAULT_RADIUS
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise ConfigError(f"pitch/yaw must be finite, got {self.pitch}, {self.yaw}")
        if self.fov <= 0:
            raise ConfigError(f"fov must be positive, got {self.fov}")
        if not self.near < self.far:
            raise ConfigError(f"need near < far, got near={self.near}, far={self.far}")


@dataclass
class RayBatch:
    """One ray per pixel. ``origins``/``directions`` are (..., h*w, 3);
    directions are unit length. ``near``/``far`` bound depth sampling."""

    origins: torch.Tensor
    directions: torch.Tensor
    height: int
    width: int
    near: float
    far: float

    @property
    def num_rays(self) -> int:
        return self.height * self.width


def rotation_from_angles(pitch: torch.Tensor, yaw: torch.Tensor) -> torch.Tensor:
    """Batched camera-to-world rotation ``R_y(yaw) @ R_x(-pitch)`` of shape (..., 3, 3)."""
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    one = torch.ones_like(cp)
    zero = torch.zeros_like(cp)
    rx = torch.stack(
        [one, zero, zero, zero, cp, sp, zero, -sp, cp], dim=-1
    ).reshape(*cp.shape, 3, 3)
    ry = torch.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=-1
    ).reshape(*cy.shape, 3, 3)
    return ry @ rx


def camera_from_view(view: CameraView, dtype: torch.dtype = torch.float32):
    """Rigid camera-to-world transform for a view: (rotation (3,3), position (3,))."""
    pitch = torch.tensor(view.pitch, dtype=dtype)
    yaw = torch.tensor(view.yaw, dtype=dtype)
    rot = rotation_from_angles(pitch, yaw)
    position = view.radius * rot @ torch.tensor([0.0, 0.0, 1.0], dtype=dtype)
    return rot, position


def _pixel_grid(height: int, width: int, fov_deg: float, dtype: torch.dtype) -> torch.Tensor:
    """Camera-space unit directions through pixel centers, shape (h*w, 3).

    x grows to the right, y upward, the camera looks along -z. The center
    pixel of an odd-resolution grid lands exactly on the optical axis.
    """
    tan_half = math.tan(math.radians(fov_deg) / 2.0)
    xs = (torch.arange(width, dtype=dtype) + 0.5) / width * 2.0 - 1.0
    ys = 1.0 - (torch.arange(height, dtype=dtype) + 0.5) / height * 2.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dirs = torch.stack(
        [gx * tan_half, gy * tan_half, -torch.ones_like(gx)], dim=-1
    ).reshape(-1, 3)
    return dirs / dirs.norm(dim=-1, keepdim=True)


def generate_rays(
    view: CameraView,
    resolution: tuple[int, int],
    dtype: torch.dtype = torch.float32,
) -> RayBatch:
    """Rays for a single view at (height, width) resolution."""
    height, width = resolution
    if height < 1 or width < 1:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    rot, position = camera_from_view(view, dtype=dtype)
    dirs_cam = _pixel_grid(height, width, view.fov, dtype)
    dirs_world = dirs_cam @ rot.T
    origins = position.expand_as(dirs_world)
    return RayBatch(origins, dirs_world, height, width, view.near, view.far)


def generate_ray_batch(
    pitch: torch.Tensor,
    yaw: torch.Tensor,
    resolution: tuple[int, int],
    fov: float = DEFAULT_FOV_DEG,
    radius: float = DEFAULT_RADIUS,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> RayBatch:
    """Rays for a batch of (pitch, yaw) angle pairs; origins/directions are (B, h*w, 3)."""
    height, width = resolution
    if height < 1 or width < 1:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    if pitch.shape != yaw.shape:
        raise ConfigError("pitch and yaw must have matching shapes")
    rot = rotation_from_angles(pitch, yaw)  # (B, 3, 3)
    forward_axis = torch.tensor([0.0, 0.0, 1.0], dtype=pitch.dtype)
    positions = radius * rot @ forward_axis  # (B, 3)
    dirs_cam = _pixel_grid(height, width, fov, pitch.dtype)  # (R, 3)
    dirs_world = torch.einsum("bij,rj->bri", rot, dirs_cam)
    origins = positions[:, None, :].expand_as(dirs_world)
    return RayBatch(origins, dirs_world, height, width, near, far)
