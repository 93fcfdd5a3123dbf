"""Analytic test scenes: ray-traced marker spheres with known poses.

The sphere carries four asymmetric color patches plus Lambertian shading, so
its rendered appearance identifies the camera pose uniquely inside the
training pose box. Rendering is closed-form ray-sphere intersection through
the same orbit camera as the volume renderer, which makes these images an
independent oracle for anything pose-related.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .camera import CameraView, generate_ray_batch
from .errors import ConfigError

SPHERE_RADIUS = 0.08  # fills most of the default 12-degree field of view

_ANCHORS = torch.tensor(
    [
        [0.0, 0.2, 1.0],
        [1.0, 0.3, -0.2],
        [-0.6, 1.0, 0.1],
        [0.3, -1.0, 0.4],
    ]
)
_ANCHORS = _ANCHORS / _ANCHORS.norm(dim=1, keepdim=True)

_PATCH_COLORS = torch.tensor(
    [
        [0.9, 0.15, 0.1],
        [0.1, 0.75, 0.2],
        [0.15, 0.3, 0.9],
        [0.95, 0.85, 0.1],
    ]
)

_LIGHT = torch.tensor([0.5, 0.7, 1.0]) / torch.tensor([0.5, 0.7, 1.0]).norm()
_BACKGROUND = 0.05


def render_marker_spheres(
    views: torch.Tensor,
    resolution: int,
    camera: CameraView | None = None,
    sphere_radius: float = SPHERE_RADIUS,
) -> torch.Tensor:
    """Render (B, 3, res, res) images of the marker sphere for (B, 2) views."""
    if views.ndim != 2 or views.shape[1] != 2:
        raise ConfigError("views must be (B, 2) pitch/yaw pairs")
    cam = camera or CameraView()
    rays = generate_ray_batch(
        views[:, 0], views[:, 1], (resolution, resolution),
        fov=cam.fov, radius=cam.radius, near=cam.near, far=cam.far,
    )
    o, d = rays.origins, rays.directions  # (B, R, 3), unit directions
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - sphere_radius**2
    disc = b * b - c
    hit = disc > 0
    t = -b - torch.sqrt(disc.clamp_min(0.0))
    hit = hit & (t > 0)

    p = o + t[..., None] * d
    n = p / sphere_radius
    patch = (n @ _ANCHORS.T).argmax(dim=-1)  # (B, R)
    color = _PATCH_COLORS[patch]
    shade = 0.35 + 0.65 * (n @ _LIGHT).clamp_min(0.0)
    pixels = torch.where(
        hit[..., None], color * shade[..., None],
        torch.full_like(color, _BACKGROUND),
    )
    batch = views.shape[0]
    return pixels.transpose(1, 2).reshape(batch, 3, resolution, resolution)


def sphere_pose_dataset(
    size: int,
    resolution: int,
    seed: int = 0,
    pitch_range=(-torch.pi / 6, torch.pi / 6),
    yaw_range=(-torch.pi / 4, torch.pi / 4),
    camera: CameraView | None = None,
):
    """``size`` rendered spheres at uniform poses: (images, views)."""
    gen = torch.Generator().manual_seed(seed)
    pitch = torch.rand(size, generator=gen) * (pitch_range[1] - pitch_range[0]) + pitch_range[0]
    yaw = torch.rand(size, generator=gen) * (yaw_range[1] - yaw_range[0]) + yaw_range[0]
    views = torch.stack([pitch, yaw], dim=-1)
    images = []
    for start in range(0, size, 256):
        images.append(render_marker_spheres(views[start:start + 256], resolution, camera))
    return torch.cat(images), views


class SphereDataset:
    """In-memory marker-sphere dataset with the trainer's batch interface.
    Images render once at ``native_resolution`` and are bilinearly resized
    down for earlier progressive stages."""

    def __init__(self, size: int = 64, native_resolution: int = 64, seed: int = 0,
                 camera: CameraView | None = None):
        self.native_resolution = native_resolution
        self.images, self.views = sphere_pose_dataset(
            size, native_resolution, seed=seed, camera=camera
        )

    def __len__(self) -> int:
        return self.images.shape[0]

    def describe(self) -> dict:
        return {
            "kind": "spheres",
            "size": len(self),
            "native_resolution": self.native_resolution,
        }

    def batch(self, indices, resolution: int) -> torch.Tensor:
        imgs = self.images[torch.as_tensor(indices, dtype=torch.long)]
        if resolution == self.native_resolution:
            return imgs.clone()
        return F.interpolate(imgs, size=(resolution, resolution),
                             mode="bilinear", align_corners=False)
