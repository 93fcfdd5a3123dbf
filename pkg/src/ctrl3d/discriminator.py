"""Progressive-growing convolutional discriminator.

The trunk is a stack of strided residual blocks that halve resolution down
to 4x4. Growing to a doubled resolution prepends one block and a new input
head; the network then accepts exactly the new resolution and nothing else.
An optional branch regresses the (pitch, yaw) of the input image in raw
radians.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

# channel width per feature-map resolution, scaled by base_channels/64
_CHANNELS = {4: 256, 8: 256, 16: 128, 32: 128, 64: 64, 128: 32, 256: 16}


def _channels(resolution: int, base_channels: int) -> int:
    if resolution not in _CHANNELS:
        raise ConfigError(f"unsupported discriminator resolution {resolution}")
    return max(8, _CHANNELS[resolution] * base_channels // 64)


class ResDownBlock(nn.Module):
    """Two 3x3 convs + average-pool downsample, with a 1x1 shortcut."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        y = F.avg_pool2d(y, 2)
        s = F.avg_pool2d(self.shortcut(x), 2)
        return (y + s) / math.sqrt(2.0)


class ProgressiveDiscriminator(nn.Module):
    def __init__(
        self,
        start_resolution: int = 32,
        base_channels: int = 64,
        predict_pose: bool = False,
    ):
        super().__init__()
        if start_resolution < 8 or start_resolution & (start_resolution - 1):
            raise ConfigError("start_resolution must be a power of two >= 8")
        self.base_channels = base_channels
        self.predict_pose = predict_pose
        self.current_resolution = 0
        self.from_rgb = nn.ModuleDict()
        self.blocks = nn.ModuleDict()

        res = 8
        while res <= start_resolution:
            self._add_stage(res)
            res *= 2

        final_ch = _channels(4, base_channels)
        self.final = nn.Linear(final_ch * 4 * 4, final_ch)
        self.realness_head = nn.Linear(final_ch, 1)
        self.pose_head = nn.Linear(final_ch, 2) if predict_pose else None

    def _add_stage(self, resolution: int):
        key = str(resolution)
        self.from_rgb[key] = nn.Conv2d(3, _channels(resolution, self.base_channels), 1)
        self.blocks[key] = ResDownBlock(
            _channels(resolution, self.base_channels),
            _channels(resolution // 2, self.base_channels),
        )
        self.current_resolution = max(self.current_resolution, resolution)

    def grow(self) -> int:
        """Add an input head and block for the doubled resolution."""
        new_res = self.current_resolution * 2
        self._add_stage(new_res)
        return new_res

    def features(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError("discriminator expects (B, 3, H, W) images")
        res = images.shape[-1]
        if images.shape[-2] != res or res != self.current_resolution:
            raise ConfigError(
                f"discriminator is at resolution {self.current_resolution}, "
                f"got {images.shape[-2]}x{images.shape[-1]}"
            )
        h = F.leaky_relu(self.from_rgb[str(res)](images), 0.2)
        while res > 4:
            h = self.blocks[str(res)](h)
            res //= 2
        h = h.flatten(1)
        return F.leaky_relu(self.final(h), 0.2)

    def forward(self, images: torch.Tensor):
        """Realness logits (B,) and pose predictions (B, 2) or None."""
        feat = self.features(images)
        realness = self.realness_head(feat).squeeze(-1)
        pose = self.pose_head(feat) if self.pose_head is not None else None
        return realness, pose
