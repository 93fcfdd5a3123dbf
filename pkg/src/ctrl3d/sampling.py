"""Depth sampling along rays: stratified bins plus importance resampling."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .camera import RayBatch
from .errors import ConfigError


@dataclass
class SampleSet:
    """Per-ray sample depths (..., R, S) and world positions (..., R, S, 3),
    sorted by depth along each ray."""

    depths: torch.Tensor
    positions: torch.Tensor

    @property
    def samples_per_ray(self) -> int:
        return self.depths.shape[-1]


def _positions(rays: RayBatch, depths: torch.Tensor) -> torch.Tensor:
    return rays.origins[..., None, :] + depths[..., None] * rays.directions[..., None, :]


def stratified_sample(
    rays: RayBatch,
    n: int,
    generator: torch.Generator | None = None,
    jitter: bool = True,
) -> SampleSet:
    """One depth per bin over ``n`` equal bins of [near, far].

    With ``jitter`` the depth is uniform inside its bin; without it the depth
    is the bin midpoint, which makes the output deterministic.
    """
    if n < 1:
        raise ConfigError(f"need at least one sample per ray, got {n}")
    shape = rays.directions.shape[:-1]  # (..., R)
    dtype = rays.directions.dtype
    bin_width = (rays.far - rays.near) / n
    edges = rays.near + bin_width * torch.arange(n, dtype=dtype)
    if jitter:
        offset = torch.rand(*shape, n, dtype=dtype, generator=generator)
    else:
        offset = torch.full((*shape, n), 0.5, dtype=dtype)
    depths = edges + offset * bin_width
    return SampleSet(depths, _positions(rays, depths))


def sample_importance(
    depths: torch.Tensor,
    weights: torch.Tensor,
    n: int,
    near: float,
    far: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw ``n`` depths per ray by inverse-CDF over the piecewise-constant
    density proportional to ``weights``.

    Bin edges are [near, midpoints between adjacent depths, far], one bin per
    coarse sample. All-zero weight rows fall back to a uniform density.
    """
    if weights.shape != depths.shape:
        raise ConfigError("weights must have one entry per coarse sample")
    if (weights < 0).any():
        raise ConfigError("importance weights must be non-negative")
    dtype = depths.dtype
    mids = 0.5 * (depths[..., 1:] + depths[..., :-1])
    lo = torch.full_like(depths[..., :1], near)
    hi = torch.full_like(depths[..., :1], far)
    edges = torch.cat([lo, mids, hi], dim=-1)  # (..., S+1)

    total = weights.sum(dim=-1, keepdim=True)
    uniform = torch.ones_like(weights) / weights.shape[-1]
    pdf = torch.where(total > 0, weights / total.clamp_min(1e-12), uniform)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)  # (..., S+1)
    cdf[..., -1] = 1.0  # guard against cumulative-sum round-off

    u = torch.rand(*depths.shape[:-1], n, dtype=dtype, generator=generator)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, depths.shape[-1]) - 1
    cdf_lo = torch.gather(cdf, -1, idx)
    cdf_hi = torch.gather(cdf, -1, idx + 1)
    edge_lo = torch.gather(edges, -1, idx)
    edge_hi = torch.gather(edges, -1, idx + 1)
    frac = (u - cdf_lo) / (cdf_hi - cdf_lo).clamp_min(1e-12)
    return edge_lo + frac * (edge_hi - edge_lo)


def hierarchical_sample(
    rays: RayBatch,
    coarse_depths: torch.Tensor,
    coarse_weights: torch.Tensor,
    n: int,
    generator: torch.Generator | None = None,
) -> SampleSet:
    """Importance-sample ``n`` new depths from the coarse compositing weights
    and merge them, sorted, with the coarse depths."""
    fine = sample_importance(
        coarse_depths, coarse_weights.detach(), n, rays.near, rays.far, generator
    )
    depths, _ = torch.sort(torch.cat([coarse_depths, fine], dim=-1), dim=-1)
    return SampleSet(depths, _positions(rays, depths))
