"""Alpha-compositing volume rendering.

``composite`` turns per-sample colors and densities into pixel values with
the classic emission-absorption model:

    pixel = sum_k T_k * (1 - exp(-sigma_k * delta_k)) * c_k,
    T_k   = exp(-sum_{j<k} sigma_j * delta_j)

Two interchangeable backends compute it: a Cython kernel with a fused
forward/backward scan (built at install time) and a pure-torch fallback.
The backend is selected at import; ``CTRL3D_COMPOSITE_BACKEND=torch|ext``
or the ``backend=`` argument override it.

By default the final sample gets a large sentinel interval (1e10) so it
absorbs all residual transmittance; passing ``far`` instead bounds the
integration at the far plane, which is the mode to use when comparing
against a quadrature of the continuous integral. Rays that remain fully
transparent composite over ``background`` (black unless given).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericError

try:
    from . import _compose_core
except ImportError:  # extension not built; fall back to torch ops
    _compose_core = None

SENTINEL_DELTA = 1e10

HAS_EXTENSION = _compose_core is not None
_ENV_BACKEND = os.environ.get("CTRL3D_COMPOSITE_BACKEND", "").strip().lower() or None


def default_backend() -> str:
    if _ENV_BACKEND in ("ext", "torch"):
        return _ENV_BACKEND
    return "ext" if HAS_EXTENSION else "torch"


@dataclass
class CompositeResult:
    """Per-ray render outputs: rgb (..., 3), expected depth (...,) and the
    per-sample weights (..., S) reused by importance sampling."""

    rgb: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor


def deltas_from_depths(
    depths: torch.Tensor, far: float | None, near: float | None = None
) -> torch.Tensor:
    """Per-sample integration intervals.

    Default: forward differences with the sentinel closing interval. With
    ``far``, the last interval ends at the far plane. With ``near`` as well,
    the first interval starts at the near plane, so the intervals partition
    [near, far] exactly (the mode to use against a quadrature of the
    continuous integral).
    """
    inner = depths[..., 1:] - depths[..., :-1]
    if far is None:
        last = torch.full_like(depths[..., :1], SENTINEL_DELTA)
    else:
        last = (far - depths[..., -1:]).clamp_min(0.0)
    deltas = torch.cat([inner, last], dim=-1)
    if near is not None:
        head = (depths[..., :1] - near).clamp_min(0.0)
        deltas = torch.cat([deltas[..., :1] + head, deltas[..., 1:]], dim=-1)
    return deltas


def _composite_torch(sigma, colors, deltas, depths, background):
    optical = sigma * deltas
    alpha = 1.0 - torch.exp(-optical)
    # exclusive cumulative sum by padding: subtracting `optical` instead would
    # cancel catastrophically against the sentinel interval
    accum_before = torch.cumsum(
        torch.cat([torch.zeros_like(optical[..., :1]), optical[..., :-1]], dim=-1),
        dim=-1,
    )
    weights = torch.exp(-accum_before) * alpha
    acc = weights.sum(dim=-1, keepdim=True)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - acc) * background
    depth = (weights * depths).sum(dim=-1)
    return rgb, depth, weights


class _CompositeExt(torch.autograd.Function):
    """Autograd wrapper over the Cython scan; differentiable in sigma and colors."""

    @staticmethod
    def forward(ctx, sigma, colors, deltas, depths, background):
        n_rays, n_samples = sigma.shape
        rgb = sigma.new_empty((n_rays, 3))
        depth = sigma.new_empty((n_rays,))
        weights = sigma.new_empty((n_rays, n_samples))
        trans = sigma.new_empty((n_rays, n_samples))
        _compose_core.composite_forward(
            sigma.detach().numpy(), colors.detach().numpy(), deltas.numpy(),
            depths.numpy(), background.numpy(), rgb.numpy(), depth.numpy(),
            weights.numpy(), trans.numpy(),
        )
        ctx.save_for_backward(weights, trans, colors, deltas, depths, background)
        return rgb, depth, weights

    @staticmethod
    def backward(ctx, grad_rgb, grad_depth, grad_weights):
        weights, trans, colors, deltas, depths, background = ctx.saved_tensors
        if grad_rgb is None:
            grad_rgb = torch.zeros_like(colors[:, 0, :])
        if grad_depth is None:
            grad_depth = torch.zeros_like(depths[:, 0])
        if grad_weights is None:
            grad_weights = torch.zeros_like(weights)
        grad_sigma = torch.empty_like(weights)
        grad_colors = torch.empty_like(colors)
        _compose_core.composite_backward(
            grad_rgb.detach().contiguous().numpy(),
            grad_depth.detach().contiguous().numpy(),
            grad_weights.detach().contiguous().numpy(),
            weights.detach().numpy(), trans.detach().numpy(),
            colors.detach().numpy(), deltas.numpy(), depths.numpy(),
            background.numpy(), grad_sigma.numpy(), grad_colors.numpy(),
        )
        return grad_sigma, grad_colors, None, None, None


def composite(
    colors: torch.Tensor,
    sigma: torch.Tensor,
    depths: torch.Tensor,
    *,
    far: float | None = None,
    near: float | None = None,
    background=None,
    backend: str | None = None,
) -> CompositeResult:
    """Composite per-sample ``colors`` (..., S, 3) and densities ``sigma``
    (..., S) along rays with increasing ``depths`` (..., S).

    Densities must be non-negative. Gradients flow to ``colors`` and
    ``sigma``; depths and background are treated as constants.
    """
    if colors.shape[:-1] != sigma.shape or colors.shape[-1] != 3:
        raise ConfigError(
            f"colors {tuple(colors.shape)} must be sigma shape {tuple(sigma.shape)} + (3,)"
        )
    if depths.shape != sigma.shape:
        raise ConfigError("depths must have one entry per sample")
    if (sigma.detach() < 0).any():
        raise NumericError("negative density passed to composite")

    dtype = sigma.dtype
    if background is None:
        bg = torch.zeros(3, dtype=dtype)
    else:
        bg = torch.as_tensor(background, dtype=dtype).detach().reshape(3)
    deltas = deltas_from_depths(depths, far, near).detach()
    depths = depths.detach()

    backend = backend or default_backend()
    if backend == "ext" and not HAS_EXTENSION:
        raise ConfigError("compositing extension requested but not built")
    if backend not in ("ext", "torch"):
        raise ConfigError(f"unknown compositing backend {backend!r}")

    lead = sigma.shape[:-1]
    n_samples = sigma.shape[-1]
    if backend == "ext" and sigma.device.type == "cpu":
        rgb, depth, weights = _CompositeExt.apply(
            sigma.reshape(-1, n_samples).contiguous(),
            colors.reshape(-1, n_samples, 3).contiguous(),
            deltas.reshape(-1, n_samples).contiguous(),
            depths.reshape(-1, n_samples).contiguous(),
            bg,
        )
        rgb = rgb.reshape(*lead, 3)
        depth = depth.reshape(lead)
        weights = weights.reshape(*lead, n_samples)
    else:
        rgb, depth, weights = _composite_torch(sigma, colors, deltas, depths, bg)
    return CompositeResult(rgb, depth, weights)
