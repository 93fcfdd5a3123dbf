"""The controllable radiance-field generator.

Every modulated layer owns a learnable subspace: an (approximately)
orthonormal basis ``U`` with per-column scales and a shift vector. A layer's
modulation is the scaled combination of basis columns selected by that
layer's control coefficients,

    phi_i = U_i D_i z_i + mu_i,

and an affine head maps ``phi_i`` to the frequency/phase pair of a
FiLM-SIREN block with a residual skip:

    psi_i = sin(freq_i * (W_i psi_{i-1} + b_i) + phase_i) + psi_{i-1}.

The trunk of ``num_shared_blocks`` such blocks feeds a density head; one more
block, conditioned on the viewing direction, feeds the color head. Images
come out of ``render`` via ray sampling and alpha compositing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .camera import CameraView, generate_ray_batch
from .compositing import CompositeResult, composite
from .errors import ConfigError
from .sampling import hierarchical_sample, stratified_sample

FIRST_LAYER_BOUND = 1.0 / 3.0  # uniform init bound for the coordinate embedding
HIDDEN_INIT_FREQ = 25.0  # divisor in the sinusoidal hidden-layer init


@dataclass
class GeneratorConfig:
    hidden_dim: int = 256
    modulation_dim: int = 256
    num_controls: int = 6  # control coefficients per layer (basis columns)
    num_shared_blocks: int = 8  # trunk depth; one extra block handles color
    noise_dim: int = 256
    freq_scale: float = 15.0
    freq_offset: float = 30.0

    @property
    def num_layers(self) -> int:
        return self.num_shared_blocks + 1


@dataclass
class ControlCode:
    """Per-layer control coefficients (B, layers, K) plus the residual noise
    vector (B, noise_dim) that captures variation the subspaces miss."""

    coeffs: torch.Tensor
    noise: torch.Tensor

    def __post_init__(self):
        if self.coeffs.ndim != 3 or self.noise.ndim != 2:
            raise ConfigError("coeffs must be (B, layers, K) and noise (B, noise_dim)")
        if self.coeffs.shape[0] != self.noise.shape[0]:
            raise ConfigError("coeffs and noise disagree on batch size")

    @property
    def batch_size(self) -> int:
        return self.coeffs.shape[0]

    def clone(self) -> "ControlCode":
        return ControlCode(self.coeffs.clone(), self.noise.clone())


def sample_control(
    cfg: GeneratorConfig,
    batch_size: int,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> ControlCode:
    """Training-time codes: i.i.d. standard normal coefficients and noise."""
    coeffs = torch.randn(
        batch_size, cfg.num_layers, cfg.num_controls, generator=generator, dtype=dtype
    )
    noise = torch.randn(batch_size, cfg.noise_dim, generator=generator, dtype=dtype)
    return ControlCode(coeffs, noise)


def edit_control(code: ControlCode, layer: int, dim: int, value: float) -> ControlCode:
    """Copy of ``code`` with the single coefficient (layer, dim) replaced.

    Indices are 0-based: ``layer`` selects one of the modulated layers,
    ``dim`` one of its basis columns.
    """
    n_layers, n_dims = code.coeffs.shape[1], code.coeffs.shape[2]
    if not (0 <= layer < n_layers):
        raise ConfigError(f"layer {layer} out of range [0, {n_layers})")
    if not (0 <= dim < n_dims):
        raise ConfigError(f"dim {dim} out of range [0, {n_dims})")
    edited = code.clone()
    edited.coeffs[:, layer, dim] = value
    return edited


def _signed_axis_basis(dim: int, columns: int) -> torch.Tensor:
    """Random signed coordinate-axis columns: exactly orthonormal in floating
    point, so the orthogonality penalty reads 0.0 at init."""
    if columns > dim:
        raise ConfigError(f"cannot fit {columns} orthonormal columns in dim {dim}")
    idx = torch.randperm(dim)[:columns]
    signs = (torch.randint(0, 2, (columns,)) * 2 - 1).float()
    basis = torch.zeros(dim, columns)
    basis[idx, torch.arange(columns)] = signs
    return basis


class SubspaceLayer(nn.Module):
    """Learnable subspace of one layer: basis (dim, K), per-column scales and
    a shift vector. Orthonormality is regularized, not enforced."""

    def __init__(self, dim: int, num_basis: int):
        super().__init__()
        self.basis = nn.Parameter(_signed_axis_basis(dim, num_basis))
        self.scale = nn.Parameter(torch.ones(num_basis))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, coeffs: torch.Tensor) -> torch.Tensor:
        if coeffs.shape[-1] != self.basis.shape[1]:
            raise ConfigError(
                f"expected {self.basis.shape[1]} coefficients, got {coeffs.shape[-1]}"
            )
        return (coeffs * self.scale) @ self.basis.T + self.shift

    def orthogonality_penalty(self) -> torch.Tensor:
        gram = self.basis.T @ self.basis
        eye = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
        return (gram - eye).abs().sum()


def film_siren(
    x: torch.Tensor,
    freq: torch.Tensor,
    phase: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    skip: torch.Tensor | None = None,
) -> torch.Tensor:
    """One FiLM-SIREN block: sin(freq * (x @ W.T + b) + phase) [+ skip]."""
    out = torch.sin(freq * F.linear(x, weight, bias) + phase)
    return out if skip is None else out + skip


class FilmSirenBlock(nn.Module):
    """Linear + sine layer whose frequency/phase come from this layer's
    subspace modulation through an affine head."""

    def __init__(self, in_dim: int, hidden_dim: int, cfg: GeneratorConfig):
        super().__init__()
        self.linear = nn.Linear(in_dim, hidden_dim)
        self.subspace = SubspaceLayer(cfg.modulation_dim, cfg.num_controls)
        self.film = nn.Linear(cfg.modulation_dim, 2 * hidden_dim)
        self.freq_scale = cfg.freq_scale
        self.freq_offset = cfg.freq_offset
        bound = math.sqrt(6.0 / in_dim) / HIDDEN_INIT_FREQ
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound)

    def film_params(self, phi: torch.Tensor):
        raw = self.film(phi)
        freq, phase = raw.chunk(2, dim=-1)
        return freq * self.freq_scale + self.freq_offset, phase

    def forward(
        self,
        x: torch.Tensor,
        coeffs: torch.Tensor,
        skip: torch.Tensor | None = None,
    ) -> torch.Tensor:
        phi = self.subspace(coeffs)
        freq, phase = self.film_params(phi)
        return film_siren(
            x, freq.unsqueeze(-2), phase.unsqueeze(-2),
            self.linear.weight, self.linear.bias,
            x if skip is None else skip,
        )


@dataclass
class RenderOutput:
    image: torch.Tensor  # (B, 3, H, W), values in [0, 1]
    depth: torch.Tensor  # (B, H, W)
    coarse: CompositeResult | None = None


class RadianceGenerator(nn.Module):
    """Maps a control code and a viewpoint to an image through a modulated
    implicit field and volume rendering."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        cfg = self.cfg
        self.embed = nn.Linear(3, cfg.hidden_dim)
        self.noise_map = nn.Linear(cfg.noise_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            FilmSirenBlock(cfg.hidden_dim, cfg.hidden_dim, cfg)
            for _ in range(cfg.num_shared_blocks)
        )
        self.color_block = FilmSirenBlock(cfg.hidden_dim + 3, cfg.hidden_dim, cfg)
        self.density_head = nn.Linear(cfg.hidden_dim, 1)
        self.color_head = nn.Linear(cfg.hidden_dim, 3)
        with torch.no_grad():
            self.embed.weight.uniform_(-FIRST_LAYER_BOUND, FIRST_LAYER_BOUND)

    def _check_code(self, code: ControlCode):
        if code.coeffs.shape[1] != self.cfg.num_layers:
            raise ConfigError(
                f"code has {code.coeffs.shape[1]} layers, model expects {self.cfg.num_layers}"
            )
        if code.noise.shape[1] != self.cfg.noise_dim:
            raise ConfigError("noise vector width does not match the model")

    def trunk(self, code: ControlCode, points: torch.Tensor) -> torch.Tensor:
        """Shared feature (B, P, hidden) for a batch of points (B, P, 3)."""
        self._check_code(code)
        feat = torch.sin(self.cfg.freq_offset * self.embed(points))
        feat = feat + self.noise_map(code.noise).unsqueeze(1)
        for i, block in enumerate(self.blocks):
            feat = block(feat, code.coeffs[:, i])
        return feat

    def field(
        self,
        code: ControlCode,
        points: torch.Tensor,
        dirs: torch.Tensor,
    ):
        """Density (B, P) and color (B, P, 3) at world points with per-point
        unit viewing directions. Density does not depend on ``dirs``."""
        feat = self.trunk(code, points)
        sigma = F.softplus(self.density_head(feat).squeeze(-1) - 1.0)
        color_in = torch.cat([feat, dirs], dim=-1)
        h = self.color_block(color_in, code.coeffs[:, -1], skip=feat)
        rgb = torch.sigmoid(self.color_head(h))
        return sigma, rgb

    def modulations(self, code: ControlCode) -> list[torch.Tensor]:
        """Per-layer modulation vectors, for inspection and tests."""
        self._check_code(code)
        layers = list(self.blocks) + [self.color_block]
        return [block.subspace(code.coeffs[:, i]) for i, block in enumerate(layers)]

    def orthogonality_penalty(self) -> torch.Tensor:
        """Mean over modulated layers of ||U^T U - I||_1."""
        layers = list(self.blocks) + [self.color_block]
        terms = [block.subspace.orthogonality_penalty() for block in layers]
        return torch.stack(terms).mean()

    def render(
        self,
        code: ControlCode,
        views: torch.Tensor,
        resolution: int | tuple[int, int],
        *,
        camera: CameraView | None = None,
        n_coarse: int = 12,
        n_fine: int = 12,
        jitter: bool = True,
        generator: torch.Generator | None = None,
        background=None,
        bound_far: bool = False,
        keep_coarse: bool = False,
    ) -> RenderOutput:
        """Render one image per batch row of ``views`` (B, 2) = (pitch, yaw).

        Coarse stratified samples are refined by importance sampling from the
        coarse compositing weights; the refined pass produces the image.
        """
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        cam = camera or CameraView()
        if views.ndim != 2 or views.shape[1] != 2:
            raise ConfigError("views must be (B, 2) pitch/yaw pairs in radians")
        if views.shape[0] != code.batch_size:
            raise ConfigError("views and code disagree on batch size")
        dtype = self.embed.weight.dtype
        views = views.to(dtype)

        rays = generate_ray_batch(
            views[:, 0], views[:, 1], resolution,
            fov=cam.fov, radius=cam.radius, near=cam.near, far=cam.far,
        )
        far = cam.far if bound_far else None

        coarse = stratified_sample(rays, n_coarse, generator=generator, jitter=jitter)
        comp_coarse = self._field_and_composite(code, rays, coarse, far, background)
        if n_fine > 0:
            merged = hierarchical_sample(
                rays, coarse.depths, comp_coarse.weights.detach(), n_fine, generator
            )
            comp = self._field_and_composite(code, rays, merged, far, background)
        else:
            comp = comp_coarse

        batch, (h, w) = views.shape[0], resolution
        image = comp.rgb.transpose(1, 2).reshape(batch, 3, h, w)
        depth = comp.depth.reshape(batch, h, w)
        return RenderOutput(image, depth, comp_coarse if keep_coarse else None)

    def _field_and_composite(self, code, rays, samples, far, background):
        batch, n_rays, s = samples.depths.shape
        points = samples.positions.reshape(batch, n_rays * s, 3)
        dirs = (
            rays.directions[:, :, None, :]
            .expand(-1, -1, s, -1)
            .reshape(batch, n_rays * s, 3)
        )
        sigma, rgb = self.field(code, points, dirs)
        return composite(
            rgb.reshape(batch, n_rays, s, 3),
            sigma.reshape(batch, n_rays, s),
            samples.depths,
            far=far,
            background=background,
        )
