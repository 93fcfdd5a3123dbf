"""Distilling explicit pose control into a pretrained 2D style generator.

The 3D-aware generator renders triplets (source / canonical / target view of
the same content); an inversion encoder embeds them into the decoder's
layered latent space. A small residual mapper learns to frontalize the
editable slice of a code, and two banks of learnable sub-directions realize
pitch and yaw as scaled linear combinations added to that slice:

    w_t = w_c + sum_i (pitch * lp_i * dp_i + yaw * ly_i * dy_i)

Both modules train against latent, pixel and perceptual losses with an
orthogonality penalty that keeps the sub-directions from collapsing onto
each other. The encoder and decoder stay frozen throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import EDITABLE_LAYERS, STYLE_DIM
from .camera import CameraView
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AdapterError, ConfigError, NumericError
from .generator import RadianceGenerator, sample_control

DEFAULT_PITCH_RANGE = (-math.pi / 6, math.pi / 6)  # +-30 degrees
DEFAULT_YAW_RANGE = (-math.pi / 4, math.pi / 4)  # +-45 degrees
TRIPLET_RESOLUTION = 256


def _check_codes(codes: torch.Tensor, editable_layers: int, style_dim: int):
    if codes.ndim != 3 or codes.shape[2] != style_dim:
        raise ConfigError(f"codes must be (B, layers, {style_dim})")
    if codes.shape[1] < editable_layers:
        raise ConfigError(
            f"codes have {codes.shape[1]} layers, need at least {editable_layers}"
        )


class CanonicalMapper(nn.Module):
    """Five fully connected layers from the flattened editable slice back to
    a residual on that slice. The final layer is zero-initialized so the
    mapper starts as the identity."""

    def __init__(self, editable_layers: int = EDITABLE_LAYERS,
                 style_dim: int = STYLE_DIM, hidden_dim: int = 512):
        super().__init__()
        self.editable_layers = editable_layers
        self.style_dim = style_dim
        io_dim = editable_layers * style_dim
        self.layers = nn.ModuleList([
            nn.Linear(io_dim, hidden_dim),
            nn.Linear(hidden_dim, hidden_dim),
            nn.Linear(hidden_dim, hidden_dim),
            nn.Linear(hidden_dim, hidden_dim),
            nn.Linear(hidden_dim, io_dim),
        ])
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        _check_codes(codes, self.editable_layers, self.style_dim)
        h = codes[:, : self.editable_layers].reshape(codes.shape[0], -1)
        for layer in self.layers[:-1]:
            h = F.leaky_relu(layer(h), 0.2)
        h = self.layers[-1](h)
        return h.reshape(-1, self.editable_layers, self.style_dim)


def canonicalize(mapper: CanonicalMapper, codes: torch.Tensor) -> torch.Tensor:
    """Replace the editable slice with slice + mapper(slice); all other
    layers pass through untouched."""
    residual = mapper(codes)
    out = codes.clone()
    out[:, : mapper.editable_layers] = codes[:, : mapper.editable_layers] + residual
    return out


def _orthonormal_columns(dim: int, columns: int,
                         generator: torch.Generator | None = None) -> torch.Tensor:
    q, _ = torch.linalg.qr(torch.randn(dim, columns, generator=generator))
    return q


class PoseBasis(nn.Module):
    """N learnable sub-directions per pose attribute, each shaped like the
    editable slice, with learnable importance scales."""

    def __init__(self, num_directions: int = 5,
                 editable_layers: int = EDITABLE_LAYERS,
                 style_dim: int = STYLE_DIM):
        super().__init__()
        self.num_directions = num_directions
        self.editable_layers = editable_layers
        self.style_dim = style_dim
        dim = editable_layers * style_dim
        self.pitch_dirs = nn.Parameter(_orthonormal_columns(dim, num_directions))
        self.yaw_dirs = nn.Parameter(_orthonormal_columns(dim, num_directions))
        init_scale = 1.0 / num_directions
        self.pitch_scales = nn.Parameter(torch.full((num_directions,), init_scale))
        self.yaw_scales = nn.Parameter(torch.full((num_directions,), init_scale))

    def combined(self) -> torch.Tensor:
        """The (dim, 2) matrix [sum_i lp_i dp_i | sum_i ly_i dy_i]; the pose
        offset is exactly this matrix applied to (pitch, yaw)."""
        pitch_vec = self.pitch_dirs @ self.pitch_scales
        yaw_vec = self.yaw_dirs @ self.yaw_scales
        return torch.stack([pitch_vec, yaw_vec], dim=-1)

    def pose_offset(self, views: torch.Tensor) -> torch.Tensor:
        """(B, 2) pitch/yaw -> (B, editable_layers, style_dim) latent offset."""
        if views.ndim != 2 or views.shape[1] != 2:
            raise ConfigError("views must be (B, 2) pitch/yaw pairs")
        flat = views.to(self.pitch_dirs.dtype) @ self.combined().T
        return flat.reshape(-1, self.editable_layers, self.style_dim)


def apply_pose(codes: torch.Tensor, views: torch.Tensor, basis: PoseBasis) -> torch.Tensor:
    """Add the pose offset for ``views`` to the editable slice of ``codes``."""
    _check_codes(codes, basis.editable_layers, basis.style_dim)
    offset = basis.pose_offset(views)
    out = codes.clone()
    out[:, : basis.editable_layers] = codes[:, : basis.editable_layers] + offset
    return out


def direction_penalty(basis: PoseBasis) -> torch.Tensor:
    """||P^T P - I||_1 + ||Y^T Y - I||_1 over the flattened direction columns."""
    total = basis.pitch_dirs.new_zeros(())
    for dirs in (basis.pitch_dirs, basis.yaw_dirs):
        gram = dirs.T @ dirs
        eye = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
        total = total + (gram - eye).abs().sum()
    return total


# ---------------------------------------------------------------------------
# losses


@dataclass
class InjectionLossWeights:
    canonical_latent: float = 10.0
    canonical_pixel: float = 1.0
    canonical_perceptual: float = 1.0
    target_latent: float = 10.0
    target_pixel: float = 1.0
    target_perceptual: float = 1.0
    direction: float = 100.0


@dataclass
class LossParts:
    """Raw loss terms plus the lambda-weighted total; the total is always the
    weighted sum of the parts."""

    latent: float
    pixel: float
    perceptual: float
    direction: float
    total: torch.Tensor

    def weighted(self, w: InjectionLossWeights, branch: str) -> dict:
        if branch == "canonical":
            lam = (w.canonical_latent, w.canonical_pixel, w.canonical_perceptual, 0.0)
        else:
            lam = (w.target_latent, w.target_pixel, w.target_perceptual, w.direction)
        return {
            f"{branch}_latent": lam[0] * self.latent,
            f"{branch}_pixel": lam[1] * self.pixel,
            f"{branch}_perceptual": lam[2] * self.perceptual,
            **({f"{branch}_direction": lam[3] * self.direction} if branch == "target" else {}),
        }


def canonical_loss(
    codes_true: torch.Tensor,
    codes_pred: torch.Tensor,
    images_true: torch.Tensor,
    images_pred: torch.Tensor,
    perceptual,
    weights: InjectionLossWeights,
) -> LossParts:
    if codes_true.shape != codes_pred.shape or images_true.shape != images_pred.shape:
        raise ConfigError("canonical loss inputs must be shape-consistent")
    latent = (codes_true - codes_pred).abs().mean()
    pixel = F.mse_loss(images_pred, images_true)
    perc = F.mse_loss(perceptual.extract(images_pred), perceptual.extract(images_true))
    total = (
        weights.canonical_latent * latent
        + weights.canonical_pixel * pixel
        + weights.canonical_perceptual * perc
    )
    return LossParts(latent.item(), pixel.item(), perc.item(), 0.0, total)


def target_loss(
    codes_true: torch.Tensor,
    codes_pred: torch.Tensor,
    images_true: torch.Tensor,
    images_pred: torch.Tensor,
    perceptual,
    basis: PoseBasis,
    weights: InjectionLossWeights,
) -> LossParts:
    if codes_true.shape != codes_pred.shape or images_true.shape != images_pred.shape:
        raise ConfigError("target loss inputs must be shape-consistent")
    latent = (codes_true - codes_pred).abs().mean()
    pixel = F.mse_loss(images_pred, images_true)
    perc = F.mse_loss(perceptual.extract(images_pred), perceptual.extract(images_true))
    direction = direction_penalty(basis)
    total = (
        weights.target_latent * latent
        + weights.target_pixel * pixel
        + weights.target_perceptual * perc
        + weights.direction * direction
    )
    return LossParts(latent.item(), pixel.item(), perc.item(), direction.item(), total)


# ---------------------------------------------------------------------------
# triplet supervision


@dataclass
class ViewTriplet:
    """Source/canonical/target renders of identical content; the canonical
    view is always (0, 0)."""

    images_source: torch.Tensor
    images_canonical: torch.Tensor
    images_target: torch.Tensor
    views_source: torch.Tensor
    views_target: torch.Tensor


class TripletSource(Protocol):
    def sample(self, batch: int, generator: torch.Generator | None = None) -> ViewTriplet:
        ...


def _uniform(lo: float, hi: float, n: int, generator) -> torch.Tensor:
    return torch.rand(n, generator=generator) * (hi - lo) + lo


def sample_view_box(
    n: int,
    generator: torch.Generator | None = None,
    pitch_range=DEFAULT_PITCH_RANGE,
    yaw_range=DEFAULT_YAW_RANGE,
) -> torch.Tensor:
    pitch = _uniform(*pitch_range, n, generator)
    yaw = _uniform(*yaw_range, n, generator)
    return torch.stack([pitch, yaw], dim=-1)


class GeneratorTripletSource:
    """Pseudo ground-truth multi-view supervision from a trained radiance
    generator; the control code is held fixed across the three renders."""

    def __init__(
        self,
        generator_model: RadianceGenerator,
        camera: CameraView | None = None,
        resolution: int = TRIPLET_RESOLUTION,
        n_coarse: int = 12,
        n_fine: int = 12,
        pitch_range=DEFAULT_PITCH_RANGE,
        yaw_range=DEFAULT_YAW_RANGE,
    ):
        self.generator_model = generator_model
        self.camera = camera or CameraView()
        self.resolution = resolution
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.pitch_range = pitch_range
        self.yaw_range = yaw_range

    def _render(self, code, views, generator):
        with torch.no_grad():
            return self.generator_model.render(
                code, views, self.resolution, camera=self.camera,
                n_coarse=self.n_coarse, n_fine=self.n_fine,
                jitter=False, generator=generator,
            ).image

    def sample(self, batch: int, generator: torch.Generator | None = None) -> ViewTriplet:
        code = sample_control(self.generator_model.cfg, batch, generator)
        views_source = sample_view_box(batch, generator, self.pitch_range, self.yaw_range)
        views_target = sample_view_box(batch, generator, self.pitch_range, self.yaw_range)
        views_canonical = torch.zeros(batch, 2)
        return ViewTriplet(
            self._render(code, views_source, generator),
            self._render(code, views_canonical, generator),
            self._render(code, views_target, generator),
            views_source,
            views_target,
        )


class LinearMockTripletSource:
    """Analytically solvable supervision for tests: content lives in the
    orthogonal complement of a fixed pose plane, pose displaces the code
    linearly along that plane, and images come from a (linear) mock decoder.
    The true canonical map is the projection that zeroes the pose plane."""

    def __init__(self, decoder, seed: int = 0,
                 pitch_range=DEFAULT_PITCH_RANGE, yaw_range=DEFAULT_YAW_RANGE,
                 pose_scale: float = 1.0, content_std: float = 0.1):
        self.decoder = decoder
        dim = decoder.editable_layers * decoder.style_dim
        gen = torch.Generator().manual_seed(seed + 101)
        self.pose_plane = _orthonormal_columns(dim, 2, gen)  # columns: pitch, yaw
        self.pose_scale = pose_scale
        self.content_std = content_std
        self.pitch_range = pitch_range
        self.yaw_range = yaw_range

    def _expand(self, flat: torch.Tensor) -> torch.Tensor:
        codes = torch.zeros(
            flat.shape[0], self.decoder.num_layers, self.decoder.style_dim
        )
        codes[:, : self.decoder.editable_layers] = flat.reshape(
            flat.shape[0], self.decoder.editable_layers, self.decoder.style_dim
        )
        return codes

    def analytic_canonical(self, codes: torch.Tensor) -> torch.Tensor:
        """Ground-truth canonical map: project the pose plane out of the
        editable slice."""
        flat = codes[:, : self.decoder.editable_layers].reshape(codes.shape[0], -1)
        flat = flat - (flat @ self.pose_plane) @ self.pose_plane.T
        out = codes.clone()
        out[:, : self.decoder.editable_layers] = flat.reshape(
            codes.shape[0], self.decoder.editable_layers, self.decoder.style_dim
        )
        return out

    def code_for(self, content: torch.Tensor, views: torch.Tensor) -> torch.Tensor:
        flat = content + self.pose_scale * (views @ self.pose_plane.T)
        return self._expand(flat)

    def sample_content(self, batch: int, generator=None) -> torch.Tensor:
        dim = self.pose_plane.shape[0]
        raw = self.content_std * torch.randn(batch, dim, generator=generator)
        return raw - (raw @ self.pose_plane) @ self.pose_plane.T

    def sample(self, batch: int, generator: torch.Generator | None = None) -> ViewTriplet:
        content = self.sample_content(batch, generator)
        views_source = sample_view_box(batch, generator, self.pitch_range, self.yaw_range)
        views_target = sample_view_box(batch, generator, self.pitch_range, self.yaw_range)
        zero = torch.zeros(batch, 2)
        return ViewTriplet(
            self.decoder.decode(self.code_for(content, views_source)),
            self.decoder.decode(self.code_for(content, zero)),
            self.decoder.decode(self.code_for(content, views_target)),
            views_source,
            views_target,
        )


# ---------------------------------------------------------------------------
# training


@dataclass
class InjectionTrainConfig:
    weights: InjectionLossWeights = field(default_factory=InjectionLossWeights)
    lr: float = 1e-3
    basis_lr_multiplier: float = 5.0  # sub-directions travel further than the mapper
    betas: tuple = (0.9, 0.999)
    cosine_decay: bool = True  # anneal lr to ~0 over the run
    batch_size: int = 8
    seed: int = 0
    log_every: int = 25


def _module_snapshot(obj) -> dict | None:
    if isinstance(obj, nn.Module):
        return {k: v.detach().clone() for k, v in obj.state_dict().items()}
    return None


def _assert_unchanged(name: str, obj, snapshot) -> None:
    if snapshot is None:
        return
    current = obj.state_dict()
    for key, tensor in snapshot.items():
        if not torch.equal(current[key], tensor):
            raise AdapterError(f"frozen {name} backend mutated parameter {key!r}")


def train_injection(
    mapper: CanonicalMapper,
    basis: PoseBasis,
    encoder,
    decoder,
    perceptual,
    source: TripletSource,
    steps: int,
    cfg: InjectionTrainConfig | None = None,
    out_dir=None,
) -> list[dict]:
    """Optimize mapper and basis against triplet supervision; the encoder,
    decoder and perceptual net are frozen. Returns the per-step loss curve
    with every lambda-weighted part."""
    cfg = cfg or InjectionTrainConfig()
    rng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        [
            {"params": list(mapper.parameters()), "lr": cfg.lr},
            {"params": list(basis.parameters()),
             "lr": cfg.lr * cfg.basis_lr_multiplier},
        ],
        betas=tuple(cfg.betas),
    )
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
        if cfg.cosine_decay else None
    )
    frozen = {
        "encoder": (encoder, _module_snapshot(encoder)),
        "decoder": (decoder, _module_snapshot(decoder)),
    }
    history: list[dict] = []
    for step in range(steps):
        triplet = source.sample(cfg.batch_size, rng)
        with torch.no_grad():
            w_s = encoder.encode(triplet.images_source)
            w_c = encoder.encode(triplet.images_canonical)
            w_t = encoder.encode(triplet.images_target)
            img_c_true = decoder.decode(w_c)
            img_t_true = decoder.decode(w_t)

        w_c_hat = canonicalize(mapper, w_s)
        w_t_hat = apply_pose(w_c_hat, triplet.views_target, basis)
        img_c_hat = decoder.decode(w_c_hat)
        img_t_hat = decoder.decode(w_t_hat)

        lc = canonical_loss(w_c, w_c_hat, img_c_true, img_c_hat, perceptual, cfg.weights)
        lt = target_loss(w_t, w_t_hat, img_t_true, img_t_hat, perceptual, basis, cfg.weights)
        loss = lc.total + lt.total
        if not math.isfinite(loss.item()):
            if out_dir is not None:
                snap = Path(out_dir) / f"crash_step{step}.ckpt"
                save_injection(snap, mapper, basis, extra={"step": step})
            raise NumericError(f"non-finite injection loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if scheduler is not None:
            scheduler.step()

        row = {"step": step, "total": loss.item()}
        row.update(lc.weighted(cfg.weights, "canonical"))
        row.update(lt.weighted(cfg.weights, "target"))
        row["canonical_latent_raw"] = lc.latent
        row["target_latent_raw"] = lt.latent
        history.append(row)
    for name, (obj, snapshot) in frozen.items():
        _assert_unchanged(name, obj, snapshot)
    return history


# ---------------------------------------------------------------------------
# inference


def generate_3d(
    codes: torch.Tensor,
    views: torch.Tensor,
    mapper: CanonicalMapper,
    basis: PoseBasis,
    decoder,
) -> torch.Tensor:
    """View-conditioned generation: decode(apply_pose(canonicalize(w), v))."""
    return decoder.decode(apply_pose(canonicalize(mapper, codes), views, basis))


def novel_view(
    images: torch.Tensor,
    views: torch.Tensor,
    encoder,
    mapper: CanonicalMapper,
    basis: PoseBasis,
    decoder,
) -> torch.Tensor:
    """Single-pass novel-view synthesis of real images via inversion; no
    per-image optimization. ``views = (0, 0)`` is frontalization."""
    try:
        codes = encoder.encode(images)
    except Exception as exc:
        raise AdapterError(f"inversion encoder failed: {exc}") from exc
    return generate_3d(codes, views, mapper, basis, decoder)


def semantic_direction(
    codes_with: torch.Tensor, codes_without: torch.Tensor
) -> torch.Tensor:
    """mean(with) - mean(without); an additive latent edit direction."""
    if codes_with.numel() == 0 or codes_without.numel() == 0:
        raise ConfigError("both attribute groups need at least one code")
    return codes_with.mean(dim=0) - codes_without.mean(dim=0)


def save_direction(base_path, name: str, direction: torch.Tensor, metadata: dict | None = None):
    """Write a named edit direction as sidecar JSON plus an .npy blob."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.save(base.with_suffix(".npy"), direction.detach().cpu().numpy())
    meta = {
        "name": name,
        "shape": list(direction.shape),
        "strength_convention": "code + strength * direction",
        **(metadata or {}),
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_direction(base_path):
    base = Path(base_path)
    meta = json.loads(base.with_suffix(".json").read_text())
    direction = torch.from_numpy(np.load(base.with_suffix(".npy")))
    if list(direction.shape) != meta["shape"]:
        raise ConfigError(f"direction blob does not match its sidecar at {base}")
    return direction, meta


def save_injection(path, mapper: CanonicalMapper, basis: PoseBasis, extra: dict | None = None):
    tensors = {}
    for prefix, module in (("mapper", mapper), ("basis", basis)):
        for key, tensor in module.state_dict().items():
            tensors[f"{prefix}.{key}"] = tensor
    manifest = {
        "editable_layers": mapper.editable_layers,
        "style_dim": mapper.style_dim,
        "num_directions": basis.num_directions,
    }
    save_checkpoint(path, "pose-injection", manifest, tensors, extra or {})


def load_injection(path) -> tuple[CanonicalMapper, PoseBasis, dict]:
    data = load_checkpoint(path, expected_kind="pose-injection")
    m = data.manifest
    mapper = CanonicalMapper(m["editable_layers"], m["style_dim"])
    basis = PoseBasis(m["num_directions"], m["editable_layers"], m["style_dim"])
    mapper.load_state_dict(
        {k[len("mapper."):]: v for k, v in data.tensors.items() if k.startswith("mapper.")}
    )
    basis.load_state_dict(
        {k[len("basis."):]: v for k, v in data.tensors.items() if k.startswith("basis.")}
    )
    return mapper, basis, data.extra
