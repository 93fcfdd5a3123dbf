"""Interfaces to pretrained third-party models, their deterministic mocks,
and dataset ingestion.

Real backends (inversion encoders, style decoders, perceptual/identity
networks, pose estimators) are optional plugins resolved by name from the
run configuration; everything in the test suite runs against the mocks. The
mock encoder/decoder pair is built so that ``encode(decode(w))`` recovers the
editable slice of ``w`` exactly (analytic pseudo-inverse), which makes the
injection stage solvable at desk scale.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AdapterError, ConfigError, DataError

logger = logging.getLogger(__name__)

NUM_STYLE_LAYERS = 18  # matches a 1024x1024 style decoder
STYLE_DIM = 512
EDITABLE_LAYERS = 4  # pose edits may only touch these leading layers


class InversionEncoder(Protocol):
    num_layers: int

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, num_layers, 512) latent codes."""
        ...


class StyleDecoder(Protocol):
    num_layers: int
    resolution: int

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        """(B, num_layers, 512) codes -> (B, 3, resolution, resolution) images."""
        ...


class PerceptualFeatures(Protocol):
    tag: str

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, F) feature vectors."""
        ...


class IdentityEmbedder(Protocol):
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, E) unit-norm identity embeddings."""
        ...


class PoseEstimator(Protocol):
    def estimate(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, 2) (pitch, yaw) in radians."""
        ...


# ---------------------------------------------------------------------------
# mocks


class MockDecoder:
    """Fixed random linear map from the flattened editable slice to a small
    image. Linearity is what makes the analytic pseudo-inverse encoder exact."""

    def __init__(self, seed: int = 0, num_layers: int = NUM_STYLE_LAYERS,
                 style_dim: int = STYLE_DIM, editable_layers: int = EDITABLE_LAYERS,
                 resolution: int = 32):
        self.num_layers = num_layers
        self.style_dim = style_dim
        self.editable_layers = editable_layers
        self.resolution = resolution
        in_dim = editable_layers * style_dim
        out_dim = 3 * resolution * resolution
        if out_dim < in_dim:
            raise ConfigError(
                f"mock decoder image ({out_dim} values) must not lose rank "
                f"against the editable slice ({in_dim} values)"
            )
        gen = torch.Generator().manual_seed(seed)
        # float64 internals keep the pseudo-inverse round-trip near 1e-7
        self.weight = (
            torch.randn(out_dim, in_dim, generator=gen, dtype=torch.float64)
            / in_dim**0.5
        )

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.ndim != 3 or codes.shape[1] != self.num_layers:
            raise AdapterError(
                f"decoder expects (B, {self.num_layers}, {self.style_dim}) codes"
            )
        flat = codes[:, : self.editable_layers].reshape(codes.shape[0], -1)
        img = (flat.double() @ self.weight.T).to(codes.dtype)
        return img.reshape(-1, 3, self.resolution, self.resolution)


class MockEncoder:
    """Pseudo-inverse of a mock decoder, padded to a full layered code: the
    editable slice is recovered exactly, the remaining layers are a stored
    mean latent."""

    def __init__(self, decoder: MockDecoder, mean_latent: torch.Tensor | None = None):
        self.decoder = decoder
        self.num_layers = decoder.num_layers
        # the decoder has full column rank, so the normal-equations form of
        # the pseudo-inverse is exact and much cheaper than an SVD
        w = decoder.weight
        self.pinv = torch.linalg.solve(w.T @ w, w.T)
        if mean_latent is None:
            mean_latent = torch.zeros(decoder.num_layers, decoder.style_dim)
        self.mean_latent = mean_latent

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise AdapterError("encoder expects (B, 3, H, W) images")
        flat = images.reshape(images.shape[0], -1)
        if flat.shape[1] != self.pinv.shape[1]:
            raise AdapterError(
                f"encoder was built for {self.decoder.resolution}^2 images"
            )
        slice_flat = (flat.double() @ self.pinv.T).to(images.dtype)
        codes = self.mean_latent.expand(images.shape[0], -1, -1).clone()
        codes[:, : self.decoder.editable_layers] = slice_flat.reshape(
            images.shape[0], self.decoder.editable_layers, self.decoder.style_dim
        )
        return codes


def mock_codec(seed: int = 0, **decoder_kwargs) -> tuple[MockEncoder, MockDecoder]:
    """Matched encoder/decoder pair; ``encode(decode(w))`` recovers the
    editable slice of ``w`` up to pseudo-inverse round-off."""
    decoder = MockDecoder(seed=seed, **decoder_kwargs)
    return MockEncoder(decoder), decoder


class MockPerceptualFlatten:
    """Identity features: the perceptual term degenerates to a pixel loss."""

    tag = "mock-flatten"

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        return images.reshape(images.shape[0], -1)


class MockFeatureProjection:
    """Fixed random projection of flattened pixels, for desk-scale FID runs.
    Values are self-consistent but never comparable to published numbers."""

    def __init__(self, seed: int = 0, feature_dim: int = 16):
        self.seed = seed
        self.feature_dim = feature_dim
        self._proj: dict[int, torch.Tensor] = {}

    @property
    def tag(self) -> str:
        return f"mock-projection-{self.feature_dim}"

    def _projection(self, in_dim: int) -> torch.Tensor:
        if in_dim not in self._proj:
            gen = torch.Generator().manual_seed(self.seed * 9176 + in_dim)
            self._proj[in_dim] = (
                torch.randn(in_dim, self.feature_dim, generator=gen) / in_dim**0.5
            )
        return self._proj[in_dim]

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        flat = images.reshape(images.shape[0], -1)
        return flat @ self._projection(flat.shape[1])


class MockIdentityEmbedder:
    def __init__(self, seed: int = 0, dim: int = 32):
        self._proj = MockFeatureProjection(seed=seed + 31, feature_dim=dim)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        feats = self._proj.extract(images)
        return F.normalize(feats, dim=-1)


class MockPoseEstimator:
    def __init__(self, seed: int = 0, scale: float = 0.5):
        self._proj = MockFeatureProjection(seed=seed + 67, feature_dim=2)
        self.scale = scale

    def estimate(self, images: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self._proj.extract(images)) * self.scale


# ---------------------------------------------------------------------------
# dataset ingestion

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ImageFolderDataset:
    """Lazily loads images from a folder: center crop to square, bilinear
    resize to the requested resolution, [0, 1] floats. File order is sorted,
    so iteration is deterministic; unreadable files are skipped with a
    warning and counted in ``num_skipped``."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise DataError(f"dataset folder {self.path} does not exist")
        self.files = sorted(
            p for p in self.path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        self.num_skipped = 0
        self._warned: set[Path] = set()

    def __len__(self) -> int:
        return len(self.files)

    def describe(self) -> dict:
        return {"kind": "folder", "path": str(self.path), "size": len(self.files)}

    def _load(self, path: Path, resolution: int) -> torch.Tensor | None:
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
                side = min(img.size)
                left = (img.width - side) // 2
                top = (img.height - side) // 2
                img = img.crop((left, top, left + side, top + side))
                img = img.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.float32) / 255.0
        except Exception as exc:
            if path not in self._warned:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                self._warned.add(path)
            self.num_skipped += 1
            return None
        return torch.from_numpy(arr).permute(2, 0, 1)

    def batch(self, indices, resolution: int) -> torch.Tensor:
        if len(self.files) == 0:
            raise DataError(f"no images found under {self.path}")
        out = []
        for i in indices:
            i = int(i)
            for attempt in range(len(self.files)):
                img = self._load(self.files[(i + attempt) % len(self.files)], resolution)
                if img is not None:
                    out.append(img)
                    break
            else:
                raise DataError(f"no readable images under {self.path}")
        return torch.stack(out)

    def sample_batch(self, n: int, resolution: int,
                     generator: torch.Generator | None = None) -> torch.Tensor:
        idx = torch.randint(len(self.files), (n,), generator=generator)
        return self.batch(idx, resolution)


# ---------------------------------------------------------------------------
# plugin registry

_REGISTRY = {
    "encoder": {},
    "decoder": {},
    "perceptual": {
        # "mock" means the LPIPS-style identity features; FID protocols use
        # the fixed random projection instead
        "mock": lambda opts: MockPerceptualFlatten(),
        "flatten": lambda opts: MockPerceptualFlatten(),
        "projection": lambda opts: MockFeatureProjection(
            seed=opts.get("seed", 0), feature_dim=opts.get("feature_dim", 16)
        ),
    },
    "identity": {
        "mock": lambda opts: MockIdentityEmbedder(seed=opts.get("seed", 0)),
    },
    "pose_estimator": {
        "mock": lambda opts: MockPoseEstimator(seed=opts.get("seed", 0)),
    },
}


def _build_codec(opts):
    return mock_codec(
        seed=opts.get("seed", 0),
        num_layers=opts.get("num_layers", NUM_STYLE_LAYERS),
        resolution=opts.get("resolution", 32),
    )


_REGISTRY["encoder"]["mock"] = lambda opts: _build_codec(opts)[0]
_REGISTRY["decoder"]["mock"] = lambda opts: _build_codec(opts)[1]


def register_backend(kind: str, name: str, factory) -> None:
    """Hook for real pretrained backends (inversion encoders, style decoders,
    perceptual nets, ...); factories get the option dict."""
    if kind not in _REGISTRY:
        raise AdapterError(f"unknown adapter kind {kind!r}")
    _REGISTRY[kind][name] = factory


def build_adapter(kind: str, spec: dict):
    """Instantiate one adapter from a config entry {'backend': name, ...}."""
    if kind not in _REGISTRY:
        raise AdapterError(f"unknown adapter kind {kind!r}")
    spec = dict(spec or {})
    backend = spec.pop("backend", "mock")
    factory = _REGISTRY[kind].get(backend)
    if factory is None:
        raise AdapterError(
            f"no {kind!r} backend named {backend!r}; "
            f"known: {sorted(_REGISTRY[kind])}"
        )
    return factory(spec)
