"""Evaluation metrics: Frechet distance between feature Gaussians, pose
error, identity consistency across views, and rendering throughput.

The published evaluation protocol is configuration, not computation: 50k
generated vs 70k real features for FID, and per-angle identity curves
against the canonical view. Desk-scale runs swap in the mock projection
extractor and their reports carry the extractor tag so the numbers are never
mistaken for comparable ones.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


def _as_batch(images):
    return images[None] if images.ndim == 3 else images


@dataclass
class MetricReport:
    name: str
    value: float
    sample_counts: dict = field(default_factory=dict)
    config_hash: str | None = None
    breakdown: dict | None = None
    extractor: str | None = None
    hardware: str | None = None

    def to_json(self) -> str:
        payload = {k: v for k, v in self.__dict__.items() if v is not None}
        return json.dumps(payload, indent=2)


def psd_sqrt(mat: np.ndarray, neg_tol: float = -1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [neg_tol * scale, 0) are clipped to zero; anything more
    negative means the matrix is genuinely not PSD and raises with condition
    diagnostics.
    """
    sym = (mat + mat.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    scale = max(abs(eigvals[-1]), 1.0)
    if eigvals[0] < neg_tol * scale:
        raise NumericError(
            "matrix is not PSD after cleanup: "
            f"min eigenvalue {eigvals[0]:.3e}, max {eigvals[-1]:.3e}, "
            f"ratio {eigvals[0] / scale:.3e} < {neg_tol:.0e}"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def gaussian_frechet_distance(
    mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Closed-form Frechet distance between two Gaussians.

    tr((cov_a cov_b)^1/2) is computed as tr((S cov_b S)^1/2) with
    S = cov_a^1/2, which keeps every square root symmetric PSD.
    """
    diff = mean_a - mean_b
    sqrt_a = psd_sqrt(cov_a)
    cross = psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    value = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


def fid(features_a, features_b) -> float:
    """FID between two feature sets (rows are samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError("feature sets must be 2-D with equal dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigError("need at least two samples per side")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    return gaussian_frechet_distance(mean_a, cov_a, mean_b, cov_b)


def fid_report(features_a, features_b, extractor: str | None = None,
               config_hash: str | None = None) -> MetricReport:
    value = fid(features_a, features_b)
    return MetricReport(
        name="fid",
        value=value,
        sample_counts={"generated": len(features_a), "real": len(features_b)},
        extractor=extractor,
        config_hash=config_hash,
    )


def pose_error(target_views, estimated_views) -> float:
    """Mean absolute angular difference in radians, averaged over pitch and
    yaw. (Published tables display this value scaled by 100.)"""
    target = np.asarray(target_views, dtype=np.float64)
    estimated = np.asarray(estimated_views, dtype=np.float64)
    if target.shape != estimated.shape:
        raise ConfigError("target and estimated view batches must match")
    return float(np.abs(target - estimated).mean())


def id_consistency(canonical_image, rotated_images, embedder, angles=None) -> MetricReport:
    """Cosine similarity of each rotated view's identity embedding against
    the canonical view's, plus the mean."""
    canon = embedder.embed(_as_batch(canonical_image))
    rotated = embedder.embed(rotated_images)
    sims = (rotated @ canon.squeeze(0)).tolist()
    if angles is None:
        angles = list(range(len(sims)))
    breakdown = {str(a): float(s) for a, s in zip(angles, sims)}
    return MetricReport(
        name="id_consistency",
        value=float(np.mean(sims)),
        sample_counts={"views": len(sims)},
        breakdown=breakdown,
    )


def throughput(render_fn, trials: int = 10, warmup: int = 2) -> MetricReport:
    """Median frames/second of a callable that renders one frame per call."""
    if trials < 1:
        raise ConfigError("need at least one trial")
    for _ in range(warmup):
        render_fn()
    rates = []
    for _ in range(trials):
        start = time.perf_counter()
        render_fn()
        rates.append(1.0 / max(time.perf_counter() - start, 1e-12))
    return MetricReport(
        name="throughput_fps",
        value=float(statistics.median(rates)),
        sample_counts={"trials": trials},
        hardware=f"{platform.machine()} {platform.processor() or 'cpu'}",
    )
