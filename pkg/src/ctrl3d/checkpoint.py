"""Versioned checkpoint container: a manifest describing every tensor blob
(shape, dtype) plus the blobs themselves. Loading validates the blobs against
the manifest before anything touches them.

Files are plain ``torch.save`` archives and are trusted local artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    kind: str
    manifest: dict
    tensors: dict
    extra: dict


def save_checkpoint(
    path,
    kind: str,
    manifest: dict,
    tensors: dict[str, torch.Tensor],
    extra: dict | None = None,
) -> None:
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["kind"] = kind
    manifest["shapes"] = {k: list(v.shape) for k, v in tensors.items()}
    manifest["dtypes"] = {k: str(v.dtype) for k, v in tensors.items()}
    json.dumps(manifest)  # manifests must stay JSON-serializable
    payload = {
        "manifest": manifest,
        "tensors": {k: v.detach().cpu() for k, v in tensors.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_kind: str | None = None) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "manifest" not in payload:
        raise CheckpointError(f"{path} is not a ctrl3d checkpoint")
    manifest = payload["manifest"]
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}"
        )
    kind = manifest.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected a {expected_kind!r} checkpoint, got {kind!r}")
    tensors = payload.get("tensors", {})
    shapes = manifest.get("shapes", {})
    if set(shapes) != set(tensors):
        raise CheckpointError("checkpoint blobs do not match the manifest")
    for name, tensor in tensors.items():
        if list(tensor.shape) != shapes[name]:
            raise CheckpointError(
                f"tensor {name!r} has shape {list(tensor.shape)}, "
                f"manifest says {shapes[name]}"
            )
    return CheckpointData(kind, manifest, tensors, payload.get("extra", {}))
