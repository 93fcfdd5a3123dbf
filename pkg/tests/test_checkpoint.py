import pytest
import torch

from ctrl3d.checkpoint import (FORMAT_VERSION, load_checkpoint,
                               save_checkpoint)
from ctrl3d.errors import CheckpointError


def test_round_trip(tmp_path):
    path = tmp_path / "x.ckpt"
    tensors = {"a": torch.randn(3, 4), "b": torch.arange(5)}
    save_checkpoint(path, "unit-test", {"note": "hi"}, tensors, extra={"step": 7})
    data = load_checkpoint(path, expected_kind="unit-test")
    assert data.kind == "unit-test"
    assert data.manifest["note"] == "hi"
    assert data.manifest["format_version"] == FORMAT_VERSION
    assert torch.equal(data.tensors["a"], tensors["a"])
    assert data.extra["step"] == 7


def test_kind_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "alpha", {}, {"t": torch.zeros(2)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_kind="beta")


def test_shape_validation(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "alpha", {}, {"t": torch.zeros(2, 3)})
    payload = torch.load(path, weights_only=False)
    payload["tensors"]["t"] = torch.zeros(4)  # corrupt the blob
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_blob_set_must_match_manifest(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "alpha", {}, {"t": torch.zeros(2)})
    payload = torch.load(path, weights_only=False)
    payload["tensors"]["extra_blob"] = torch.zeros(1)
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(path)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    torch.save({"something": 1}, bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_manifest_must_be_json_serializable(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "x.ckpt", "alpha", {"bad": torch.zeros(2)},
                        {"t": torch.zeros(2)})
