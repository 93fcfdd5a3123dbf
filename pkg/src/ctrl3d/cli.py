"""Command line entry points.

Angles are degrees at the CLI and in view-list files (converted to radians
internally). Every artifact written to disk gets a sidecar manifest with the
exact inputs that produced it. Exit codes: 0 success, 2 config, 3 data,
4 numeric, 5 adapter, 6 checkpoint, 1 anything else.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml
from PIL import Image

from . import evaluation, injection
from .adapters import ImageFolderDataset, build_adapter
from .camera import CameraView
from .checkpoint import load_checkpoint
from .config import build_dataset, config_hash, load_config, save_resolved
from .errors import ConfigError, Ctrl3DError, exit_code_for
from .generator import (GeneratorConfig, RadianceGenerator, edit_control,
                        sample_control)
from .training import SurfTrainer


def parse_view_file(path) -> list[dict]:
    """View list: one record per view with pitch_deg, yaw_deg, optional
    fov_deg. Empty lists are an error, never a silent default."""
    try:
        records = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read view file {path}: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise ConfigError(f"view file {path} must hold a non-empty list of views")
    views = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "pitch_deg" not in rec or "yaw_deg" not in rec:
            raise ConfigError(f"view #{i} in {path} needs pitch_deg and yaw_deg")
        extra = set(rec) - {"pitch_deg", "yaw_deg", "fov_deg"}
        if extra:
            raise ConfigError(f"view #{i} in {path} has unknown fields {sorted(extra)}")
        views.append(
            {
                "pitch": math.radians(float(rec["pitch_deg"])),
                "yaw": math.radians(float(rec["yaw_deg"])),
                "fov": float(rec["fov_deg"]) if "fov_deg" in rec else None,
            }
        )
    return views


def save_image_grid(path, images: torch.Tensor, columns: int, manifest: dict) -> None:
    """Tile (N, 3, H, W) images into a PNG grid plus a JSON sidecar."""
    arr = (images.detach().clamp(0, 1).numpy() * 255).astype(np.uint8)
    n, _, h, w = arr.shape
    rows = (n + columns - 1) // columns
    grid = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = arr[i].transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, default=str))


def load_generator_checkpoint(path) -> RadianceGenerator:
    data = load_checkpoint(path, expected_kind="surf-trainer")
    model = RadianceGenerator(GeneratorConfig(**data.manifest["model"]))
    state = {k[2:]: v for k, v in data.tensors.items() if k.startswith("g.")}
    model.load_state_dict(state)
    model.eval()
    return model


def _render_views(model, code, views, resolution, camera, seed=0):
    frames = []
    rng = torch.Generator().manual_seed(seed)
    for view in views:
        cam = camera if view.get("fov") is None else type(camera)(
            fov=view["fov"], radius=camera.radius, near=camera.near, far=camera.far
        )
        angles = torch.tensor([[view["pitch"], view["yaw"]]])
        with torch.no_grad():
            out = model.render(
                code, angles, resolution, camera=cam, jitter=False, generator=rng
            )
        frames.append(out.image[0])
    return torch.stack(frames)


@click.group()
def cli():
    """Controllable 3D-aware portrait generation."""


@cli.command("train-surf")
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True, help="Override config keys: a.b.c=value")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None, help="Stop after this many total steps")
@click.option("--dry-run", is_flag=True, help="Validate config, render one sample, exit")
def train_surf(config_path, sets, resume, steps, dry_run):
    """Adversarially train the radiance generator."""
    cfg = load_config(config_path, sets)
    out_dir = Path(cfg.out_dir)
    dataset = build_dataset(cfg.dataset, camera=cfg.surf.camera)
    trainer = SurfTrainer(cfg.surf, dataset, out_dir)
    save_resolved(cfg, out_dir)
    if dry_run:
        code = sample_control(cfg.surf.model, 1, torch.Generator().manual_seed(cfg.seed))
        with torch.no_grad():
            out = trainer.generator_model.render(
                code, torch.zeros(1, 2), cfg.surf.schedule.base_resolution,
                camera=cfg.surf.camera, jitter=False,
            )
        save_image_grid(
            out_dir / "dry_run.png", out.image, 1,
            {"dry_run": True, "config_hash": config_hash(cfg)},
        )
        click.echo(f"dry run ok; sample at {out_dir / 'dry_run.png'}")
        return
    if resume:
        trainer.restore(resume)
    ckpt = trainer.train(total_steps=steps)
    click.echo(f"finished at step {trainer.step}; checkpoint {ckpt}")


@cli.command("train-inject")
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
def train_inject(config_path, sets):
    """Distill pose control into a (frozen) style decoder via its latent space."""
    cfg = load_config(config_path, sets)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg, out_dir)

    encoder = build_adapter("encoder", cfg.adapters.get("encoder", {}))
    decoder = build_adapter("decoder", cfg.adapters.get("decoder", {}))
    perceptual = build_adapter("perceptual", cfg.adapters.get("perceptual", {}))

    icfg = cfg.injection
    if icfg.source == "mock":
        source = injection.LinearMockTripletSource(decoder, seed=cfg.seed)
    elif icfg.source == "generator":
        if not icfg.surf_checkpoint:
            raise ConfigError("injection.source=generator needs injection.surf_checkpoint")
        model = load_generator_checkpoint(icfg.surf_checkpoint)
        source = injection.GeneratorTripletSource(
            model, camera=cfg.surf.camera, resolution=icfg.render_resolution
        )
    else:
        raise ConfigError(f"unknown injection source {icfg.source!r}")

    torch.manual_seed(cfg.seed)
    mapper = injection.CanonicalMapper(
        style_dim=decoder.__dict__.get("style_dim", 512)
    )
    basis = injection.PoseBasis(num_directions=icfg.num_directions)
    history = injection.train_injection(
        mapper, basis, encoder, decoder, perceptual, source,
        steps=icfg.steps, cfg=icfg.train, out_dir=out_dir,
    )
    with (out_dir / "injection_losses.jsonl").open("w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    ckpt = out_dir / "injection.ckpt"
    injection.save_injection(
        ckpt, mapper, basis, extra={"config_hash": config_hash(cfg)}
    )
    click.echo(f"injection training done; checkpoint {ckpt}")


@cli.command("generate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--views", "views_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--num-codes", type=int, default=1)
@click.option("--resolution", type=int, default=64)
def generate_cmd(checkpoint, views_path, out_path, seed, num_codes, resolution):
    """Render a (codes x views) grid from a trained generator checkpoint."""
    views = parse_view_file(views_path)
    model = load_generator_checkpoint(checkpoint)
    rng = torch.Generator().manual_seed(seed)
    camera = CameraView()
    frames = []
    for _ in range(num_codes):
        code = sample_control(model.cfg, 1, rng)
        frames.append(_render_views(model, code, views, resolution, camera, seed))
    save_image_grid(
        out_path, torch.cat(frames), columns=len(views),
        manifest={
            "command": "generate", "checkpoint": str(checkpoint), "seed": seed,
            "num_codes": num_codes, "resolution": resolution,
            "views_deg": [
                {"pitch_deg": math.degrees(v["pitch"]), "yaw_deg": math.degrees(v["yaw"]),
                 "fov_deg": v["fov"]} for v in views
            ],
        },
    )
    click.echo(f"wrote {out_path}")


@cli.command("edit")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--layer", required=True, type=int, help="Modulated layer index (0-based)")
@click.option("--dim", required=True, type=int, help="Basis column index (0-based)")
@click.option("--values", default="-2,-1,0,1,2", help="Comma-separated sweep values")
@click.option("--pitch-deg", type=float, default=0.0)
@click.option("--yaw-deg", type=float, default=0.0)
@click.option("--seed", type=int, default=0)
@click.option("--resolution", type=int, default=64)
@click.option("--out", "out_path", required=True, type=click.Path())
def edit_cmd(checkpoint, layer, dim, values, pitch_deg, yaw_deg, seed, resolution, out_path):
    """Sweep one control coefficient at a fixed view."""
    model = load_generator_checkpoint(checkpoint)
    sweep = [float(v) for v in values.split(",") if v.strip()]
    if not sweep:
        raise ConfigError("empty sweep value list")
    rng = torch.Generator().manual_seed(seed)
    code = sample_control(model.cfg, 1, rng)
    view = {"pitch": math.radians(pitch_deg), "yaw": math.radians(yaw_deg), "fov": None}
    frames = []
    for value in sweep:
        edited = edit_control(code, layer, dim, value)
        frames.append(_render_views(model, edited, [view], resolution, CameraView(), seed)[0])
    save_image_grid(
        out_path, torch.stack(frames), columns=len(sweep),
        manifest={
            "command": "edit", "checkpoint": str(checkpoint), "layer": layer,
            "dim": dim, "values": sweep, "pitch_deg": pitch_deg, "yaw_deg": yaw_deg,
            "seed": seed, "resolution": resolution,
        },
    )
    click.echo(f"wrote {out_path}")


@cli.command("novel-view")
@click.option("--injection", "injection_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--views", "views_path", required=True, type=click.Path(exists=True))
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def novel_view_cmd(injection_path, images_path, views_path, config_path, sets, out_path):
    """Re-render real images under new views through inversion + pose injection."""
    cfg = load_config(config_path, sets)
    views = parse_view_file(views_path)
    mapper, basis, _ = injection.load_injection(injection_path)
    encoder = build_adapter("encoder", cfg.adapters.get("encoder", {}))
    decoder = build_adapter("decoder", cfg.adapters.get("decoder", {}))

    path = Path(images_path)
    if path.is_dir():
        dataset = ImageFolderDataset(path)
        if len(dataset) == 0:
            raise ConfigError(f"no images under {path}")
        images = dataset.batch(range(len(dataset)), decoder.resolution)
    else:
        dataset = ImageFolderDataset(path.parent)
        idx = [i for i, f in enumerate(dataset.files) if f == path]
        if not idx:
            raise ConfigError(f"{path} is not a readable image")
        images = dataset.batch(idx, decoder.resolution)

    frames = []
    for i in range(images.shape[0]):
        for view in views:
            angles = torch.tensor([[view["pitch"], view["yaw"]]])
            with torch.no_grad():
                frames.append(
                    injection.novel_view(images[i:i + 1], angles, encoder,
                                         mapper, basis, decoder)[0]
                )
    save_image_grid(
        out_path, torch.stack(frames), columns=len(views),
        manifest={
            "command": "novel-view", "injection": str(injection_path),
            "images": str(images_path), "num_images": images.shape[0],
            "views_deg": [
                {"pitch_deg": math.degrees(v["pitch"]), "yaw_deg": math.degrees(v["yaw"])}
                for v in views
            ],
        },
    )
    click.echo(f"wrote {out_path}")


@cli.command("evaluate")
@click.option("--protocol", required=True,
              type=click.Choice(["fid", "pose", "id-consistency", "throughput"]))
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--injection", "injection_path", type=click.Path(exists=True),
              default=None,
              help="Measure the distilled 2D generator instead (throughput)")
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--num-generated", type=int, default=64,
              help="Generated sample count (50000 for the published protocol)")
@click.option("--num-real", type=int, default=64,
              help="Real sample count (70000 for the published protocol)")
@click.option("--resolution", type=int, default=32)
@click.option("--trials", type=int, default=10)
@click.option("--yaw-sweep-deg", default="-45,-30,-15,0,15,30,45")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), default=None)
def evaluate_cmd(protocol, checkpoint, injection_path, config_path, sets,
                 num_generated, num_real, resolution, trials, yaw_sweep_deg,
                 seed, out_path):
    """Run one evaluation protocol and emit a metric report (JSON)."""
    cfg = load_config(config_path, sets)
    if protocol == "throughput" and injection_path is not None:
        mapper, basis, _ = injection.load_injection(injection_path)
        decoder = build_adapter("decoder", cfg.adapters.get("decoder", {}))
        codes = torch.randn(1, decoder.num_layers, 512,
                            generator=torch.Generator().manual_seed(seed))
        view = torch.tensor([[0.1, 0.2]])

        def one_frame():
            with torch.no_grad():
                injection.generate_3d(codes, view, mapper, basis, decoder)

        report = evaluation.throughput(one_frame, trials=trials)
        text = report.to_json()
        if out_path:
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            Path(out_path).write_text(text)
        click.echo(text)
        return
    if checkpoint is None:
        raise ConfigError(f"protocol {protocol} needs --checkpoint")
    model = load_generator_checkpoint(checkpoint)
    rng = torch.Generator().manual_seed(seed)
    camera = cfg.surf.camera

    def render_batch(n, views=None):
        code = sample_control(model.cfg, n, rng)
        if views is None:
            views = cfg.surf.prior.sample(n, rng)
        with torch.no_grad():
            img = model.render(code, views, resolution, camera=camera,
                               jitter=False, generator=rng).image
        return img, views

    if protocol == "fid":
        spec = dict(cfg.adapters.get("perceptual", {}))
        if spec.get("backend", "mock") in ("mock", "flatten"):
            spec["backend"] = "projection"  # desk-scale FID extractor
        extractor = build_adapter("perceptual", spec)
        fake_feats, real_feats = [], []
        remaining = num_generated
        while remaining > 0:
            img, _ = render_batch(min(remaining, 16))
            fake_feats.append(extractor.extract(img))
            remaining -= img.shape[0]
        dataset = build_dataset(cfg.dataset, camera=camera)
        idx = torch.arange(min(num_real, len(dataset)))
        real_feats.append(extractor.extract(dataset.batch(idx, resolution)))
        report = evaluation.fid_report(
            torch.cat(fake_feats).numpy(), torch.cat(real_feats).numpy(),
            extractor=getattr(extractor, "tag", "unknown"),
            config_hash=config_hash(cfg),
        )
    elif protocol == "pose":
        estimator = build_adapter("pose_estimator", cfg.adapters.get("pose_estimator", {}))
        img, views = render_batch(num_generated)
        err = evaluation.pose_error(views.numpy(), estimator.estimate(img).numpy())
        report = evaluation.MetricReport(
            name="pose_error_rad", value=err,
            sample_counts={"images": num_generated},
            breakdown={"scaled_x100": err * 100.0},
            config_hash=config_hash(cfg),
        )
    elif protocol == "id-consistency":
        embedder = build_adapter("identity", cfg.adapters.get("identity", {}))
        yaws = [math.radians(float(v)) for v in yaw_sweep_deg.split(",") if v.strip()]
        if not yaws:
            raise ConfigError("empty yaw sweep")
        code = sample_control(model.cfg, 1, rng)
        with torch.no_grad():
            canon = model.render(code, torch.zeros(1, 2), resolution,
                                 camera=camera, jitter=False, generator=rng).image[0]
            rotated = torch.cat([
                model.render(code, torch.tensor([[0.0, y]]), resolution,
                             camera=camera, jitter=False, generator=rng).image
                for y in yaws
            ])
        report = evaluation.id_consistency(
            canon, rotated, embedder, angles=[round(math.degrees(y)) for y in yaws]
        )
    else:  # throughput
        code = sample_control(model.cfg, 1, rng)
        zero = torch.zeros(1, 2)

        def one_frame():
            with torch.no_grad():
                model.render(code, zero, resolution, camera=camera, jitter=False)

        report = evaluation.throughput(one_frame, trials=trials)

    text = report.to_json()
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    click.echo(text)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.exceptions.ClickException as exc:
        exc.show(file=sys.stderr)
        return 2
    except Ctrl3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
