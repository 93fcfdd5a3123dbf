"""Progressive-growing adversarial training of the radiance generator.

Non-saturating GAN loss with an R1 gradient penalty on real images, the
subspace orthogonality regularizer on the generator, and an optional pose
term tying the discriminator's pose branch to the views the generator was
given (minimized by both networks, not adversarial). Only the discriminator
grows across stages; the generator simply renders more rays.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import evaluation
from .adapters import MockFeatureProjection
from .camera import CameraView
from .checkpoint import load_checkpoint, save_checkpoint
from .discriminator import ProgressiveDiscriminator
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .generator import GeneratorConfig, RadianceGenerator, sample_control

ADAM_BETAS = (0.0, 0.99)


@dataclass
class TrainSchedule:
    """Stage plan: resolution doubles each stage, learning rate halves.

    With ``progressive`` off the run sits at the final resolution and base
    learning rate for its whole length (the ablation switch).
    """

    base_resolution: int = 32
    num_stages: int = 2
    steps_per_stage: int = 20000
    base_lr: float = 1e-4
    batch_size: int = 4
    progressive: bool = True

    def __post_init__(self):
        if self.num_stages < 1 or self.steps_per_stage < 1:
            raise ConfigError("schedule needs at least one stage and one step")

    @property
    def total_steps(self) -> int:
        return self.num_stages * self.steps_per_stage

    @property
    def final_resolution(self) -> int:
        return self.base_resolution * 2 ** (self.num_stages - 1)

    def stage_of(self, step: int) -> int:
        if not self.progressive:
            return self.num_stages - 1
        return min(step // self.steps_per_stage, self.num_stages - 1)

    def resolution(self, stage: int) -> int:
        return self.base_resolution * 2**stage

    def lr(self, stage: int) -> float:
        if not self.progressive:
            return self.base_lr
        return self.base_lr * 0.5**stage


@dataclass
class PosePrior:
    """Normal pitch/yaw distribution approximating the dataset's pose spread."""

    pitch_mean: float = 0.0
    pitch_std: float = 0.155
    yaw_mean: float = 0.0
    yaw_std: float = 0.3

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        draws = torch.randn(n, 2, generator=generator)
        mean = torch.tensor([self.pitch_mean, self.yaw_mean])
        std = torch.tensor([self.pitch_std, self.yaw_std])
        return draws * std + mean


@dataclass
class SamplingConfig:
    n_coarse: int = 12
    n_fine: int = 12
    jitter: bool = True


@dataclass
class GanLossConfig:
    r1_weight: float = 10.0
    orth_weight: float = 1.0
    pose_weight: float = 15.0
    use_pose_loss: bool = False


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)


def pose_loss(input_views: torch.Tensor, predicted_views: torch.Tensor) -> torch.Tensor:
    """Mean squared error over (pitch, yaw) pairs."""
    if input_views.shape != predicted_views.shape:
        raise ConfigError("view batches must have matching shapes")
    return F.mse_loss(predicted_views, input_views)


def r1_penalty(realness: torch.Tensor, real_images: torch.Tensor) -> torch.Tensor:
    """Squared gradient norm of the realness output w.r.t. the real batch."""
    grad = torch.autograd.grad(
        realness.sum(), real_images, create_graph=True
    )[0]
    return grad.pow(2).flatten(1).sum(dim=1).mean()


def d_step(
    discriminator: ProgressiveDiscriminator,
    generator_model: RadianceGenerator,
    real_images: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    *,
    loss_cfg: GanLossConfig,
    prior: PosePrior,
    camera: CameraView,
    sampling: SamplingConfig,
    generator: torch.Generator | None = None,
) -> dict:
    batch = real_images.shape[0]
    resolution = discriminator.current_resolution
    if real_images.shape[-1] != resolution or real_images.shape[-2] != resolution:
        raise ConfigError(
            f"real batch is {tuple(real_images.shape[-2:])}, "
            f"discriminator expects {resolution}x{resolution}"
        )
    code = sample_control(generator_model.cfg, batch, generator)
    views = prior.sample(batch, generator)
    with torch.no_grad():
        fake = generator_model.render(
            code, views, resolution,
            camera=camera, n_coarse=sampling.n_coarse, n_fine=sampling.n_fine,
            jitter=sampling.jitter, generator=generator,
        ).image

    d_fake, pose_fake = discriminator(fake)
    real = real_images.detach().requires_grad_(True)
    d_real, _ = discriminator(real)
    adv = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
    r1 = r1_penalty(d_real, real)
    total = adv + loss_cfg.r1_weight * r1
    report = {"d_adv": adv.item(), "d_r1": r1.item()}
    if loss_cfg.use_pose_loss:
        if pose_fake is None:
            raise ConfigError("pose loss enabled but discriminator has no pose head")
        lp = pose_loss(views, pose_fake)
        total = total + loss_cfg.pose_weight * lp
        report["d_pose"] = lp.item()
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    report["d_total"] = total.item()
    return report


def g_step(
    generator_model: RadianceGenerator,
    discriminator: ProgressiveDiscriminator,
    optimizer: torch.optim.Optimizer,
    *,
    batch_size: int,
    loss_cfg: GanLossConfig,
    prior: PosePrior,
    camera: CameraView,
    sampling: SamplingConfig,
    generator: torch.Generator | None = None,
) -> dict:
    resolution = discriminator.current_resolution
    code = sample_control(generator_model.cfg, batch_size, generator)
    views = prior.sample(batch_size, generator)
    fake = generator_model.render(
        code, views, resolution,
        camera=camera, n_coarse=sampling.n_coarse, n_fine=sampling.n_fine,
        jitter=sampling.jitter, generator=generator,
    ).image
    d_fake, pose_fake = discriminator(fake)
    adv = F.softplus(-d_fake).mean()
    orth = generator_model.orthogonality_penalty()
    total = adv + loss_cfg.orth_weight * orth
    report = {"g_adv": adv.item(), "g_orth": orth.item()}
    if loss_cfg.use_pose_loss:
        if pose_fake is None:
            raise ConfigError("pose loss enabled but discriminator has no pose head")
        lp = pose_loss(views, pose_fake)
        total = total + loss_cfg.pose_weight * lp
        report["g_pose"] = lp.item()
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    report["g_total"] = total.item()
    return report


@dataclass
class StageInfo:
    stage: int
    resolution: int
    lr: float
    grew: bool


def advance_stage(
    schedule: TrainSchedule,
    discriminator: ProgressiveDiscriminator,
    step: int,
    opt_d: torch.optim.Optimizer | None = None,
    opt_g: torch.optim.Optimizer | None = None,
) -> StageInfo:
    """Bring the discriminator and learning rates in line with ``step``.

    At a stage boundary the discriminator gains an input head for the doubled
    resolution (its new parameters join the optimizer); the generator is
    untouched because it is resolution-free.
    """
    stage = schedule.stage_of(step)
    target = schedule.resolution(stage) if schedule.progressive else schedule.final_resolution
    grew = False
    while discriminator.current_resolution < target:
        before = {id(p) for p in discriminator.parameters()}
        discriminator.grow()
        new_params = [p for p in discriminator.parameters() if id(p) not in before]
        if opt_d is not None and new_params:
            opt_d.add_param_group({"params": new_params, "lr": schedule.lr(stage)})
        grew = True
    lr = schedule.lr(stage)
    for opt in (opt_d, opt_g):
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = lr
    return StageInfo(stage, discriminator.current_resolution, lr, grew)


@dataclass
class SurfTrainConfig:
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss: GanLossConfig = field(default_factory=GanLossConfig)
    prior: PosePrior = field(default_factory=PosePrior)
    camera: CameraView = field(default_factory=CameraView)
    base_channels: int = 64
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000
    fid_every: int = 0  # 0 disables the in-training FID stream
    fid_samples: int = 64
    fid_feature_dim: int = 16


class SurfTrainer:
    """Owns the mutable generator/discriminator pair, their optimizers and
    the run's RNG; writes a manifest, a JSONL metric stream and resumable
    checkpoints into ``out_dir``."""

    def __init__(self, cfg: SurfTrainConfig, dataset, out_dir):
        if len(dataset) == 0:
            raise DataError("training dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(cfg.seed)
        self.generator_model = RadianceGenerator(cfg.model)
        self.discriminator = ProgressiveDiscriminator(
            start_resolution=cfg.schedule.base_resolution
            if cfg.schedule.progressive
            else cfg.schedule.final_resolution,
            base_channels=cfg.base_channels,
            predict_pose=cfg.loss.use_pose_loss,
        )
        self.opt_g = make_optimizer(self.generator_model.parameters(), cfg.schedule.base_lr)
        self.opt_d = make_optimizer(self.discriminator.parameters(), cfg.schedule.base_lr)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self._fid_extractor = MockFeatureProjection(
            seed=cfg.seed + 7, feature_dim=cfg.fid_feature_dim
        )
        self._metrics_path = self.out_dir / "metrics.jsonl"
        self._write_manifest()

    # -- run artifacts -----------------------------------------------------

    def _write_manifest(self):
        manifest = {
            "config": asdict(self.cfg),
            "dataset": getattr(self.dataset, "describe", lambda: str(self.dataset))(),
            "total_steps": self.cfg.schedule.total_steps,
            "optimizer": {"type": "adam", "betas": list(ADAM_BETAS)},
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    def _log(self, row: dict):
        with self._metrics_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    # -- checkpointing -----------------------------------------------------

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self.cfg), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        tensors = {}
        for prefix, module in (("g", self.generator_model), ("d", self.discriminator)):
            for name, tensor in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = tensor
        manifest = {
            "config_hash": self.config_hash(),
            "step": self.step,
            "d_resolution": self.discriminator.current_resolution,
            "model": asdict(self.cfg.model),
        }
        extra = {
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng_state": self.rng.get_state(),
            "step": self.step,
        }
        save_checkpoint(path, "surf-trainer", manifest, tensors, extra)

    def restore(self, path) -> None:
        data = load_checkpoint(path, expected_kind="surf-trainer")
        if data.manifest["config_hash"] != self.config_hash():
            raise CheckpointError(
                "checkpoint was produced by a different configuration"
            )
        while self.discriminator.current_resolution < data.manifest["d_resolution"]:
            before = {id(p) for p in self.discriminator.parameters()}
            self.discriminator.grow()
            new = [p for p in self.discriminator.parameters() if id(p) not in before]
            self.opt_d.add_param_group({"params": new})
        g_state = {k[2:]: v for k, v in data.tensors.items() if k.startswith("g.")}
        d_state = {k[2:]: v for k, v in data.tensors.items() if k.startswith("d.")}
        self.generator_model.load_state_dict(g_state)
        self.discriminator.load_state_dict(d_state)
        self.opt_g.load_state_dict(data.extra["opt_g"])
        self.opt_d.load_state_dict(data.extra["opt_d"])
        self.rng.set_state(data.extra["rng_state"])
        self.step = data.extra["step"]

    # -- training ----------------------------------------------------------

    def _real_batch(self, resolution: int) -> torch.Tensor:
        idx = torch.randint(len(self.dataset), (self.cfg.schedule.batch_size,),
                            generator=self.rng)
        return self.dataset.batch(idx, resolution)

    def train_step(self) -> dict:
        info = advance_stage(
            self.cfg.schedule, self.discriminator, self.step, self.opt_d, self.opt_g
        )
        real = self._real_batch(info.resolution)
        report = {"step": self.step, "stage": info.stage,
                  "resolution": info.resolution, "lr": info.lr}
        report.update(
            d_step(
                self.discriminator, self.generator_model, real, self.opt_d,
                loss_cfg=self.cfg.loss, prior=self.cfg.prior,
                camera=self.cfg.camera, sampling=self.cfg.sampling,
                generator=self.rng,
            )
        )
        report.update(
            g_step(
                self.generator_model, self.discriminator, self.opt_g,
                batch_size=self.cfg.schedule.batch_size, loss_cfg=self.cfg.loss,
                prior=self.cfg.prior, camera=self.cfg.camera,
                sampling=self.cfg.sampling, generator=self.rng,
            )
        )
        bad = [k for k in ("d_total", "g_total") if not math.isfinite(report[k])]
        if bad:
            snapshot = self.out_dir / f"crash_step{self.step}.ckpt"
            self.save(snapshot)
            raise NumericError(
                f"non-finite loss {bad} at step {self.step}; snapshot at {snapshot}"
            )
        self.step += 1
        return report

    def evaluate_fid(self) -> float:
        """FID between a fresh sample of generated images and the dataset,
        with the mock projection extractor. Always rendered at the schedule's
        final resolution (the generator is resolution-free), so streams from
        progressive and non-progressive runs are comparable."""
        cfg = self.cfg
        res = cfg.schedule.final_resolution
        eval_rng = torch.Generator().manual_seed(cfg.seed * 1000003 + self.step)
        fakes = []
        with torch.no_grad():
            remaining = cfg.fid_samples
            while remaining > 0:
                n = min(remaining, 8)
                code = sample_control(cfg.model, n, eval_rng)
                views = cfg.prior.sample(n, eval_rng)
                fakes.append(
                    self.generator_model.render(
                        code, views, res, camera=cfg.camera,
                        n_coarse=cfg.sampling.n_coarse, n_fine=cfg.sampling.n_fine,
                        jitter=False, generator=eval_rng,
                    ).image
                )
                remaining -= n
        fake_feats = self._fid_extractor.extract(torch.cat(fakes))
        idx = torch.arange(min(len(self.dataset), cfg.fid_samples))
        real_feats = self._fid_extractor.extract(self.dataset.batch(idx, res))
        return evaluation.fid(fake_feats.numpy(), real_feats.numpy())

    def train(self, total_steps: int | None = None, checkpoint_name: str = "latest.ckpt"):
        total = total_steps if total_steps is not None else self.cfg.schedule.total_steps
        start = time.time()
        while self.step < total:
            report = self.train_step()
            if self.cfg.fid_every and self.step % self.cfg.fid_every == 0:
                report["fid"] = self.evaluate_fid()
                report["fid_extractor"] = self._fid_extractor.tag
            if self.step % self.cfg.log_every == 0 or self.step == total:
                report["elapsed_s"] = round(time.time() - start, 3)
                self._log(report)
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / checkpoint_name)
        self.save(self.out_dir / checkpoint_name)
        return self.out_dir / checkpoint_name
