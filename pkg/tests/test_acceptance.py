"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a pass/fail line shown in the pytest terminal summary.
The heavy criteria (5, 8, 9) train small models and dominate the runtime;
the whole module finishes in roughly a quarter hour on two CPU cores.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest
import torch

from conftest import acceptance, central_difference, quadrature_pixel, rel_err
from ctrl3d.adapters import MockPerceptualFlatten, mock_codec
from ctrl3d.camera import RayBatch
from ctrl3d.compositing import composite
from ctrl3d.discriminator import ProgressiveDiscriminator
from ctrl3d.evaluation import fid, gaussian_frechet_distance
from ctrl3d.generator import (ControlCode, GeneratorConfig, RadianceGenerator,
                              SubspaceLayer, film_siren)
from ctrl3d.injection import (CanonicalMapper, InjectionLossWeights,
                              InjectionTrainConfig, LinearMockTripletSource,
                              PoseBasis, apply_pose, canonical_loss,
                              canonicalize, direction_penalty,
                              sample_view_box, target_loss, train_injection)
from ctrl3d.sampling import hierarchical_sample, stratified_sample
from ctrl3d.synthetic import SphereDataset, sphere_pose_dataset
from ctrl3d.training import (GanLossConfig, SamplingConfig, SurfTrainConfig,
                             SurfTrainer, TrainSchedule, make_optimizer,
                             pose_loss, r1_penalty)

DOUBLE = torch.float64


# -- criterion 1: rendering oracle -------------------------------------------


def _profile_pixel(sigma_fn, color_fn, n_coarse, n_fine, near, far, seed=0):
    origins = torch.zeros(1, 1, 3, dtype=DOUBLE)
    dirs = torch.tensor([[[0.0, 0.0, 1.0]]], dtype=DOUBLE)
    rays = RayBatch(origins, dirs, 1, 1, near, far)
    gen = torch.Generator().manual_seed(seed)

    def field(depths):
        flat = depths.reshape(-1).numpy()
        sigma = torch.as_tensor(sigma_fn(flat)).reshape(depths.shape)
        colors = torch.as_tensor(color_fn(flat)).reshape(*depths.shape, 3)
        return sigma, colors

    coarse = stratified_sample(rays, n_coarse, jitter=False)
    sigma_c, colors_c = field(coarse.depths)
    comp_c = composite(colors_c, sigma_c, coarse.depths, far=far, near=near)
    merged = hierarchical_sample(rays, coarse.depths, comp_c.weights, n_fine, gen)
    sigma_f, colors_f = field(merged.depths)
    return composite(colors_f, sigma_f, merged.depths, far=far, near=near).rgb[0, 0]


def test_criterion_1_rendering_oracle():
    with acceptance(1, "compositing matches 4096-point quadrature oracle"):
        start = time.time()
        near, far = 0.0, 1.0
        sigma_fn = lambda t: np.ones_like(t)  # constant-density field
        color_fn = lambda t: np.stack(
            [0.5 + 0.1 * np.cos(3 * np.asarray(t)),
             0.2 + 0.1 * np.asarray(t) ** 2,
             0.8 - 0.1 * np.asarray(t)], axis=-1,
        )
        oracle = torch.as_tensor(quadrature_pixel(sigma_fn, color_fn, near, far, 4096))

        errors = []
        for n in (12, 24, 48, 96):  # 12+12 then three doublings
            pixel = _profile_pixel(sigma_fn, color_fn, n, n, near, far)
            errors.append(((pixel - oracle).abs().max() / oracle.abs().max()).item())
        assert errors[0] <= 1e-2, f"12+12 error {errors[0]:.2e} exceeds 1e-2"
        for a, b in zip(errors, errors[1:]):
            assert b < a, f"error not monotone under doubling: {errors}"

        # constant color too: the discrete sum is exact up to oracle error
        const_color = lambda t: np.tile([0.7, 0.5, 0.3], (len(np.atleast_1d(t)), 1))
        pixel = _profile_pixel(sigma_fn, const_color, 12, 12, near, far)
        analytic = torch.as_tensor(
            np.array([0.7, 0.5, 0.3]) * (1.0 - math.exp(-1.0))
        )
        assert rel_err(pixel, analytic) < 1e-9
        assert time.time() - start < 10.0, "criterion 1 exceeded its 10 s budget"


# -- criterion 2: gradient suite ----------------------------------------------


def test_criterion_2_gradient_suite():
    with acceptance(2, "analytic gradients match central finite differences"):
        start = time.time()
        g = torch.Generator().manual_seed(0)

        # (a) one film-siren block with residual skip
        x = torch.randn(1, 5, generator=g, dtype=DOUBLE)
        freq = torch.randn(1, 4, generator=g, dtype=DOUBLE) * 3 + 12
        phase = torch.randn(1, 4, generator=g, dtype=DOUBLE)
        weight = torch.randn(4, 5, generator=g, dtype=DOUBLE)
        bias = torch.randn(4, generator=g, dtype=DOUBLE)
        probe = torch.randn(1, 4, generator=g, dtype=DOUBLE)
        block_inputs = {"x": x, "freq": freq, "phase": phase,
                        "weight": weight, "bias": bias}
        for t in block_inputs.values():
            t.requires_grad_(True)

        def block_scalar():
            skip = (x @ torch.ones(5, 4, dtype=DOUBLE))
            return (film_siren(x, freq, phase, weight, bias, skip=skip) * probe).sum()

        grads = torch.autograd.grad(block_scalar(), list(block_inputs.values()))
        for (name, tensor), grad in zip(block_inputs.items(), grads):
            fd = central_difference(block_scalar, tensor)
            assert rel_err(grad, fd) <= 1e-4, f"block input {name}"

        # (b) subspace modulation
        layer = SubspaceLayer(10, 4).double()
        with torch.no_grad():
            layer.basis.copy_(torch.randn(10, 4, generator=g, dtype=DOUBLE))
            layer.scale.copy_(torch.randn(4, generator=g, dtype=DOUBLE))
            layer.shift.copy_(torch.randn(10, generator=g, dtype=DOUBLE))
        coeffs = torch.randn(2, 4, generator=g, dtype=DOUBLE).requires_grad_(True)
        mod_probe = torch.randn(2, 10, generator=g, dtype=DOUBLE)

        def mod_scalar():
            return (layer(coeffs) * mod_probe).sum()

        targets = {"coeffs": coeffs, "basis": layer.basis,
                   "scale": layer.scale, "shift": layer.shift}
        grads = torch.autograd.grad(mod_scalar(), list(targets.values()))
        for (name, tensor), grad in zip(targets.items(), grads):
            fd = central_difference(mod_scalar, tensor)
            assert rel_err(grad, fd) <= 1e-4, f"modulation input {name}"

        # (c) 4x4 end-to-end render, every learnable tensor
        torch.manual_seed(0)
        cfg = GeneratorConfig(hidden_dim=12, modulation_dim=10, num_controls=3,
                              num_shared_blocks=2, noise_dim=6)
        model = RadianceGenerator(cfg).double()
        code = ControlCode(
            torch.randn(1, cfg.num_layers, 3, generator=g, dtype=DOUBLE),
            torch.randn(1, 6, generator=g, dtype=DOUBLE),
        )
        views = torch.tensor([[0.07, -0.12]], dtype=DOUBLE)
        render_probe = torch.randn(1, 3, 4, 4, generator=g, dtype=DOUBLE)

        def render_scalar():
            out = model.render(code, views, 4, n_coarse=3, n_fine=0, jitter=False)
            return (out.image * render_probe).sum()

        model.zero_grad()
        render_scalar().backward()
        for name, param in model.named_parameters():
            fd = central_difference(render_scalar, param)
            assert rel_err(param.grad, fd) <= 1e-4, f"render parameter {name}"

        # (d) R1 penalty value vs finite-difference gradient-norm-squared
        torch.manual_seed(1)
        tiny_d = torch.nn.Sequential(
            torch.nn.Flatten(), torch.nn.Linear(3 * 4 * 4, 6), torch.nn.Tanh(),
            torch.nn.Linear(6, 1),
        ).double()
        images = torch.randn(2, 3, 4, 4, generator=g, dtype=DOUBLE)
        xg = images.clone().requires_grad_(True)
        analytic = r1_penalty(tiny_d(xg).squeeze(-1), xg).item()
        fd_total = 0.0
        for b in range(images.shape[0]):
            xb = images[b:b + 1].clone()
            fd_grad = central_difference(lambda: tiny_d(xb).sum(), xb)
            fd_total += fd_grad.pow(2).sum().item()
        fd_value = fd_total / images.shape[0]
        assert abs(analytic - fd_value) / abs(fd_value) <= 1e-4

        elapsed = time.time() - start
        assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (budget 2 min)"


# -- criterion 3: orthogonality dynamics --------------------------------------


def test_criterion_3_orthogonality_dynamics():
    with acceptance(3, "subspace penalty optimizes below 1e-3 in 1k steps; "
                       "orthonormal init reads exactly 0"):
        torch.manual_seed(0)
        layers = [SubspaceLayer(256, 6) for _ in range(9)]
        for layer in layers:
            assert layer.orthogonality_penalty().item() == 0.0  # exact at init

        with torch.no_grad():  # move away from orthonormality
            for layer in layers:
                layer.basis.copy_(torch.randn(256, 6) * 0.3)
        penalty = torch.stack([l.orthogonality_penalty() for l in layers]).mean()
        assert penalty.item() > 1.0  # genuinely random start

        params = [p for l in layers for p in l.parameters()]
        opt = make_optimizer(params, 3e-2)
        sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=0.99)
        for _ in range(1000):
            penalty = torch.stack([l.orthogonality_penalty() for l in layers]).mean()
            opt.zero_grad()
            penalty.backward()
            opt.step()
            sched.step()
        final = torch.stack([l.orthogonality_penalty() for l in layers]).mean().item()
        assert final < 1e-3, f"penalty after 1k steps: {final:.2e}"


# -- criterion 4: pose combination exactness ----------------------------------


def test_criterion_4_pose_combination_exactness():
    with acceptance(4, "pose offset is exactly linear; penalty zero iff "
                       "orthonormal sub-directions"):
        torch.manual_seed(0)
        basis = PoseBasis(num_directions=5).double()
        codes = torch.randn(3, 18, 512, dtype=DOUBLE,
                            generator=torch.Generator().manual_seed(1))

        # identity at the zero view, bit for bit
        out = apply_pose(codes, torch.zeros(3, 2, dtype=DOUBLE), basis)
        assert torch.equal(out, codes)

        # linearity to 1e-12
        g = torch.Generator().manual_seed(2)
        v1 = torch.randn(3, 2, generator=g, dtype=DOUBLE)
        v2 = torch.randn(3, 2, generator=g, dtype=DOUBLE)
        a = apply_pose(apply_pose(codes, v1, basis), v2, basis)
        b = apply_pose(codes, v1 + v2, basis)
        assert rel_err(a, b) < 1e-12
        # the map views -> offset is the combined two-column matrix
        offset = apply_pose(codes, v1, basis)[:, :4] - codes[:, :4]
        expected = (v1 @ basis.combined().T).reshape(3, 4, 512)
        assert rel_err(offset, expected) < 1e-12

        # penalty zero iff orthonormal columns, constructed both ways (N=5)
        dim = 4 * 512
        ortho = torch.zeros(dim, 5, dtype=DOUBLE)
        for j in range(5):
            ortho[11 * j, j] = 1.0 if j % 2 == 0 else -1.0
        with torch.no_grad():
            basis.pitch_dirs.copy_(ortho)
            basis.yaw_dirs.copy_(ortho)
        assert direction_penalty(basis).item() == 0.0

        non_ortho = ortho.clone()
        non_ortho[:, 1] = non_ortho[:, 0]
        with torch.no_grad():
            basis.pitch_dirs.copy_(non_ortho)
        assert direction_penalty(basis).item() == pytest.approx(2.0)
        scaled = ortho * 0.5  # orthogonal but not orthonormal
        with torch.no_grad():
            basis.pitch_dirs.copy_(ortho)
            basis.yaw_dirs.copy_(scaled)
        assert direction_penalty(basis).item() > 0.0


# -- criterion 5: mock injection convergence -----------------------------------


def test_criterion_5_mock_injection_convergence():
    with acceptance(5, "mock injection: canonical latent loss drops >=90% and "
                       "mapper matches the analytic map to <=1e-2"):
        start = time.time()
        torch.manual_seed(0)
        encoder, decoder = mock_codec(seed=5, resolution=32)
        source = LinearMockTripletSource(decoder, seed=9)
        mapper = CanonicalMapper()
        basis = PoseBasis()
        cfg = InjectionTrainConfig(lr=3e-3, batch_size=32, seed=2,
                                   basis_lr_multiplier=5.0)
        history = train_injection(mapper, basis, encoder, decoder,
                                  MockPerceptualFlatten(), source,
                                  steps=1000, cfg=cfg)

        first = statistics.mean(h["canonical_latent_raw"] for h in history[:20])
        last = statistics.mean(h["canonical_latent_raw"] for h in history[-20:])
        drop = 1.0 - last / first
        assert drop >= 0.90, f"canonical latent loss dropped only {drop:.1%}"

        gen = torch.Generator().manual_seed(77)
        content = source.sample_content(256, gen)
        views = sample_view_box(256, gen)
        held_out = source.code_for(content, views)
        with torch.no_grad():
            predicted = canonicalize(mapper, held_out)
        analytic = source.analytic_canonical(held_out)
        rel = ((predicted - analytic).norm() / analytic.norm()).item()
        assert rel <= 1e-2, f"held-out relative error {rel:.4f}"

        elapsed = time.time() - start
        assert elapsed < 300.0, f"mock injection took {elapsed:.0f}s (budget 5 min)"


# -- criterion 6: loss bookkeeping ----------------------------------------------


def test_criterion_6_loss_bookkeeping():
    with acceptance(6, "loss totals equal lambda-weighted sums of parts to 1e-10"):
        g = torch.Generator().manual_seed(0)
        torch.manual_seed(0)
        basis = PoseBasis().double()
        weights = InjectionLossWeights()
        assert (weights.canonical_latent, weights.target_latent) == (10.0, 10.0)
        assert weights.direction == 100.0
        assert (weights.canonical_pixel, weights.canonical_perceptual,
                weights.target_pixel, weights.target_perceptual) == (1.0,) * 4
        perceptual = MockPerceptualFlatten()
        for _ in range(10):
            a = torch.randn(2, 18, 512, generator=g, dtype=DOUBLE)
            b = torch.randn(2, 18, 512, generator=g, dtype=DOUBLE)
            ia = torch.rand(2, 3, 8, 8, generator=g, dtype=DOUBLE)
            ib = torch.rand(2, 3, 8, 8, generator=g, dtype=DOUBLE)
            lc = canonical_loss(a, b, ia, ib, perceptual, weights)
            lt = target_loss(a, b, ia, ib, perceptual, basis, weights)
            lc_parts = 10.0 * lc.latent + 1.0 * lc.pixel + 1.0 * lc.perceptual
            lt_parts = (10.0 * lt.latent + 1.0 * lt.pixel + 1.0 * lt.perceptual
                        + 100.0 * lt.direction)
            assert abs(lc.total.item() - lc_parts) < 1e-10
            assert abs(lt.total.item() - lt_parts) < 1e-10


# -- criterion 7: FID correctness ------------------------------------------------


def test_criterion_7_fid_correctness():
    with acceptance(7, "FID matches closed-form Gaussian values and converges"):
        rng = np.random.default_rng(0)

        feats = rng.standard_normal((500, 8))
        assert fid(feats, feats.copy()) < 1e-6

        offset = np.array([0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 0.25, 0.75])
        shifted = feats + offset
        assert abs(fid(feats, shifted) - float(offset @ offset)) < 1e-6

        # sampled Gaussians converge to the analytic closed form
        dim = 8
        mean_a = rng.standard_normal(dim)
        mean_b = mean_a + rng.standard_normal(dim) * 1.5
        raw_a = rng.standard_normal((dim, dim))
        raw_b = rng.standard_normal((dim, dim))
        cov_a = raw_a @ raw_a.T / dim + np.eye(dim)
        cov_b = 1.5 * (raw_b @ raw_b.T / dim) + 0.5 * np.eye(dim)
        analytic = gaussian_frechet_distance(mean_a, cov_a, mean_b, cov_b)
        samples_a = mean_a + rng.standard_normal((10_000, dim)) @ np.linalg.cholesky(cov_a).T
        samples_b = mean_b + rng.standard_normal((10_000, dim)) @ np.linalg.cholesky(cov_b).T
        estimate = fid(samples_a, samples_b)
        assert abs(estimate - analytic) / analytic <= 0.05


# -- criterion 8: synthetic pose head --------------------------------------------


def test_criterion_8_synthetic_pose_head():
    with acceptance(8, "discriminator pose branch reaches < 5 deg MAE on "
                       "analytic spheres"):
        start = time.time()
        torch.manual_seed(0)
        images, views = sphere_pose_dataset(2000, 32, seed=11)
        train_x, train_v = images[:1744], views[:1744]
        test_x, test_v = images[1744:], views[1744:]

        disc = ProgressiveDiscriminator(start_resolution=32, base_channels=16,
                                        predict_pose=True)
        opt = make_optimizer(disc.parameters(), 3e-4)
        rng = torch.Generator().manual_seed(1)
        for _ in range(800):
            idx = torch.randint(len(train_x), (48,), generator=rng)
            _, pose = disc(train_x[idx])
            loss = pose_loss(train_v[idx], pose)
            opt.zero_grad()
            loss.backward()
            opt.step()

        with torch.no_grad():
            _, predicted = disc(test_x)
        mae_rad = (predicted - test_v).abs().mean().item()
        assert mae_rad < math.radians(5.0), (
            f"held-out pose MAE {math.degrees(mae_rad):.2f} deg"
        )
        elapsed = time.time() - start
        assert elapsed < 1800.0, f"pose head training took {elapsed:.0f}s"


# -- criterion 9: smoke training --------------------------------------------------


def _smoke_config(**overrides):
    base = dict(
        model=GeneratorConfig(hidden_dim=32, modulation_dim=32, num_controls=3,
                              num_shared_blocks=3, noise_dim=16),
        schedule=TrainSchedule(base_resolution=32, num_stages=1,
                               steps_per_stage=2000, base_lr=2e-4, batch_size=2),
        sampling=SamplingConfig(n_coarse=6, n_fine=6),
        loss=GanLossConfig(),
        base_channels=16,
        seed=7,
        log_every=50,
        checkpoint_every=0,
    )
    base.update(overrides)
    return SurfTrainConfig(**base)


@pytest.mark.slow
def test_criterion_9_smoke_training(tmp_path):
    with acceptance(9, "2k-step smoke training: finite losses, bit-identical "
                       "resume, distinguishable growing-ablation FID streams"):
        dataset = SphereDataset(size=64, native_resolution=32, seed=3)

        trainer = SurfTrainer(_smoke_config(), dataset, tmp_path / "main")
        reports = []
        for _ in range(1000):
            reports.append(trainer.train_step())
        ckpt = tmp_path / "main" / "step1000.ckpt"
        trainer.save(ckpt)
        for _ in range(1000):
            reports.append(trainer.train_step())
        assert trainer.step == 2000
        for row in reports:
            assert math.isfinite(row["d_total"]) and math.isfinite(row["g_total"])

        resumed = SurfTrainer(_smoke_config(), dataset, tmp_path / "resumed")
        resumed.restore(ckpt)
        assert resumed.step == 1000
        for i in range(5):
            row = resumed.train_step()
            for key in ("d_total", "g_total", "d_adv", "g_adv", "d_r1", "g_orth"):
                assert row[key] == reports[1000 + i][key], (
                    f"resume diverged at step {row['step']} on {key}"
                )

        # progressive-growing ablation: two FID-vs-step streams
        streams = {}
        for progressive in (True, False):
            cfg = _smoke_config(
                schedule=TrainSchedule(base_resolution=16, num_stages=2,
                                       steps_per_stage=150, base_lr=2e-4,
                                       batch_size=2, progressive=progressive),
                fid_every=100, fid_samples=16, fid_feature_dim=8,
                log_every=100,
            )
            sub = SurfTrainer(cfg, dataset, tmp_path / f"ablation_{progressive}")
            stream = []
            for _ in range(300):
                sub.train_step()
                if sub.step % 100 == 0:
                    stream.append(sub.evaluate_fid())
            streams[progressive] = stream
        assert len(streams[True]) == len(streams[False]) == 3
        assert all(math.isfinite(v) for s in streams.values() for v in s)
        assert not np.allclose(streams[True], streams[False]), (
            "growing ablation produced identical FID streams"
        )


# -- criterion 10: declared full-scale protocols -----------------------------------


FULL_SCALE_REFERENCES = {
    "table1": {"fid": 4.72, "pose_err_x100": 4.24, "frames_per_sec": 72},
    "suppl_table1": {"fid": [28.88, 44.56], "id_consistency": [0.68, 0.66]},
    "suppl_table2": {"pose_err_x100_without": 2.69, "pose_err_x100_with": 2.36},
}


def test_criterion_10_full_scale_protocols_are_configuration_only(tmp_path):
    with acceptance(10, "full-scale reference numbers declared not "
                        "desk-reproducible; protocols ship as configuration"):
        # The published numbers require full-scale dataset training and real
        # pretrained backbones; they are recorded as references, never
        # asserted. What must exist is the protocol plumbing: the same
        # commands, scaled by configuration alone (50k/70k FID, per-angle
        # identity curves, frames/sec), must run end to end on mocks.
        from ctrl3d.cli import main

        out = tmp_path / "run"
        sets = []
        for s in [
            "surf.model.hidden_dim=16", "surf.model.modulation_dim=12",
            "surf.model.num_controls=3", "surf.model.num_shared_blocks=2",
            "surf.model.noise_dim=8", "surf.schedule.base_resolution=16",
            "surf.schedule.num_stages=1", "surf.schedule.steps_per_stage=1",
            "surf.schedule.batch_size=2", "surf.sampling.n_coarse=3",
            "surf.sampling.n_fine=0", "surf.base_channels=16",
            "surf.checkpoint_every=0", "dataset.size=8",
            "dataset.native_resolution=16", f"out_dir={out}",
        ]:
            sets += ["--set", s]
        assert main(["train-surf", *sets]) == 0
        ckpt = str(out / "latest.ckpt")

        # FID protocol: generated-vs-real counts are plain parameters (the
        # published protocol sets them to 50000 and 70000)
        fid_out = tmp_path / "fid.json"
        assert main(["evaluate", "--protocol", "fid", "--checkpoint", ckpt, *sets,
                     "--num-generated", "12", "--num-real", "8",
                     "--resolution", "16", "--out", str(fid_out)]) == 0
        report = json.loads(fid_out.read_text())
        assert report["sample_counts"] == {"generated": 12, "real": 8}
        assert report["extractor"].startswith("mock-"), (
            "desk-scale FID must be tagged with its mock extractor"
        )

        # per-angle identity-consistency protocol
        id_out = tmp_path / "id.json"
        assert main(["evaluate", "--protocol", "id-consistency", "--checkpoint",
                     ckpt, *sets, "--resolution", "16",
                     "--yaw-sweep-deg", "-45,-30,-15,0,15,30,45",
                     "--out", str(id_out)]) == 0
        id_report = json.loads(id_out.read_text())
        assert len(id_report["breakdown"]) == 7

        # throughput protocol backing the frames/sec column
        fps_out = tmp_path / "fps.json"
        assert main(["evaluate", "--protocol", "throughput", "--checkpoint", ckpt,
                     *sets, "--resolution", "16", "--trials", "3",
                     "--out", str(fps_out)]) == 0
        assert json.loads(fps_out.read_text())["value"] > 0

        # reference values stay references
        assert FULL_SCALE_REFERENCES["table1"]["fid"] == 4.72
        assert FULL_SCALE_REFERENCES["table1"]["pose_err_x100"] == 4.24
        assert FULL_SCALE_REFERENCES["table1"]["frames_per_sec"] == 72
        assert FULL_SCALE_REFERENCES["suppl_table2"]["pose_err_x100_with"] == 2.36
