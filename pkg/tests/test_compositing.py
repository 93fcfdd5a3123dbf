import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import quadrature_pixel
from ctrl3d import compositing
from ctrl3d.camera import RayBatch
from ctrl3d.compositing import composite, deltas_from_depths
from ctrl3d.errors import ConfigError, NumericError
from ctrl3d.sampling import hierarchical_sample, stratified_sample

BACKENDS = ["torch"] + (["ext"] if compositing.HAS_EXTENSION else [])


def rand_inputs(n_rays=3, n_samples=9, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(n_rays, n_samples, generator=g, dtype=dtype) * 3.0
    colors = torch.rand(n_rays, n_samples, 3, generator=g, dtype=dtype)
    depths = torch.sort(torch.rand(n_rays, n_samples, generator=g, dtype=dtype),
                        dim=-1).values
    return sigma, colors, depths


@pytest.mark.parametrize("backend", BACKENDS)
def test_fully_transparent_gives_background(backend):
    sigma = torch.zeros(2, 5, dtype=torch.float64)
    _, colors, depths = rand_inputs(2, 5)
    res = composite(colors, sigma, depths, background=(0.1, 0.2, 0.3), backend=backend)
    assert torch.allclose(res.rgb, torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
                          .expand(2, 3))
    assert torch.allclose(res.weights.sum(-1), torch.zeros(2, dtype=torch.float64))


@pytest.mark.parametrize("backend", BACKENDS)
def test_opaque_first_sample_takes_all(backend):
    sigma, colors, depths = rand_inputs(2, 5)
    sigma[:, 0] = 1e8
    res = composite(colors, sigma, depths, backend=backend)
    assert torch.allclose(res.rgb, colors[:, 0], atol=1e-9)
    assert torch.allclose(res.weights[:, 0], torch.ones(2, dtype=torch.float64), atol=1e-9)


def test_sentinel_absorbs_residual_transmittance():
    sigma = torch.full((1, 6), 0.3, dtype=torch.float64)
    _, colors, depths = rand_inputs(1, 6)
    res = composite(colors, sigma, depths)  # sentinel final interval
    assert torch.allclose(res.weights.sum(-1), torch.ones(1, dtype=torch.float64))


def test_negative_density_rejected():
    sigma, colors, depths = rand_inputs()
    sigma[0, 0] = -1e-3
    with pytest.raises(NumericError):
        composite(colors, sigma, depths)


def test_shape_mismatch_rejected():
    sigma, colors, depths = rand_inputs()
    with pytest.raises(ConfigError):
        composite(colors[..., :2], sigma, depths)
    with pytest.raises(ConfigError):
        composite(colors, sigma, depths[..., :-1])


def test_backends_agree_forward_and_backward():
    if not compositing.HAS_EXTENSION:
        pytest.skip("extension not built")
    sigma, colors, depths = rand_inputs(4, 11, seed=3)
    sigma.requires_grad_(True)
    colors.requires_grad_(True)
    probe = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def scalar(backend):
        res = composite(colors, sigma, depths, far=1.2, backend=backend)
        return (res.rgb * probe).sum() + 0.3 * res.depth.sum() + (res.weights ** 2).sum()

    for backend in ("ext", "torch"):
        val = scalar(backend)
        if backend == "ext":
            ext_val = val
            ext_grads = torch.autograd.grad(val, [sigma, colors])
        else:
            torch_val = val
            torch_grads = torch.autograd.grad(val, [sigma, colors])
    assert abs(ext_val.item() - torch_val.item()) < 1e-12
    for a, b in zip(ext_grads, torch_grads):
        assert (a - b).abs().max().item() < 1e-12


def test_extension_gradcheck():
    if not compositing.HAS_EXTENSION:
        pytest.skip("extension not built")
    sigma, colors, depths = rand_inputs(2, 6, seed=5)
    sigma.requires_grad_(True)
    colors.requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda s, c: composite(c, s, depths, backend="ext").rgb,
        (sigma, colors), eps=1e-6, atol=1e-8,
    )


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_weights_nonnegative_and_sum_below_one(seed):
    sigma, colors, depths = rand_inputs(2, 7, seed=seed)
    res = composite(colors, sigma, depths, far=1.5)
    assert (res.weights >= 0).all()
    assert (res.weights.sum(-1) <= 1.0 + 1e-12).all()


@given(seed=st.integers(0, 10_000), k=st.integers(0, 6))
@settings(max_examples=40, deadline=None)
def test_monotone_in_density(seed, k):
    # raising sigma at sample k never decreases weight k
    sigma, colors, depths = rand_inputs(1, 7, seed=seed)
    before = composite(colors, sigma, depths, far=1.5).weights[0, k]
    sigma2 = sigma.clone()
    sigma2[0, k] += 0.5
    after = composite(colors, sigma2, depths, far=1.5).weights[0, k]
    assert after >= before - 1e-12
    # and transmittance downstream of k never increases
    t_before = 1.0 - composite(colors, sigma, depths, far=1.5).weights[0, : k + 1].sum()
    t_after = 1.0 - composite(colors, sigma2, depths, far=1.5).weights[0, : k + 1].sum()
    assert t_after <= t_before + 1e-12


def _single_ray(near, far):
    origins = torch.zeros(1, 1, 3, dtype=torch.float64)
    dirs = torch.tensor([[[0.0, 0.0, 1.0]]], dtype=torch.float64)
    return RayBatch(origins, dirs, 1, 1, near, far)


def composite_along_profile(sigma_fn, color_fn, n_coarse, n_fine, near, far, seed=0):
    """Render one ray of an analytic density/color profile through the real
    sampling + compositing pipeline, bounded to [near, far]."""
    rays = _single_ray(near, far)
    g = torch.Generator().manual_seed(seed)
    coarse = stratified_sample(rays, n_coarse, jitter=False)

    def field(depths):
        flat = depths.reshape(-1).numpy()
        sigma = torch.as_tensor(sigma_fn(flat)).reshape(depths.shape)
        colors = torch.as_tensor(color_fn(flat)).reshape(*depths.shape, 3)
        return sigma, colors

    sigma_c, colors_c = field(coarse.depths)
    comp_c = composite(colors_c, sigma_c, coarse.depths, far=far, near=near)
    merged = hierarchical_sample(rays, coarse.depths, comp_c.weights, n_fine, g)
    sigma_f, colors_f = field(merged.depths)
    return composite(colors_f, sigma_f, merged.depths, far=far, near=near).rgb[0, 0]


def test_constant_field_matches_analytic_exactly():
    color = np.array([0.7, 0.5, 0.3])
    pixel = composite_along_profile(
        lambda t: np.ones_like(t), lambda t: np.tile(color, (len(t), 1)),
        12, 12, 0.0, 1.0,
    )
    expected = torch.as_tensor(color * (1.0 - math.exp(-1.0)))
    assert torch.allclose(pixel, expected, atol=1e-12)


def test_convergence_to_quadrature_oracle_smooth_field():
    sigma_fn = lambda t: 1.0 + 0.5 * np.sin(2 * np.pi * np.asarray(t))
    color_fn = lambda t: np.stack(
        [0.5 + 0.1 * np.cos(3 * np.asarray(t)),
         0.2 + 0.1 * np.asarray(t) ** 2,
         0.8 - 0.1 * np.asarray(t)], axis=-1,
    )
    oracle = torch.as_tensor(quadrature_pixel(sigma_fn, color_fn, 0.0, 1.0))
    errs = []
    for n in (12, 24, 48, 96):
        pixel = composite_along_profile(sigma_fn, color_fn, n, n, 0.0, 1.0)
        errs.append(((pixel - oracle).abs().max() / oracle.abs().max()).item())
    assert errs[0] < 0.05
    for a, b in zip(errs, errs[1:]):
        assert b < a, f"error did not decrease: {errs}"
    # error halves when the count doubles, within 20%
    for a, b in zip(errs, errs[1:]):
        assert 0.4 <= b / a <= 0.6, f"halving violated: {errs}"


def test_deltas_conventions():
    depths = torch.tensor([[0.2, 0.5, 0.9]], dtype=torch.float64)
    d_sentinel = deltas_from_depths(depths, None)
    assert d_sentinel[0, -1] == compositing.SENTINEL_DELTA
    d_far = deltas_from_depths(depths, 1.0)
    assert torch.allclose(d_far, torch.tensor([[0.3, 0.4, 0.1]], dtype=torch.float64))
    d_both = deltas_from_depths(depths, 1.0, 0.0)
    assert torch.allclose(d_both, torch.tensor([[0.5, 0.4, 0.1]], dtype=torch.float64))
    assert d_both.sum().item() == pytest.approx(1.0)


def test_leading_batch_dims_supported():
    sigma, colors, depths = rand_inputs(6, 5, seed=8)
    res_flat = composite(colors, sigma, depths, far=1.1)
    res_batched = composite(
        colors.reshape(2, 3, 5, 3), sigma.reshape(2, 3, 5), depths.reshape(2, 3, 5),
        far=1.1,
    )
    assert torch.allclose(res_batched.rgb.reshape(6, 3), res_flat.rgb)
    assert torch.allclose(res_batched.depth.reshape(6), res_flat.depth)
