import contextlib

import numpy as np
import pytest
import torch

from ctrl3d.generator import ControlCode, GeneratorConfig, RadianceGenerator

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def acceptance(number: int, description: str):
    """Record one pass/fail line per acceptance criterion; printed in the
    terminal summary of every pytest run."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_LINES.append(
            f"ACCEPTANCE {number}: FAIL — {description} ({type(exc).__name__})"
        )
        raise
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {number}: PASS — {description}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def rel_err(analytic: torch.Tensor, reference: torch.Tensor) -> float:
    analytic = torch.as_tensor(analytic)
    reference = torch.as_tensor(reference)
    denom = max(reference.abs().max().item(), 1e-12)
    return (analytic - reference).abs().max().item() / denom


def central_difference(fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function w.r.t. one
    tensor, perturbing one entry at a time (float64 inputs expected)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        with torch.no_grad():
            up = fn()
        flat[i] = orig - h
        with torch.no_grad():
            down = fn()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)
    return grad


def quadrature_pixel(sigma_fn, color_fn, near, far, n=4096, background=0.0):
    """Independent dense-quadrature oracle for the emission-absorption
    integral: trapezoid rule on a uniform grid, cumulative trapezoid for the
    inner optical depth."""
    t = np.linspace(near, far, n)
    sig = np.asarray(sigma_fn(t), dtype=np.float64)
    col = np.asarray(color_fn(t), dtype=np.float64)
    optical = np.concatenate([[0.0], np.cumsum((sig[1:] + sig[:-1]) / 2.0 * np.diff(t))])
    trans = np.exp(-optical)
    integrand = trans[:, None] * sig[:, None] * col
    pixel = np.trapezoid(integrand, t, axis=0)
    return pixel + trans[-1] * background


@pytest.fixture
def tiny_config():
    return GeneratorConfig(
        hidden_dim=16, modulation_dim=12, num_controls=3,
        num_shared_blocks=2, noise_dim=8,
    )


@pytest.fixture
def tiny_generator(tiny_config):
    torch.manual_seed(0)
    return RadianceGenerator(tiny_config)


@pytest.fixture
def tiny_code(tiny_config):
    gen = torch.Generator().manual_seed(3)
    return ControlCode(
        torch.randn(2, tiny_config.num_layers, tiny_config.num_controls, generator=gen),
        torch.randn(2, tiny_config.noise_dim, generator=gen),
    )
