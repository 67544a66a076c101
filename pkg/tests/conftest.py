import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def raster_overlaps(d, g):
    """IoU/IoG/IoD by counting covered unit pixels; boxes must have integer corners."""
    x0 = int(min(d[0], g[0]))
    y0 = int(min(d[1], g[1]))
    x1 = int(max(d[0] + d[2], g[0] + g[2]))
    y1 = int(max(d[1] + d[3], g[1] + g[3]))
    xs = np.arange(x0, x1)[None, :] + 0.5
    ys = np.arange(y0, y1)[:, None] + 0.5

    def mask(b):
        return (xs > b[0]) & (xs < b[0] + b[2]) & (ys > b[1]) & (ys < b[1] + b[3])

    md, mg = mask(d), mask(g)
    inter = np.logical_and(md, mg).sum()
    union = np.logical_or(md, mg).sum()
    return inter / union, inter / mg.sum(), inter / md.sum()


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at float64 tensor ``x``."""
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(torch.as_tensor(f(flat.view_as(x))).detach())
        flat[i] = orig - eps
        fm = float(torch.as_tensor(f(flat.view_as(x))).detach())
        flat[i] = orig
        grad.view(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / max(float(a.abs().max()), float(b.abs().max()), 1e-8))
