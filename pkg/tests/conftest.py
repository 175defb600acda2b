import numpy as np
import pytest
import torch

from trajvfi.experiments import run_ladder
from trajvfi.model import ModelConfig

# small widths keep the structural tests fast
TINY = ModelConfig(dim=16, heads=2, context=8, grid=(8, 16, 16), pyramid=(8, 16, 16), window=4)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def ramp(h, w):
    """Horizontal ramp ``r(x, y) = x`` as a (1, 1, H, W) tensor."""
    return torch.arange(w, dtype=torch.float64).repeat(h, 1).view(1, 1, h, w)


def const_flow(h, w, dx, dy, dtype=torch.float64):
    f = torch.zeros(1, 2, h, w, dtype=dtype)
    f[:, 0], f[:, 1] = dx, dy
    return f


@pytest.fixture(scope="session")
def ladder():
    """Per-seed results and checkpoints of the ablation ladder; trains on a cold cache."""
    return run_ladder()


def fd_agreement(fn, x, coords, step=1e-3):
    """Fraction of probed coordinates whose analytic and central-difference derivatives agree to 1e-3."""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    flat = x.detach().view(-1)
    good, finite = 0, bool(torch.isfinite(grad).all())
    with torch.no_grad():
        for c in coords:
            plus, minus = flat.clone(), flat.clone()
            plus[c] += step
            minus[c] -= step
            num = (float(fn(plus.view_as(x))) - float(fn(minus.view_as(x)))) / (2 * step)
            ana = float(grad.view(-1)[c])
            finite = finite and np.isfinite(num)
            scale = max(abs(num), abs(ana))
            if scale < 1e-9 or abs(num - ana) / scale < 1e-3:
                good += 1
    return good / len(coords), finite
