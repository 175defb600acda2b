"""Image fidelity metrics on [0, 1] images."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_tensor(x):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
        # (H, W, C) arrays
        x = x.permute(2, 0, 1) if x.dim() == 3 else x.unsqueeze(0)
    x = x.double()
    return x.unsqueeze(0) if x.dim() == 3 else x


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``, capped at 99 dB (identical images)."""
    a, b = _as_tensor(a), _as_tensor(b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def batch_psnr(a: torch.Tensor, b: torch.Tensor) -> list:
    return [psnr(x, y) for x, y in zip(a, b)]


def _gaussian_window(dtype):
    r = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over the valid region and channels."""
    a, b = _as_tensor(a), _as_tensor(b)
    c = a.shape[1]
    win = _gaussian_window(a.dtype).repeat(c, 1, 1, 1)
    blur = lambda x: F.conv2d(x, win, groups=c)
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())
