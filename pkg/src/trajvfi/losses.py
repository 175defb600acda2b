"""Photometric and reconstruction losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .flow import backward_warp

EPSILON = 1e-6
CENSUS_PATCH = 7
CENSUS_SOFTSIGN = 0.0081
CENSUS_HAMMING = 0.1
LUMA = (0.299, 0.587, 0.114)


def charbonnier(residual: torch.Tensor, eps: float = EPSILON) -> torch.Tensor:
    """Mean of ``sqrt(x**2 + eps**2)``.

    The floor ``eps`` is taken out before averaging and added back, so a zero
    residual of any size gives exactly ``eps`` in float64.
    """
    return (torch.sqrt(residual * residual + eps * eps) - eps).mean() + eps


def grayscale(img: torch.Tensor) -> torch.Tensor:
    if img.shape[1] == 1:
        return img
    w = torch.tensor(LUMA, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * w).sum(1, keepdim=True)


def census_transform(img: torch.Tensor, patch: int = CENSUS_PATCH) -> torch.Tensor:
    """Soft signed differences between each neighbour and the centre, valid region only.

    Returns ``(B, patch**2 - 1, H - patch + 1, W - patch + 1)``.
    """
    gray = grayscale(img)
    b, _, h, w = gray.shape
    ho, wo = h - patch + 1, w - patch + 1
    patches = F.unfold(gray, patch).view(b, patch * patch, ho, wo)
    centre = (patch * patch) // 2
    diff = patches - patches[:, centre:centre + 1]
    diff = torch.cat([diff[:, :centre], diff[:, centre + 1:]], 1)
    return diff / torch.sqrt(CENSUS_SOFTSIGN + diff * diff)


def census_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean soft Hamming distance between 7x7 census descriptors (3-pixel border excluded)."""
    q = census_transform(a) - census_transform(b)
    q2 = q * q
    return (q2 / (CENSUS_HAMMING + q2)).sum(1).mean()


@dataclass
class LossReport:
    l_con: torch.Tensor
    l_cen: torch.Tensor
    l_rec: torch.Tensor | None = None
    terms: int = 4

    @property
    def l_pho(self):
        return self.l_con + self.l_cen

    def as_floats(self):
        out = {"l_con": float(self.l_con), "l_cen": float(self.l_cen), "l_pho": float(self.l_pho)}
        out["l_rec"] = float(self.l_rec) if self.l_rec is not None else float("nan")
        return out


def consistency_losses(i0, i1, it_gt, consistent, base, t, *, return_terms=False):
    """``(l_con, l_cen)`` over the four warp pairings.

    ``consistent`` is ``(O~_t->0, O~_t->1)``; ``base`` is ``(O_0->1, O_1->0)``.
    """
    q_t0, q_t1 = consistent
    o01, o10 = base
    w0t = backward_warp(i0, q_t0)
    w1t = backward_warp(i1, q_t1)
    o1t = (1.0 - t) * o10
    o0t = t * o01
    pairs = [
        (it_gt, w0t),
        (it_gt, w1t),
        (i1, backward_warp(w0t, o1t)),
        (i0, backward_warp(w1t, o0t)),
    ]
    con_terms = [charbonnier(a - b) for a, b in pairs]
    cen_terms = [census_loss(a, b) for a, b in pairs]
    l_con = sum(con_terms)
    l_cen = sum(cen_terms)
    if return_terms:
        return l_con, l_cen, con_terms, cen_terms
    return l_con, l_cen


def reconstruction_loss(it, it_gt) -> torch.Tensor:
    return charbonnier(it_gt - it)
