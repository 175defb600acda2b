"""Base flow estimation and consistent bilateral motion refinement.

A small three-level coarse-to-fine estimator stands in for a pretrained flow
network. The consistent-motion component refines the bilateral approximation
at the two finest pyramid levels, producing both directions in one pass.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, NotFound
from .flow import approximate_bilateral, backward_warp, read_flo, resize_flow, upsample_flow


def conv(cin, cout, stride=1, bias=True):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=bias), nn.PReLU(cout))


def correlation_volume(a: torch.Tensor, b: torch.Tensor, radius: int) -> torch.Tensor:
    """Cosine matching cost between ``a(x, y)`` and ``b(x+u, y+v)``.

    Output has ``(2r+1)**2`` channels ordered with ``v`` (rows) outer and
    ``u`` (columns) inner. Displacements reaching outside the image cost 0.
    """
    if a.shape != b.shape:
        raise InvalidArgument(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if radius < 1:
        raise InvalidArgument("radius must be >= 1")
    h, w = a.shape[2:]
    if radius >= min(h, w):
        raise InvalidArgument(f"radius {radius} too large for a {h}x{w} map")
    a = F.normalize(a, dim=1, eps=1e-6)
    b = F.pad(F.normalize(b, dim=1, eps=1e-6), (radius,) * 4)
    costs = []
    for v in range(2 * radius + 1):
        for u in range(2 * radius + 1):
            costs.append((a * b[:, :, v:v + h, u:u + w]).sum(1))
    return torch.stack(costs, dim=1)


def displacement_offsets(radius: int, dtype=torch.float32) -> torch.Tensor:
    """``(1, 2, (2r+1)**2, 1, 1)`` displacement ``(u, v)`` per cost channel."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    v, u = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([u.flatten(), v.flatten()]).view(1, 2, -1, 1, 1)


class FeaturePyramid(nn.Module):
    """Shared encoder producing features at full, half and quarter resolution."""

    def __init__(self, channels=(16, 32, 32)):
        super().__init__()
        c1, c2, c4 = channels
        self.channels = tuple(channels)
        self.level1 = nn.Sequential(conv(3, c1), conv(c1, c1))
        self.level2 = nn.Sequential(conv(c1, c2, 2), conv(c2, c2))
        self.level4 = nn.Sequential(conv(c2, c4, 2), conv(c4, c4))

    def forward(self, image):
        """Return features ordered coarsest to finest: ``[x1/4, x1/2, x1]``."""
        f1 = self.level1(image)
        f2 = self.level2(f1)
        f4 = self.level4(f2)
        return [f4, f2, f1]


class FlowDecoder(nn.Module):
    """One pyramid level: warp, correlate, and predict a flow update.

    The update is a soft-argmax over the cost volume plus a learned correction
    whose last layer starts at zero.
    """

    def __init__(self, feat_ch, radius=3, hidden=32):
        super().__init__()
        self.radius = radius
        n = (2 * radius + 1) ** 2
        self.log_temperature = nn.Parameter(torch.tensor(math.log(20.0)))
        self.net = nn.Sequential(conv(n + feat_ch + 2, hidden), conv(hidden, hidden), nn.Conv2d(hidden, 2, 3, 1, 1))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, f0, f1, flow):
        cost = correlation_volume(f0, backward_warp(f1, flow), self.radius)
        prob = torch.softmax(cost * self.log_temperature.exp(), dim=1).unsqueeze(1)
        disp = (prob * displacement_offsets(self.radius, cost.dtype).to(cost.device)).sum(2)
        return flow + disp + self.net(torch.cat([cost, f0, flow], 1))


class BaseFlowEstimator(nn.Module):
    """Coarse-to-fine estimator of ``O_0->1`` from two feature pyramids."""

    def __init__(self, channels=(16, 32, 32), radius=3):
        super().__init__()
        c1, c2, c4 = channels
        self.decoders = nn.ModuleList([FlowDecoder(c4, radius), FlowDecoder(c2, radius), FlowDecoder(c1, radius)])

    def forward(self, pyr0, pyr1):
        flow = None
        for dec, f0, f1 in zip(self.decoders, pyr0, pyr1):
            if flow is None:
                flow = f0.new_zeros(f0.shape[0], 2, *f0.shape[2:])
            else:
                flow = upsample_flow(flow)
            flow = dec(f0, f1, flow)
        return flow


class ResidualTrunk(nn.Module):
    """Five stacked 3x3 conv blocks predicting a 2-channel residual flow.

    Without biases the trunk maps an all-zero input to an all-zero residual.
    """

    def __init__(self, cin, hidden=32, bias=True):
        super().__init__()
        self.body = nn.Sequential(
            conv(cin, hidden, bias=bias), conv(hidden, hidden, bias=bias), conv(hidden, hidden, bias=bias),
            conv(hidden, hidden, bias=bias), nn.Conv2d(hidden, 2, 3, 1, 1, bias=bias),
        )
        nn.init.zeros_(self.body[-1].weight)
        if bias:
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return self.body(x)


class ConsistentMotion(nn.Module):
    """Jointly refine the bilateral flow pair at the x2 and x1 pyramid levels.

    One trunk per level is shared by both directions, so swapping the inputs
    swaps the outputs. The trunks see only differences between the two warped
    feature maps (and the current flow) and carry no biases, so identical
    frames at t=0.5, where the bilateral approximation is exactly zero, get
    an exactly zero refinement.
    """

    def __init__(self, channels=(16, 32, 32), radius=3, hidden=32):
        super().__init__()
        self.radius = radius
        n = (2 * radius + 1) ** 2
        c1, c2, _ = channels
        self.trunks = nn.ModuleList([ResidualTrunk(n + c2 + 2, hidden, bias=False),
                                     ResidualTrunk(n + c1 + 2, hidden, bias=False)])
        self.zero_residual = False

    def refine_level(self, prev_t0, prev_t1, f0, f1, level_index: int = 1):
        """Upsample both flows, warp features to time t, correlate, add residuals."""
        up_t0 = upsample_flow(prev_t0)
        up_t1 = upsample_flow(prev_t1)
        if up_t0.shape[2:] != f0.shape[2:] or up_t1.shape[2:] != f1.shape[2:]:
            raise InvalidArgument(
                f"flows at {tuple(prev_t0.shape[2:])} do not precede features at {tuple(f0.shape[2:])}"
            )
        if self.zero_residual:
            return up_t0, up_t1
        w0 = backward_warp(f0, up_t0)
        w1 = backward_warp(f1, up_t1)
        trunk = self.trunks[level_index]
        r = self.radius
        res_t0 = trunk(torch.cat([correlation_volume(w0, w1, r) - correlation_volume(w0, w0, r), w0 - w1, up_t0], 1))
        res_t1 = trunk(torch.cat([correlation_volume(w1, w0, r) - correlation_volume(w1, w1, r), w1 - w0, up_t1], 1))
        return up_t0 + res_t0, up_t1 + res_t1

    def forward(self, o01, o10, t, pyr0, pyr1):
        f0_4 = pyr0[0]
        quarter = f0_4.shape[2:]
        a_t0, a_t1 = approximate_bilateral(resize_flow(o01, quarter), resize_flow(o10, quarter), t)
        for i, level in enumerate((1, 2)):
            a_t0, a_t1 = self.refine_level(a_t0, a_t1, pyr0[level], pyr1[level], i)
        return a_t0, a_t1


def check_frames(i0: torch.Tensor, i1: torch.Tensor) -> None:
    if i0.shape != i1.shape:
        raise InvalidArgument(f"frame shapes differ: {tuple(i0.shape)} vs {tuple(i1.shape)}")
    if i0.dim() != 4:
        raise InvalidArgument("frames must be (B, C, H, W)")
    h, w = i0.shape[2:]
    if h % 4 or w % 4:
        raise InvalidArgument(f"frame dimensions {h}x{w} must be divisible by 4")


def sidecar_paths(frame0_path) -> tuple[Path, Path]:
    """``<stem>.fwd.flo`` holds O_0->1 and ``<stem>.bwd.flo`` holds O_1->0, next to frame 0."""
    p = Path(frame0_path)
    return p.with_name(p.stem + ".fwd.flo"), p.with_name(p.stem + ".bwd.flo")


def load_sidecar_flows(frame0_path):
    fwd, bwd = sidecar_paths(frame0_path)
    for path in (fwd, bwd):
        if not path.is_file():
            raise NotFound(f"missing sidecar flow file: {path}")
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).unsqueeze(0)
    return to_t(read_flo(fwd)), to_t(read_flo(bwd))


def estimate_base_flow(i0, i1, estimator=None, pyramid=None, sidecar=None):
    """Return ``(O_0->1, O_1->0)``.

    ``sidecar`` is either a pair of flow tensors or the path of frame 0 whose
    ``.fwd.flo`` / ``.bwd.flo`` sidecars are loaded verbatim. Otherwise the
    built-in estimator runs on both orderings of the frames.
    """
    check_frames(i0, i1)
    if sidecar is not None:
        if isinstance(sidecar, (str, Path)):
            o01, o10 = load_sidecar_flows(sidecar)
        else:
            o01, o10 = sidecar
        if o01.shape[2:] != i0.shape[2:] or o10.shape[2:] != i0.shape[2:]:
            raise InvalidArgument("sidecar flow size does not match the frames")
        return o01.to(i0), o10.to(i0)
    if estimator is None or pyramid is None:
        raise InvalidArgument("estimator mode needs both an estimator and a feature pyramid")
    pyr0, pyr1 = pyramid(i0), pyramid(i1)
    return estimator(pyr0, pyr1), estimator(pyr1, pyr0)
