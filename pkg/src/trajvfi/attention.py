"""Region-conditioned shifted-window attention, feed-forward, and multi-scale fusion."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument


def pad_to_window(x, window):
    """Reflect-pad the last two dims up to a multiple of ``window`` (replicate if too small to reflect)."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % window, (-w) % window
    if not (ph or pw):
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def window_partition(x, window):
    """``(B, C, H, W)`` -> ``(B * nW, S*S, C)`` with windows in row-major order."""
    b, c, h, w = x.shape
    x = x.view(b, c, h // window, window, w // window, window)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)


def window_reverse(windows, window, b, h, w):
    c = windows.shape[-1]
    x = windows.view(b, h // window, w // window, window, window, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def _branch(qw, tokens, window, heads, b, h, w):
    """Scaled dot-product attention of window queries over every token map in the same window."""
    n, d = tokens.shape[1], tokens.shape[2]
    kw = window_partition(tokens.flatten(1, 2), window)  # (BW, S*S, n*d)
    bw, s2 = kw.shape[:2]
    kw = kw.view(bw, s2, n, d).permute(0, 2, 1, 3).reshape(bw, n * s2, d)
    dh = d // heads
    kw = kw.view(bw, n * s2, heads, dh).transpose(1, 2)  # (BW, heads, n*S*S, dh)
    weights = torch.softmax(qw @ kw.transpose(-1, -2), dim=-1)
    return weights @ kw, weights


def joint_window_attention(q, kc, kb, p, heads, window, shift=0, return_weights=False):
    """Blend of consistent-token and boundary-token attention inside (shifted) windows.

    q: ``(B, d, H, W)`` queries; kc: ``(B, 4, d, H, W)`` consistent tokens;
    kb: ``(B, 2, d, H, W)`` boundary tokens (keys double as values);
    p: ``(B, 1, H, W)`` inconsistency map. Each query attends over all token
    positions of its window; the branch outputs are mixed as
    ``(1 - p) * consistent + p * boundary``. Shifted layers roll the plane by
    ``shift`` (cyclic) before partitioning.
    """
    b, d, h, w = q.shape
    if d % heads:
        raise InvalidArgument(f"embedding dim {d} is not divisible by {heads} heads")
    if kc.shape[2:] != (d, h, w) or kb.shape[2:] != (d, h, w) or p.shape != (b, 1, h, w):
        raise InvalidArgument("queries, tokens and inconsistency map must share one scale")
    nc, nb = kc.shape[1], kb.shape[1]

    def prep(x):
        x = pad_to_window(x, window)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(-2, -1))
        return x

    qp = prep(q)
    hp, wp = qp.shape[-2:]
    kcp = prep(kc.flatten(1, 2)).view(b, nc, d, hp, wp)
    kbp = prep(kb.flatten(1, 2)).view(b, nb, d, hp, wp)
    pp = prep(p)

    dh = d // heads
    qw = window_partition(qp, window)
    bw, s2 = qw.shape[:2]
    qw = qw.view(bw, s2, heads, dh).transpose(1, 2) * dh ** -0.5
    out_c, w_c = _branch(qw, kcp, window, heads, b, hp, wp)
    out_b, w_b = _branch(qw, kbp, window, heads, b, hp, wp)
    pw = window_partition(pp, window).unsqueeze(1)  # (BW, 1, S*S, 1)
    out = (1 - pw) * out_c + pw * out_b
    out = out.transpose(1, 2).reshape(bw, s2, d)
    out = window_reverse(out, window, b, hp, wp)
    if shift:
        out = torch.roll(out, shifts=(shift, shift), dims=(-2, -1))
    out = out[:, :, :h, :w]
    if return_weights:
        return out, (w_c, w_b)
    return out


class FeedForward(nn.Module):
    """Residual 3x3 conv + PReLU applied at every position."""

    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, 1, 1)
        self.act = nn.PReLU(dim)

    def forward(self, x):
        return x + self.act(self.conv(x))


class TrajectoryAttentionLayer(nn.Module):
    """``FFN(attention(q, tokens) + q)``."""

    def __init__(self, dim, heads=4, window=8, shift=0):
        super().__init__()
        if dim % heads:
            raise InvalidArgument(f"embedding dim {dim} is not divisible by {heads} heads")
        self.heads, self.window, self.shift = heads, window, shift
        self.ffn = FeedForward(dim)

    def forward(self, q, kc, kb, p):
        a = joint_window_attention(q, kc, kb, p, self.heads, self.window, self.shift)
        return self.ffn(a + q)


class ScaleTransformer(nn.Module):
    """N attention layers at one scale; odd layers use half-window shifts."""

    def __init__(self, dim, heads=4, window=8, layers=2):
        super().__init__()
        if layers < 1:
            raise InvalidArgument("layers must be >= 1")
        self.layers = nn.ModuleList(
            TrajectoryAttentionLayer(dim, heads, window, shift=(window // 2) * (i % 2)) for i in range(layers)
        )

    def forward(self, q, kc, kb, p):
        for layer in self.layers:
            q = layer(q, kc, kb, p)
        return q


class MultiScaleFusion(nn.Module):
    """Bring every scale's feature to x1, align channels, sum, and predict a 3-channel residual."""

    def __init__(self, dim, scales=(1, 2, 4)):
        super().__init__()
        if 1 not in scales:
            raise InvalidArgument("the x1 scale is required")
        self.scales = tuple(sorted(scales))
        self.align = nn.ModuleDict({str(s): nn.Conv2d(dim, dim, 1, bias=False) for s in self.scales if s != 1})
        self.trunk = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1), nn.PReLU(dim),
            nn.Conv2d(dim, dim, 3, 1, 1), nn.PReLU(dim),
            nn.Conv2d(dim, 3, 3, 1, 1),
        )
        nn.init.zeros_(self.trunk[-1].weight)
        nn.init.zeros_(self.trunk[-1].bias)

    def aggregate(self, features):
        missing = [s for s in self.scales if s not in features]
        if missing:
            raise InvalidArgument(f"missing features for scales {missing}")
        base = features[1]
        agg = base
        for s in self.scales:
            if s == 1:
                continue
            up = F.interpolate(features[s], size=base.shape[2:], mode="bilinear", align_corners=False)
            agg = agg + self.align[str(s)](up)
        return agg

    def forward(self, features):
        return self.trunk(self.aggregate(features))
