"""Token generation: context features, candidates, blending filters, embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument
from .flow import backward_warp, trajectory_index

NUM_CANDIDATES = 6
KERNEL_TAPS = 9
FILTER_CHANNELS = NUM_CANDIDATES * KERNEL_TAPS


class ContextExtractor(nn.Module):
    """Two 3x3 conv layers applied to each frame with shared weights."""

    def __init__(self, channels=32):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, 1, 1), nn.PReLU(channels),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.PReLU(channels),
        )

    def forward(self, frame):
        return self.net(frame)


@dataclass
class CandidateSet:
    """Six aligned candidate features and frames.

    Index 0-3 are flow-warped (approximate t->0, approximate t->1,
    consistent t->0, consistent t->1); 4-5 are trajectory-extracted
    (t->0, t->1).
    """

    features: list
    frames: list


def build_candidates(i0, i1, approx, consistent, traj_t0, traj_t1, c0, c1) -> CandidateSet:
    o_t0, o_t1 = approx
    q_t0, q_t1 = consistent
    src0 = torch.cat([c0, i0], 1)
    src1 = torch.cat([c1, i1], 1)
    stacked = [
        backward_warp(src0, o_t0),
        backward_warp(src1, o_t1),
        backward_warp(src0, q_t0),
        backward_warp(src1, q_t1),
        trajectory_index(traj_t0, src0),
        trajectory_index(traj_t1, src1),
    ]
    nc = c0.shape[1]
    return CandidateSet([s[:, :nc] for s in stacked], [s[:, nc:] for s in stacked])


class _Lateral(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(nn.PReLU(cin), nn.Conv2d(cin, cout, 3, 1, 1), nn.PReLU(cout), nn.Conv2d(cout, cout, 3, 1, 1))
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 3, 1, 1)

    def forward(self, x):
        return self.skip(x) + self.body(x)


class _Down(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.PReLU(cin), nn.Conv2d(cin, cout, 3, 2, 1), nn.PReLU(cout), nn.Conv2d(cout, cout, 3, 1, 1))


class _Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(nn.PReLU(cin), nn.Conv2d(cin, cout, 3, 1, 1), nn.PReLU(cout), nn.Conv2d(cout, cout, 3, 1, 1))

    def forward(self, x, size):
        return self.body(F.interpolate(x, size=size, mode="bilinear", align_corners=False))


class GridNet(nn.Module):
    """Grid encoder: rows at x1/x2/x4, first half of the columns downsample, second half upsample."""

    def __init__(self, cin, cout, channels=(32, 64, 96), columns=4):
        super().__init__()
        if columns < 2 or columns % 2:
            raise InvalidArgument("columns must be an even number >= 2")
        self.rows = len(channels)
        self.columns = columns
        half = columns // 2
        ch = channels
        self.stem = _Lateral(cin, ch[0])
        self.lateral = nn.ModuleList(
            nn.ModuleList(_Lateral(ch[r], ch[r]) for _ in range(columns - 1)) for r in range(self.rows)
        )
        self.down = nn.ModuleList(nn.ModuleList(_Down(ch[r - 1], ch[r]) for _ in range(half)) for r in range(1, self.rows))
        self.up = nn.ModuleList(nn.ModuleList(_Up(ch[r + 1], ch[r]) for _ in range(half)) for r in range(self.rows - 1))
        self.head = _Lateral(ch[0], cout)

    def forward(self, x):
        half = self.columns // 2
        state = [None] * self.rows
        for c in range(self.columns):
            new = [None] * self.rows
            rows = range(self.rows) if c < half else reversed(range(self.rows))
            for r in rows:
                if c == 0:
                    y = self.stem(x) if r == 0 else 0
                else:
                    y = self.lateral[r][c - 1](state[r])
                if c < half and r > 0:
                    y = y + self.down[r - 1][c](new[r - 1])
                if c >= half and r < self.rows - 1:
                    y = y + self.up[r][c - half](new[r + 1], state[r].shape[2:])
                new[r] = y
            state = new
        return self.head(state[0])


class FilterSynthesizer(nn.Module):
    """Predict per-pixel 3x3x6 blending filters from the candidate set."""

    def __init__(self, feat_ch, channels=(32, 64, 96), columns=4):
        super().__init__()
        cin = NUM_CANDIDATES * (feat_ch + 3)
        self.grid = GridNet(cin, FILTER_CHANNELS, channels, columns)
        # start with mass concentrated on the centre tap of every candidate
        head = self.grid.head.body[-1]
        nn.init.zeros_(head.weight)
        with torch.no_grad():
            head.bias.zero_()
            head.bias[4::KERNEL_TAPS] = 2.0
        nn.init.zeros_(self.grid.head.skip.weight)
        nn.init.zeros_(self.grid.head.skip.bias)

    def logits(self, candidates: CandidateSet):
        return self.grid(torch.cat(candidates.features + candidates.frames, 1))

    def forward(self, candidates: CandidateSet):
        return normalize_filters(self.logits(candidates))


def synthesize_filters(synthesizer: FilterSynthesizer, candidates: CandidateSet):
    return synthesizer(candidates)


def normalize_filters(logits):
    """Softmax over all 54 taps; channel ``9k + 3(j+1) + (i+1)`` weighs candidate k at offset (x+i, y+j)."""
    return torch.softmax(logits, dim=1)


def dynamic_local_conv(filters, maps, tol: float = 1e-3):
    """Blend the six maps with per-pixel 3x3 filters; borders use clamp-to-edge neighbourhoods."""
    if len(maps) != NUM_CANDIDATES:
        raise InvalidArgument(f"expected {NUM_CANDIDATES} maps, got {len(maps)}")
    b, k9, h, w = filters.shape
    if k9 != FILTER_CHANNELS:
        raise InvalidArgument(f"filters must have {FILTER_CHANNELS} channels, got {k9}")
    with torch.no_grad():
        dev = (filters.sum(1) - 1).abs().max().item()
    if dev > tol:
        raise InvalidArgument(f"filters are not normalized (max deviation {dev:.3g})")
    out = 0
    for k, m in enumerate(maps):
        c = m.shape[1]
        patches = F.unfold(F.pad(m, (1, 1, 1, 1), mode="replicate"), 3).view(b, c, KERNEL_TAPS, h, w)
        weights = filters[:, k * KERNEL_TAPS:(k + 1) * KERNEL_TAPS].unsqueeze(1)
        out = out + (patches * weights).sum(2)
    return out


@dataclass
class TokenMaps:
    """Queries plus consistent (4) and boundary (2) token maps; keys are values."""

    query: torch.Tensor
    consistent: torch.Tensor
    boundary: torch.Tensor

    @property
    def keys_c(self):
        return self.consistent

    @property
    def values_c(self):
        return self.consistent

    @property
    def keys_b(self):
        return self.boundary

    @property
    def values_b(self):
        return self.boundary

    @property
    def dim(self):
        return self.query.shape[1]


class TokenEmbedder(nn.Module):
    """Three single-conv embedders: queries, consistent tokens, boundary tokens."""

    def __init__(self, feat_ch, dim=64):
        super().__init__()
        cin = feat_ch + 3
        self.dim = dim
        self.query = nn.Conv2d(cin, dim, 3, 1, 1)
        self.consistent = nn.Conv2d(cin, dim, 3, 1, 1)
        self.boundary = nn.Conv2d(cin, dim, 3, 1, 1)

    def embed_group(self, layer, features, frames):
        x = torch.stack([torch.cat([c, i], 1) for c, i in zip(features, frames)], 1)
        b, k = x.shape[:2]
        y = layer(x.flatten(0, 1))
        return y.view(b, k, *y.shape[1:])

    def embed_query(self, c_q, i_q):
        return self.query(torch.cat([c_q, i_q], 1))

    def forward(self, c_q, i_q, candidates: CandidateSet) -> TokenMaps:
        f, im = candidates.features, candidates.frames
        return TokenMaps(
            self.embed_query(c_q, i_q),
            self.embed_group(self.consistent, f[:4], im[:4]),
            self.embed_group(self.boundary, f[4:], im[4:]),
        )
