"""Closed-form flow operations.

Conventions used throughout the package:

* images and feature maps are ``(B, C, H, W)`` tensors;
* flows are ``(B, 2, H, W)`` tensors in pixels, channel 0 is the horizontal
  displacement ``dx`` (along W), channel 1 the vertical ``dy`` (along H);
* trajectory endpoints are ``(B, 2, H, W)`` int64 tensors holding ``(x, y)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument, InvalidData, NotFound

FLO_MAGIC = b"PIEH"
TIME_LABELS = ("0", "t", "1")
LEVELS = (1, 2, 4)


def _check_flow(flow: torch.Tensor, name: str = "flow") -> None:
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise InvalidArgument(f"{name} must have shape (B, 2, H, W), got {tuple(flow.shape)}")


def meshgrid(height: int, width: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """``(1, 2, H, W)`` grid with ``M[:, 0] = x`` (column) and ``M[:, 1] = y`` (row)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, device=device, dtype=dtype),
        torch.arange(width, device=device, dtype=dtype),
        indexing="ij",
    )
    return torch.stack([xs, ys]).unsqueeze(0)


def approximate_bilateral(o01: torch.Tensor, o10: torch.Tensor, t: float, *, _allow_boundary: bool = False):
    """Bilateral flows from the intermediate time to both inputs.

    Returns ``(o_t0, o_t1)`` with
    ``o_t0 = -t(1-t) o01 + t^2 o10`` and ``o_t1 = (1-t)^2 o01 - t(1-t) o10``.
    """
    _check_flow(o01, "o01")
    _check_flow(o10, "o10")
    if o01.shape != o10.shape:
        raise InvalidArgument(f"flow shapes differ: {tuple(o01.shape)} vs {tuple(o10.shape)}")
    t = float(t)
    lo_ok = t >= 0.0 if _allow_boundary else t > 0.0
    hi_ok = t <= 1.0 if _allow_boundary else t < 1.0
    if not (lo_ok and hi_ok):
        raise InvalidArgument(f"t must lie in (0, 1), got {t}")
    o_t0 = -t * (1.0 - t) * o01 + t * t * o10
    o_t1 = (1.0 - t) ** 2 * o01 - t * (1.0 - t) * o10
    return o_t0, o_t1


def backward_warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``source`` at ``(x + dx, y + dy)`` with clamp-to-edge borders.

    Sampling is done in pixel coordinates, so zero and integer flows reproduce
    source values exactly. Differentiable in both arguments.
    """
    _check_flow(flow)
    b, c, h, w = source.shape
    if flow.shape[0] != b or flow.shape[2:] != source.shape[2:]:
        raise InvalidArgument(
            f"flow {tuple(flow.shape)} does not match source {tuple(source.shape)}"
        )
    if not torch.isfinite(flow).all():
        raise InvalidArgument("flow contains non-finite values")

    grid = meshgrid(h, w, device=flow.device, dtype=flow.dtype)
    x = (grid[:, 0] + flow[:, 0]).clamp(0, w - 1)
    y = (grid[:, 1] + flow[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = source.reshape(b, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def round_half_away(values: torch.Tensor) -> torch.Tensor:
    return torch.sign(values) * torch.floor(values.abs() + 0.5)


def build_trajectories(flow: torch.Tensor) -> torch.Tensor:
    """Integer trajectory endpoints ``clamp(round(M + flow))``.

    Rounding is half-away-from-zero; endpoints are clamped to the image.
    Start points are implicit (the pixel grid itself).
    """
    _check_flow(flow)
    if not torch.isfinite(flow).all():
        raise InvalidArgument("flow contains non-finite values")
    _, _, h, w = flow.shape
    with torch.no_grad():
        end = round_half_away(meshgrid(h, w, flow.device, flow.dtype) + flow)
        ex = end[:, 0].clamp(0, w - 1)
        ey = end[:, 1].clamp(0, h - 1)
    return torch.stack([ex, ey], dim=1).long()


def trajectory_index(trajectories: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    """Gather ``source`` at trajectory endpoints (no interpolation)."""
    b, c, h, w = source.shape
    if trajectories.shape != (b, 2, h, w):
        raise InvalidArgument(
            f"trajectories {tuple(trajectories.shape)} do not match source {tuple(source.shape)}"
        )
    idx = trajectories[:, 1] * w + trajectories[:, 0]
    idx = idx.reshape(b, 1, h * w).expand(b, c, h * w)
    return source.reshape(b, c, h * w).gather(2, idx).reshape(b, c, h, w)


def inconsistency_map(f_t0: torch.Tensor, f_t1: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """``2 * sigmoid(tau * |f_t0 + f_t1|) - 1`` per pixel, shape ``(B, 1, H, W)``.

    Values are clamped just below 1 so the map stays in ``[0, 1)`` even when
    the sigmoid saturates in floating point.
    """
    if temperature <= 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    _check_flow(f_t0, "f_t0")
    _check_flow(f_t1, "f_t1")
    if f_t0.shape != f_t1.shape:
        raise InvalidArgument("flow shapes differ")
    magnitude = torch.linalg.vector_norm(f_t0 + f_t1, dim=1, keepdim=True)
    # 2*sigmoid(z) - 1 == tanh(z / 2), with better precision near 0
    value = torch.tanh(0.5 * temperature * magnitude)
    return value.clamp(max=1.0 - torch.finfo(value.dtype).eps)


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample a flow to ``size = (H, W)``, scaling vectors by the resolution ratio."""
    _check_flow(flow)
    h, w = flow.shape[2:]
    if (h, w) == tuple(size):
        return flow
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor([size[1] / w, size[0] / h], dtype=flow.dtype, device=flow.device)
    return out * scale.view(1, 2, 1, 1)


def upsample_flow(flow: torch.Tensor) -> torch.Tensor:
    """Double the resolution and the vector magnitudes."""
    h, w = flow.shape[2:]
    return resize_flow(flow, (2 * h, 2 * w))


@dataclass
class FlowField:
    """A single flow field with its time direction and scale level.

    ``data`` is an ``(H, W, 2)`` float32 array; ``level`` is the downscale
    factor relative to full resolution.
    """

    data: np.ndarray
    direction: tuple[str, str] = ("0", "1")
    level: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise InvalidArgument(f"flow data must be (H, W, 2), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvalidArgument("flow contains non-finite values")
        s, e = self.direction
        if s not in TIME_LABELS or e not in TIME_LABELS or s == e:
            raise InvalidArgument(f"invalid direction {self.direction}")
        if self.level not in LEVELS:
            raise InvalidArgument(f"level must be one of {LEVELS}")

    @property
    def shape(self):
        return self.data.shape[:2]

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.transpose(2, 0, 1).copy()).unsqueeze(0)

    @classmethod
    def from_tensor(cls, flow: torch.Tensor, direction=("0", "1"), level: int = 1) -> "FlowField":
        _check_flow(flow)
        if flow.shape[0] != 1:
            raise InvalidArgument("FlowField holds a single field; batch size must be 1")
        arr = flow[0].detach().cpu().float().numpy().transpose(1, 2, 0)
        return cls(arr, tuple(direction), level)

    def rescale(self, level: int) -> "FlowField":
        if level not in LEVELS:
            raise InvalidArgument(f"level must be one of {LEVELS}")
        h, w = self.shape
        full_h, full_w = h * self.level, w * self.level
        if full_h % level or full_w % level:
            raise InvalidArgument(f"level {level} does not divide {full_h}x{full_w}")
        out = resize_flow(self.to_tensor(), (full_h // level, full_w // level))
        return FlowField.from_tensor(out, self.direction, level)


def write_flo(path, flow) -> None:
    """Write an ``(H, W, 2)`` array (or :class:`FlowField`) as a ``PIEH`` flow file."""
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow)
    if data.ndim != 3 or data.shape[2] != 2:
        raise InvalidArgument(f"flow must be (H, W, 2), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a ``PIEH`` flow file into an ``(H, W, 2)`` float32 array."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"flow file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise InvalidData(f"{path}: bad magic, expected {FLO_MAGIC!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * w * h:
        raise InvalidData(f"{path}: header {w}x{h} does not match payload of {len(raw) - 12} bytes")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2).astype(np.float32)
