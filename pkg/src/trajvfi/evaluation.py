"""Evaluation over a manifest, built-in baselines, and diagnostic image export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps

from .data import open_dataset, save_image, to_image, to_tensor
from .errors import InvalidData
from .metrics import psnr, ssim
from .model import Interpolator

METHODS = ("model", "average", "nearest")
DIAGNOSTIC_FILES = (
    "flow_t0.png", "flow_t1.png", "inconsistency.png",
    "candidate_1.png", "candidate_2.png", "candidate_3.png",
    "candidate_4.png", "candidate_5.png", "candidate_6.png",
    "i_q.png", "i_t.png",
)
HEAT_COLORMAP = "inferno"


def frame_average(i0, i1, t=0.5):
    return 0.5 * (i0 + i1)


def nearest_input(i0, i1, t=0.5):
    return i0 if t <= 0.5 else i1


@dataclass
class EvalReport:
    rows: list
    fingerprint: str
    aggregate: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.rows)

    def compute_aggregate(self):
        self.aggregate = {}
        for m in METHODS:
            for metric in ("psnr", "ssim"):
                vals = np.array([r[f"{m}_{metric}"] for r in self.rows], dtype=np.float64)
                self.aggregate[f"{m}_{metric}"] = float(vals.mean()) if len(vals) else float("nan")
        return self.aggregate

    def write(self, csv_path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        columns = ["id"] + [f"{m}_{k}" for m in METHODS for k in ("psnr", "ssim")]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: r[k] for k in columns})
        summary = csv_path.with_suffix(".json")
        summary.write_text(json.dumps(
            {"count": self.count, "fingerprint": self.fingerprint, "aggregate": self.aggregate}, indent=1
        ))
        return csv_path, summary


def evaluate(model: Interpolator, manifest_path, report_path=None) -> EvalReport:
    """Score the model and both baselines on every sample of a manifest."""
    dataset = open_dataset(manifest_path)
    pinned = dataset.manifest.fingerprint
    fp = model.config.fingerprint()
    if pinned and pinned != fp:
        raise InvalidData(f"manifest pins model fingerprint {pinned}, checkpoint has {fp}")
    model.eval()
    rows = []
    with torch.no_grad():
        for i in range(len(dataset)):
            s = dataset[i]
            i0, i1 = to_tensor(s.i0), to_tensor(s.i1)
            out = to_image(model(i0, i1, s.t))
            row = {"id": s.sample_id or dataset.manifest.ids[i]}
            for name, pred in (("model", out), ("average", frame_average(s.i0, s.i1, s.t)),
                               ("nearest", nearest_input(s.i0, s.i1, s.t))):
                row[f"{name}_psnr"] = psnr(pred, s.it)
                row[f"{name}_ssim"] = ssim(pred, s.it)
            rows.append(row)
    report = EvalReport(rows, fp)
    report.compute_aggregate()
    if report_path is not None:
        report.write(report_path)
    return report


def _colorwheel():
    """Middlebury flow colour wheel, 55 hues."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


COLORWHEEL = _colorwheel()


def flow_to_color(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """``(H, W, 2)`` flow -> ``(H, W, 3)`` uint8 image; hue is direction, saturation is magnitude."""
    u, v = flow[..., 0].astype(np.float64), flow[..., 1].astype(np.float64)
    rad = np.hypot(u, v)
    scale = max_norm if max_norm is not None else rad.max()
    if scale > 0:
        u, v, rad = u / scale, v / scale, rad / scale
    ncols = COLORWHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(flow.shape[:2] + (3,), np.uint8)
    for c in range(3):
        col = (1 - f) * COLORWHEEL[k0, c] / 255.0 + f * COLORWHEEL[k1, c] / 255.0
        inside = rad <= 1
        col[inside] = 1 - rad[inside] * (1 - col[inside])
        col[~inside] *= 0.75
        img[..., c] = np.floor(255 * col)
    return img


def heat_image(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB floats with a perceptual colormap."""
    return colormaps[HEAT_COLORMAP](np.clip(values, 0, 1))[..., :3].astype(np.float32)


def export_diagnostics(i0, i1, t, model: Interpolator, outdir, flows=None) -> list:
    """Write the 11 diagnostic images listed in ``DIAGNOSTIC_FILES`` and return their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if isinstance(i0, np.ndarray):
        i0, i1 = to_tensor(i0), to_tensor(i1)
    model.eval()
    with torch.no_grad():
        out, aux = model(i0, i1, t, flows=flows, return_aux=True)
    q_t0, q_t1 = (f[0].permute(1, 2, 0).numpy() for f in aux["consistent"])
    images = [flow_to_color(q_t0).astype(np.float32) / 255.0, flow_to_color(q_t1).astype(np.float32) / 255.0,
              heat_image(aux["p"][0, 0].numpy())]
    images += [to_image(f) for f in aux["candidates"].frames]
    images += [to_image(aux["i_q"]), to_image(out)]
    paths = []
    for name, img in zip(DIAGNOSTIC_FILES, images):
        save_image(outdir / name, img)
        paths.append(outdir / name)
    return paths
