"""Desk-scale learning experiments: the ablation ladder and the motion-consistency probe.

Runs are cached on disk under a key that hashes the experiment settings and
the package code, so a repeated call with unchanged code reads the stored
numbers instead of retraining. Any code edit invalidates the cache; edits to
comments and docstrings do not.
"""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .config import ScheduleConfig
from .data import SyntheticTriplets, make_split, to_tensor
from .evaluation import frame_average
from .flow import inconsistency_map
from .metrics import psnr
from .model import Interpolator, ModelConfig, load_checkpoint
from .training import run_stage

log = logging.getLogger(__name__)

# model variants of the ablation ladder, by ablation switches
VARIANTS = {
    "base": dict(use_cml=False, use_tac=False, use_tab=False),
    "base_cml": dict(use_cml=True, use_tac=False, use_tab=False),
    "full": dict(use_cml=True, use_tac=True, use_tab=True),
}

# smaller channel widths than the defaults so the ladder fits a CPU budget
DESK_MODEL = ModelConfig(dim=32, context=16, grid=(16, 32, 48))


@dataclass
class LadderSettings:
    n_train: int = 500
    n_val: int = 100
    difficulty: str = "medium"
    seeds: tuple = (0, 1, 2)
    epochs_stage1: int = 4
    epochs_stage2: int = 3
    lr_motion: float = 1e-3
    lr_rest: float = 2e-3
    batch: int = 4
    model: dict = field(default_factory=DESK_MODEL.to_dict)

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True) + source_digest()
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# modules the ladder never runs
_UNHASHED = {"__init__.py", "cli.py"}


def _code_only(source: str) -> str:
    """Syntax tree of ``source`` without docstrings; comments and layout never reach the tree."""
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_digest() -> str:
    """Hash of the code the ladder runs, so cached results follow the code but not its documentation."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.name in _UNHASHED:
            continue
        h.update(path.name.encode())
        h.update(_code_only(path.read_text()).encode())
    return h.hexdigest()


def cache_root() -> Path:
    return Path(os.environ.get("TRAJVFI_CACHE", Path.home() / ".cache" / "trajvfi"))


def _datasets(settings: LadderSettings, seed: int):
    total = settings.n_train + settings.n_val
    train, val = make_split(total, seed, settings.difficulty, settings.n_val / total)
    return SyntheticTriplets(train), SyntheticTriplets(val)


def baseline_psnr(dataset) -> float:
    return float(np.mean([psnr(frame_average(s.i0, s.i1), s.it) for s in (dataset[i] for i in range(len(dataset)))]))


def run_ladder(settings: LadderSettings | None = None, workdir=None, force: bool = False) -> dict:
    """Train stage one once per seed, then stage two for each variant; return per-seed PSNRs.

    All variants start stage two from the same stage-one motion checkpoint
    (trained with consistent motion on), so they differ only in the switches.
    """
    settings = settings or LadderSettings()
    workdir = Path(workdir) if workdir else cache_root() / f"ladder-{settings.key()}"
    summary_path = workdir / "summary.json"
    if summary_path.exists() and not force:
        return json.loads(summary_path.read_text())

    sched = ScheduleConfig(lr_motion=settings.lr_motion, lr_rest=settings.lr_rest, batch=settings.batch,
                           epochs_stage1=settings.epochs_stage1, epochs_stage2=settings.epochs_stage2)
    base_cfg = ModelConfig.from_dict(settings.model)
    results = {"settings": asdict(settings), "seeds": {}}
    for seed in settings.seeds:
        train, val = _datasets(settings, seed)
        row = {"average": baseline_psnr(val)}
        t0 = time.time()
        s1 = run_stage(1, train, val, workdir / f"seed{seed}" / "stage1", base_cfg, sched, seed=seed)
        row["stage1_checkpoint"] = str(s1.checkpoint)
        for name, switches in VARIANTS.items():
            cfg = replace(base_cfg, **switches)
            s2 = run_stage(2, train, val, workdir / f"seed{seed}" / name, cfg, sched, resume=s1.checkpoint, seed=seed)
            row[name] = max(h["val_psnr"] for h in s2.history)
            row[f"{name}_checkpoint"] = str(s2.checkpoint)
        row["seconds"] = time.time() - t0
        log.info("seed %d: %s", seed, row)
        results["seeds"][str(seed)] = row
    names = ["average", *VARIANTS]
    results["aggregate"] = {n: float(np.mean([r[n] for r in results["seeds"].values()])) for n in names}
    workdir.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(json.dumps(results, indent=1))
    return results


def sprite_interiors(sample, margin: int = 2) -> np.ndarray:
    """Pixels of the time-t frame inside a moving sprite with valid flow in both directions."""
    moving = np.abs(sample.flows["o_t0"]).sum(-1) > 0
    mask = moving & sample.valid["t0"] & sample.valid["t1"]
    return ndimage.binary_erosion(mask, np.ones((2 * margin + 1,) * 2), border_value=0)


@torch.no_grad()
def consistency_probe(model: Interpolator, moving, static) -> dict:
    """Mean inconsistency map on sprite interiors of ``moving`` and over whole ``static`` frames, at t=0.5."""
    model.eval()
    inside, still = [], []
    for s in (moving[i] for i in range(len(moving))):
        mot = model.motion(to_tensor(s.i0), to_tensor(s.i1), 0.5)
        p = inconsistency_map(*mot["consistent"], model.config.tau)[0, 0].numpy()
        mask = sprite_interiors(s)
        if mask.any():
            inside.append(p[mask])
    for s in (static[i] for i in range(len(static))):
        mot = model.motion(to_tensor(s.i0), to_tensor(s.i1), 0.5)
        still.append(float(inconsistency_map(*mot["consistent"], model.config.tau).mean()))
    return {"interior_mean": float(np.concatenate(inside).mean()), "static_mean": float(np.mean(still))}


def stage_one_consistency(checkpoint, n_moving: int = 50, n_static: int = 20, seed: int = 1000) -> dict:
    model, _ = load_checkpoint(checkpoint)
    moving, _ = make_split(n_moving, seed, "medium", 0.0)
    static, _ = make_split(n_static, seed, "static", 0.0)
    return consistency_probe(model, SyntheticTriplets(moving), SyntheticTriplets(static))
