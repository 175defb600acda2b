"""Two-stage optimisation: photometric motion training, then end-to-end reconstruction."""
from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ScheduleConfig
from .data import collate, flip_sample, reverse_sample
from .errors import InvalidArgument, NumericFailure, PreconditionFailed
from .losses import consistency_losses, reconstruction_loss
from .metrics import batch_psnr
from .model import Interpolator, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "stage", "l_con", "l_cen", "l_pho", "l_rec", "lr_motion", "lr_rest", "val_psnr")


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def build_optimizer(model: Interpolator, stage: int, sched: ScheduleConfig):
    """Adamax over the motion group (both stages) and the synthesis group (stage two only)."""
    groups = [{"params": list(model.motion_parameters()), "lr": sched.lr_motion, "name": "motion"}]
    if stage == 2:
        groups.append({"params": list(model.synthesis_parameters()), "lr": sched.lr_rest, "name": "rest"})
    return torch.optim.Adamax(groups, betas=tuple(sched.betas))


def build_scheduler(optimizer, sched: ScheduleConfig):
    """Multiply every rate by ``decay`` once the held-out loss has not improved for more than ``patience`` epochs."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode="min", factor=sched.decay, patience=sched.patience)


def _group_lrs(optimizer):
    lrs = {g.get("name"): g["lr"] for g in optimizer.param_groups}
    return lrs.get("motion", float("nan")), lrs.get("rest", float("nan"))


def photometric_step(model, batch):
    mot = model.motion(batch["i0"], batch["i1"], batch["t"])
    l_con, l_cen = consistency_losses(batch["i0"], batch["i1"], batch["it"], mot["consistent"],
                                      (mot["o01"], mot["o10"]), batch["t"])
    return l_con, l_cen


def _batches(dataset, order, size, rng=None, do_augment=False):
    for start in range(0, len(order), size):
        samples = [dataset[int(i)] for i in order[start:start + size]]
        if do_augment:
            samples = [_augment_keep_t(s, rng) for s in samples]
            if rng.random() < 0.5:
                samples = [reverse_sample(s) for s in samples]
        yield collate(samples)


def _augment_keep_t(s, rng):
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=True)
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=False)
    return s


@torch.no_grad()
def validate(model, dataset, stage: int, batch_size: int = 8) -> dict:
    """Held-out losses and PSNR of the full model output."""
    model.eval()
    totals = {"l_con": 0.0, "l_cen": 0.0, "l_rec": 0.0}
    psnrs = []
    n = 0
    for batch in _batches(dataset, np.arange(len(dataset)), batch_size):
        k = batch["i0"].shape[0]
        l_con, l_cen = photometric_step(model, batch)
        out = model(batch["i0"], batch["i1"], batch["t"])
        totals["l_con"] += float(l_con) * k
        totals["l_cen"] += float(l_cen) * k
        totals["l_rec"] += float(reconstruction_loss(out, batch["it"])) * k
        psnrs.extend(batch_psnr(out, batch["it"]))
        n += k
    model.train()
    res = {k: v / max(n, 1) for k, v in totals.items()}
    res["l_pho"] = res["l_con"] + res["l_cen"]
    res["val_psnr"] = float(np.mean(psnrs)) if psnrs else float("nan")
    return res


def append_metrics(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow({k: row[k] for k in METRIC_COLUMNS})


def _dump_nonfinite(outdir, info):
    path = Path(outdir) / "nonfinite_dump.json"
    path.write_text(json.dumps(info, indent=1, default=str))
    return path


@dataclass
class StageResult:
    checkpoint: Path
    last_checkpoint: Path
    history: list = field(default_factory=list)
    model: Interpolator | None = None


def run_stage(stage: int, train_set, val_set, outdir, model_config: ModelConfig | None = None,
              schedule: ScheduleConfig | None = None, resume=None, seed: int = 0,
              deterministic: bool = False, epochs: int | None = None) -> StageResult:
    """Train one stage and write ``best.ckpt``, ``last.ckpt`` and ``metrics.csv`` to ``outdir``.

    Stage one optimises the flow estimator and consistent-motion trunks under
    the photometric loss; stage two optimises everything under the
    reconstruction loss and requires a stage-one checkpoint in ``resume``.
    """
    if stage not in (1, 2):
        raise InvalidArgument(f"stage must be 1 or 2, got {stage}")
    sched = schedule or ScheduleConfig()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seed_everything(seed, deterministic)

    if resume is not None:
        model, meta = load_checkpoint(resume)
        if model_config is not None:
            # ablation switches may differ from the motion checkpoint; parameters must still line up
            model = _transfer(model, model_config)
    elif stage == 2:
        raise PreconditionFailed("stage two needs a stage-one checkpoint (resume=...)")
    else:
        model = Interpolator(model_config or ModelConfig())
    model.train()

    optimizer = build_optimizer(model, stage, sched)
    scheduler = build_scheduler(optimizer, sched)
    rng = np.random.default_rng(seed)
    n_epochs = sched.epochs(stage) if epochs is None else epochs
    metrics_path = outdir / "metrics.csv"
    best_path, last_path = outdir / "best.ckpt", outdir / "last.ckpt"
    best = math.inf
    history = []

    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(train_set))
        for step, batch in enumerate(_batches(train_set, order, sched.batch, rng, sched.augment)):
            if stage == 1:
                l_con, l_cen = photometric_step(model, batch)
                loss = l_con + l_cen
            else:
                loss = reconstruction_loss(model(batch["i0"], batch["i1"], batch["t"]), batch["it"])
            if not torch.isfinite(loss):
                dump = _dump_nonfinite(outdir, {"stage": stage, "epoch": epoch, "step": step,
                                                "ids": batch["ids"], "loss": float(loss.detach())})
                raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}; see {dump}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

        val = validate(model, val_set, stage)
        val_loss = val["l_pho"] if stage == 1 else val["l_rec"]
        if not math.isfinite(val_loss):
            dump = _dump_nonfinite(outdir, {"stage": stage, "epoch": epoch, "validation": val})
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}; see {dump}")
        lr_motion, lr_rest = _group_lrs(optimizer)
        row = {"epoch": epoch, "stage": stage, **val, "lr_motion": lr_motion, "lr_rest": lr_rest}
        append_metrics(metrics_path, row)
        meta = {"stage": stage, "epoch": epoch, "seed": seed, "val_loss": val_loss}
        if val_loss < best:
            best = val_loss
            save_checkpoint(best_path, model, meta)
        row["val_loss"], row["best_val_loss"] = val_loss, best
        history.append(row)
        log.info("stage %d epoch %d val_loss %.5f psnr %.2f", stage, epoch, val_loss, val["val_psnr"])
        scheduler.step(val_loss)

    save_checkpoint(last_path, model, {"stage": stage, "epoch": n_epochs, "seed": seed})
    if not best_path.exists():
        save_checkpoint(best_path, model, {"stage": stage, "epoch": 0, "seed": seed})
    return StageResult(best_path, last_path, history, model)


def _transfer(model: Interpolator, config: ModelConfig) -> Interpolator:
    """Rebuild ``model`` under ``config``, copying every parameter whose name and shape match."""
    if config == model.config:
        return model
    new = Interpolator(config)
    own = new.state_dict()
    for name, value in model.state_dict().items():
        if name in own and own[name].shape == value.shape:
            own[name] = value
    new.load_state_dict(own)
    return new
