import csv
import json

import pytest
import torch

from trajvfi.config import ScheduleConfig
from trajvfi.data import SyntheticTriplets, make_split
from trajvfi.errors import InvalidArgument, NumericFailure, PreconditionFailed
from trajvfi.model import Interpolator, load_checkpoint
from trajvfi.training import METRIC_COLUMNS, build_optimizer, build_scheduler, run_stage

FAST = ScheduleConfig(lr_motion=1e-3, lr_rest=1e-3, batch=4, epochs_stage1=2, epochs_stage2=2)


@pytest.fixture(scope="module")
def tiny_data():
    tr, va = make_split(12, 21, "medium", 1 / 3, size=(32, 32))
    return SyntheticTriplets(tr), SyntheticTriplets(va)


@pytest.fixture(scope="module")
def stage_one(tiny_data, tmp_path_factory):
    from conftest import TINY
    out = tmp_path_factory.mktemp("s1")
    return run_stage(1, *tiny_data, out, TINY, FAST, seed=3)


def test_stage_one_outputs(stage_one):
    out = stage_one.checkpoint.parent
    assert {p.name for p in out.iterdir()} >= {"best.ckpt", "last.ckpt", "metrics.csv"}
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == METRIC_COLUMNS and len(rows) == 2
    for row in rows:
        assert abs(float(row["l_pho"]) - float(row["l_con"]) - float(row["l_cen"])) < 1e-9
    best = [h["best_val_loss"] for h in stage_one.history]
    assert all(b >= a for a, b in zip(best[1:], best))


def test_stage_one_leaves_synthesis_untouched(stage_one):
    from conftest import TINY
    torch.manual_seed(3)  # same initialisation as the run
    fresh = Interpolator(TINY)
    model, _ = load_checkpoint(stage_one.last_checkpoint)
    motion_changed = any(not torch.equal(a, b) for a, b in zip(model.motion_parameters(), fresh.motion_parameters()))
    assert motion_changed
    for a, b in zip(model.synthesis_parameters(), fresh.synthesis_parameters()):
        assert torch.equal(a, b)


def test_stage_two_requires_checkpoint(tiny_data, tmp_path):
    with pytest.raises(PreconditionFailed):
        run_stage(2, *tiny_data, tmp_path, schedule=FAST)
    with pytest.raises(InvalidArgument):
        run_stage(3, *tiny_data, tmp_path, schedule=FAST)


def test_stage_two_runs_from_stage_one(stage_one, tiny_data, tmp_path):
    res = run_stage(2, *tiny_data, tmp_path, schedule=FAST, resume=stage_one.checkpoint, epochs=1, seed=3)
    assert len(res.history) == 1
    row = res.history[0]
    assert row["lr_rest"] == FAST.lr_rest and row["lr_motion"] == FAST.lr_motion
    assert 0 < row["val_psnr"] < 99


def test_optimizer_groups(tiny_config):
    model = Interpolator(tiny_config)
    opt1 = build_optimizer(model, 1, FAST)
    opt2 = build_optimizer(model, 2, ScheduleConfig())
    assert [g["name"] for g in opt1.param_groups] == ["motion"]
    assert [(g["name"], g["lr"]) for g in opt2.param_groups] == [("motion", 5e-5), ("rest", 5e-4)]
    assert isinstance(opt2, torch.optim.Adamax) and opt2.defaults["betas"] == (0.9, 0.999)


def test_plateau_decay_exact_factor(tiny_config):
    model = Interpolator(tiny_config)
    sched = ScheduleConfig()
    opt = build_optimizer(model, 2, sched)
    plateau = build_scheduler(opt, sched)
    lrs = []
    for _ in range(12):
        plateau.step(1.0)  # frozen held-out loss
        lrs.append(opt.param_groups[1]["lr"])
    # the first epoch sets the best value; after `patience` further epochs without
    # improvement, the next stale epoch multiplies every rate by the decay factor
    first = next(i for i, lr in enumerate(lrs) if lr != 5e-4)
    assert first == sched.patience + 1
    assert lrs[first] == pytest.approx(5e-4 * 0.2, rel=1e-12)
    assert opt.param_groups[0]["lr"] <= 5e-5 * 0.2 * (1 + 1e-12)


def test_nonfinite_loss_aborts_with_dump(tiny_data, tmp_path, monkeypatch, tiny_config):
    import trajvfi.training as training

    monkeypatch.setattr(training, "consistency_losses",
                        lambda *a, **k: (torch.tensor(float("nan"), requires_grad=True), torch.tensor(0.0)))
    with pytest.raises(NumericFailure):
        run_stage(1, *tiny_data, tmp_path, tiny_config, FAST, seed=0)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["stage"] == 1 and dump["ids"]
