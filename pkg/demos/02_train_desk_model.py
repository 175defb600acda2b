"""Train a small interpolator on synthetic sprites and compare it with frame averaging.

Stage one learns motion from the photometric loss alone: the estimator and the
consistent-motion refiner never see ground-truth flow. Stage two starts from
that checkpoint and trains the whole pipeline against the true middle frame.
Defaults finish in a few minutes on one CPU core; raise --train and the epoch
counts for better numbers.

    python demos/02_train_desk_model.py --train 120 --epochs1 2 --epochs2 2 --out demo_out/train
"""
import argparse
import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from trajvfi.config import ScheduleConfig
from trajvfi.data import SyntheticTriplets, make_split, to_image, to_tensor
from trajvfi.evaluation import frame_average
from trajvfi.experiments import DESK_MODEL
from trajvfi.metrics import psnr
from trajvfi.training import run_stage


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--train", type=int, default=120)
    parser.add_argument("--val", type=int, default=24)
    parser.add_argument("--difficulty", default="medium")
    parser.add_argument("--epochs1", type=int, default=2)
    parser.add_argument("--epochs2", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="demo_out/train")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    total = args.train + args.val
    train_m, val_m = make_split(total, args.seed, args.difficulty, args.val / total)
    train, val = SyntheticTriplets(train_m), SyntheticTriplets(val_m)
    # desk learning rates: the library defaults assume a pretrained estimator and long schedules
    sched = ScheduleConfig(lr_motion=1e-3, lr_rest=2e-3, epochs_stage1=args.epochs1, epochs_stage2=args.epochs2)

    s1 = run_stage(1, train, val, out / "stage1", DESK_MODEL, sched, seed=args.seed)
    print(f"stage one: best checkpoint {s1.checkpoint}")
    s2 = run_stage(2, train, val, out / "stage2", DESK_MODEL, sched, resume=s1.checkpoint, seed=args.seed)
    model = s2.model.eval()

    scores, base = [], []
    with torch.no_grad():
        for i in range(len(val)):
            s = val[i]
            pred = to_image(model(to_tensor(s.i0), to_tensor(s.i1), s.t))
            scores.append(psnr(pred, s.it))
            base.append(psnr(frame_average(s.i0, s.i1), s.it))
    print(f"validation PSNR: model {np.mean(scores):.2f} dB, frame average {np.mean(base):.2f} dB")

    # one validation triplet side by side
    s = val[0]
    with torch.no_grad():
        pred = to_image(model(to_tensor(s.i0), to_tensor(s.i1), s.t))
    fig, axes = plt.subplots(1, 5, figsize=(16, 3.6))
    panels = [(s.i0, "frame 0"), (frame_average(s.i0, s.i1), "frame average"), (pred, "model"),
              (s.it, "true middle"), (s.i1, "frame 1")]
    for ax, (img, title) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "comparison.png", dpi=100)
    print(f"figure written to {out / 'comparison.png'}")


if __name__ == "__main__":
    main()
