"""The command-line workflow end to end: synthesise, train, interpolate, inspect, score.

Each step shells out to the ``trajvfi`` entry point exactly as a user would, so
this doubles as a reference for the flags. Training here is one tiny epoch per
stage; the point is the plumbing, not the picture quality.

    python demos/04_command_line.py --out demo_out/cli
"""
import argparse
import subprocess
import sys
from pathlib import Path


def run(*argv):
    cmd = [sys.executable, "-m", "trajvfi.cli", *map(str, argv)]
    print("$ trajvfi " + " ".join(map(str, argv)), flush=True)
    subprocess.run(cmd, check=True)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="demo_out/cli")
    parser.add_argument("--count", type=int, default=30)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # a small desk-sized configuration; keys follow the config file format
    config = out / "desk.cfg"
    config.write_text("# desk-scale model\nd = 32\ncontext = 16\ngrid = 16,32,48\n"
                      "lr_motion = 1e-3\nlr_rest = 2e-3\n")

    data = out / "data"
    run("synth", "--count", args.count, "--seed", 7, "--difficulty", "medium", "--out", data)
    run("train", "--stage", 1, "--data", data, "--config", config, "--epochs", 1, "--out", out / "stage1")
    run("train", "--stage", 2, "--data", data, "--config", config, "--epochs", 1,
        "--resume", out / "stage1" / "best.ckpt", "--out", out / "stage2")

    ckpt = out / "stage2" / "best.ckpt"
    sample = data / Path(data / "val.txt").read_text().splitlines()[1]
    run("interpolate", "--frame0", sample / "im1.png", "--frame1", sample / "im3.png",
        "--checkpoint", ckpt, "--out", out / "middle.png")
    # the synthetic triplets carry their true flows as sidecar files next to frame 0
    run("diag", "--frame0", sample / "im1.png", "--frame1", sample / "im3.png", "--sidecar",
        "--checkpoint", ckpt, "--outdir", out / "diag")
    run("eval", "--checkpoint", ckpt, "--manifest", data / "val.txt", "--report", out / "val.csv")


if __name__ == "__main__":
    main()
