"""Detach-location trend over several student seeds.

Trains scratch, a no-detach baseline and the detached [n,2n,3n] and
[1,n+1,3n] plans against a saved teacher, then prints mean final top-1.

    python scripts/detach_trend.py --teacher runs/teacher.ckpt --seeds 0,1,2
"""

import argparse
import time

import numpy as np

from lakd.config import NetSpec, RunConfig
from lakd.data import DatasetSpec, load_dataset
from lakd.losses import LossWeights
from lakd.models import load_checkpoint
from lakd.sdm import plan_from_location, remap_alignment
from lakd.train import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--teacher", required=True)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--depth", type=int, default=9)
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--beta", type=float, default=1e-3)
    args = ap.parse_args()

    data = DatasetSpec()
    train, val = load_dataset(data)
    teacher = load_checkpoint(args.teacher, frozen=True)
    n = args.depth // 3
    std = [n, 2 * n, 3 * n]
    fwd = remap_alignment(std, "forward-shifted")
    cells = {
        "scratch": dict(regime="scratch"),
        f"no-detach {std}": dict(plan=plan_from_location(std, detach=False)),
        f"detach {std}": dict(plan=plan_from_location(std)),
        f"detach {fwd}": dict(plan=plan_from_location(fwd)),
    }
    top1 = {k: [] for k in cells}
    deep_l2 = {k: [] for k in cells}
    t0 = time.perf_counter()
    for seed in (int(s) for s in args.seeds.split(",")):
        for name, kw in cells.items():
            cfg = RunConfig(dataset=data, student=NetSpec(args.depth, args.width, seed),
                            teacher=NetSpec(teacher.depth, teacher.width, checkpoint=args.teacher),
                            weights=LossWeights(beta=args.beta), epochs=args.epochs, eval_cka=False, **kw)
            rec, _ = run(cfg, train, val, teacher=teacher)
            top1[name].append(100 * rec.final["val_top1"])
            if rec.final["layer_l2"]:
                deep_l2[name].append(rec.final["layer_l2"][-1])
            print(f"seed {seed} {name:22s} top1 {top1[name][-1]:.2f}", flush=True)
    print(f"\n{'cell':22s} {'top1':>7s} {'deep L2':>9s}")
    for name in cells:
        l2 = f"{np.mean(deep_l2[name]):9.2f}" if deep_l2[name] else f"{'-':>9s}"
        print(f"{name:22s} {np.mean(top1[name]):7.2f} {l2}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
