"""NDAM pooling-weight ablation (five cells) against a saved teacher.

    python scripts/ndam_ablation.py --teacher runs/teacher.ckpt --out runs/ndam
"""

import argparse

from lakd.cli import cmd_ablate, format_table, ndam_cells
from lakd.config import NetSpec, RunConfig
from lakd.data import DatasetSpec
from lakd.models import load_checkpoint
from lakd.sdm import plan_from_location


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--teacher", required=True)
    ap.add_argument("--out", default="runs/ndam")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    t = load_checkpoint(args.teacher)
    base = RunConfig(dataset=DatasetSpec(), student=NetSpec(9, 8, args.seed),
                     teacher=NetSpec(t.depth, t.width, checkpoint=args.teacher), regime="lakd",
                     plan=plan_from_location([1, 4, 9]), epochs=args.epochs, eval_cka=False)
    rows = cmd_ablate(ndam_cells(base), args.out, args.workers)
    print(format_table(rows, ["abs", "alpha", "beta", "ek", "top1", "status"]))


if __name__ == "__main__":
    main()
