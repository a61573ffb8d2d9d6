"""Peak retained activations of one training step per regime.

    python scripts/memory_report.py --batch 32
"""

import argparse

import numpy as np

from lakd.autograd import Tensor
from lakd.losses import LossWeights
from lakd.metrics import memory_report
from lakd.models import build_tapnet
from lakd.ndam import NdamSettings
from lakd.optim import SGD
from lakd.sdm import partition, plan_from_location, sdm_step
from lakd.train import build_projections, compute_targets, end_to_end_step, teacher_index_map


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=12)
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--teacher-width", type=int, default=16)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(args.batch, 3, args.size, args.size)))
    y = rng.integers(0, 3, args.batch)
    teacher = build_tapnet(9, args.teacher_width, 3, seed=1, input_size=args.size, frozen=True)
    w = LossWeights()
    peaks = {}
    for loc in ([1, 4, 9], [3, 6, 9]):
        for detach in (True, False):
            plan = plan_from_location(loc, detach=detach)
            student = build_tapnet(9, args.width, 3, seed=0, input_size=args.size)
            mapping = teacher_index_map(student, teacher, plan.align_at)
            proj = build_projections(student, teacher, mapping, 0)
            rep = sdm_step(partition(student, plan, proj), student, plan, compute_targets(teacher, x, mapping),
                           x, y, w, proj, NdamSettings(), update=False)
            peaks[f"lakd {'detach' if detach else 'no-detach'} {loc}"] = (rep.peak_retained, rep.peak_bytes)
    student = build_tapnet(9, args.width, 3, seed=0, input_size=args.size)
    rep = end_to_end_step(student, SGD(student.parameters()), "scratch", x, y, w, update=False)
    peaks["scratch"] = (rep.peak_retained, rep.peak_bytes)

    base = peaks["lakd no-detach [1, 4, 9]"]
    for name, (count, nbytes) in peaks.items():
        cmp = memory_report([base[0]], [count], [base[1]], [nbytes])
        print(f"{name:28s} {count:4d} tensors {nbytes / 2**20:7.2f} MiB  "
              f"{100 * cmp.reduction:+6.1f}% vs no-detach [1, 4, 9]")


if __name__ == "__main__":
    main()
