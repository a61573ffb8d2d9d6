"""Experiment runner: ``lakd train | eval | ablate | export-attention``.

Every flag maps onto a RunConfig field.  Values are layered: built-in
defaults, then ``--paper-scale`` presets, then the ``--config`` JSON file,
then explicit flags.

Exit codes: 0 ok, 1 some sweep cells failed, 2 bad configuration or input
data, 3 unreadable checkpoint, 4 class-count or shape mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .data import Dataset, DatasetSpec, load_dataset, normalize
from .errors import CheckpointError, ConfigError, DimensionError, FormatError
from .losses import attention_map
from .metrics import PredictionLog, cka_matrix, ek_metric, predictions, topk_accuracy
from .models import TapNet, load_checkpoint, save_checkpoint
from .ndam import NdamSettings, build_weight, write_pgm
from .sdm import plan_from_location
from .train import EVAL_BATCH, RunRecord, run, student_logits

logger = logging.getLogger("lakd")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_MISMATCH = 0, 1, 2, 3, 4

PAPER_SCALE = {
    "epochs": 300,
    "batch_size": 64,
    "lr_schedule": "linear",
    "optim": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "nesterov": True},
    "dataset": {"augment": True, "image_size": 32},
}


def _int_list(text: str) -> list[int]:
    text = text.strip().strip("[]")
    return [int(t) for t in re.split(r"[,\s]+", text) if t]


def _float_pair(text: str) -> list[float]:
    vals = [float(t) for t in re.split(r"[,\s]+", text.strip().strip("[]()")) if t]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected two numbers")
    return vals


# (flag, dotted config path, type); type None marks a boolean switch
RUN_FLAGS = [
    ("--regime", "regime", str),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr-schedule", "lr_schedule", str),
    ("--lr", "optim.lr", float),
    ("--momentum", "optim.momentum", float),
    ("--weight-decay", "optim.weight_decay", float),
    ("--nesterov", "optim.nesterov", None),
    ("--alpha", "weights.alpha", float),
    ("--beta", "weights.beta", float),
    ("--temperature", "weights.temperature", float),
    ("--detach-after", "plan.detach_after", _int_list),
    ("--align-at", "plan.align_at", _int_list),
    ("--terminal-feature", "plan.terminal_feature", None),
    ("--teacher-align", "teacher_align", _int_list),
    ("--ndam", "ndam.enabled", None),
    ("--ndam-alpha", "ndam.alpha_pool", float),
    ("--ndam-beta", "ndam.beta_pool", float),
    ("--ndam-abs", "ndam.use_abs", None),
    ("--ndam-apply-to", "ndam.apply_to", str),
    ("--student-depth", "student.depth", int),
    ("--student-width", "student.width", int),
    ("--student-seed", "student.seed", int),
    ("--student-checkpoint", "student.checkpoint", str),
    ("--teacher-depth", "teacher.depth", int),
    ("--teacher-width", "teacher.width", int),
    ("--teacher-checkpoint", "teacher.checkpoint", str),
    ("--data", "dataset.source", str),
    ("--val-data", "dataset.val_source", str),
    ("--num-classes", "dataset.num_classes", int),
    ("--train-size", "dataset.train_size", int),
    ("--val-size", "dataset.val_size", int),
    ("--image-size", "dataset.image_size", int),
    ("--noise", "dataset.noise", float),
    ("--contrast", "dataset.contrast", _float_pair),
    ("--data-seed", "dataset.data_seed", int),
    ("--shuffle-seed", "dataset.shuffle_seed", int),
    ("--augment", "dataset.augment", None),
    ("--cka", "eval_cka", None),
    ("--output-dir", "output_dir", str),
]


def _dest(path: str) -> str:
    return "cfg__" + path.replace(".", "__")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--paper-scale", action="store_true",
                   help="300-epoch CIFAR protocol (batch 64, lr 0.05 linear decay, crop/flip, 32x32)")
    g = p.add_argument_group("run configuration")
    for flag, path, typ in RUN_FLAGS:
        if typ is None:
            g.add_argument(flag, dest=_dest(path), action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=_dest(path), type=typ, default=None,
                           metavar=flag[2:].upper().replace("-", "_"))


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(d: dict, path: str, value) -> None:
    *head, last = path.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def config_from_args(args: argparse.Namespace) -> RunConfig:
    layered: dict = {}
    if args.paper_scale:
        layered = _merge(layered, PAPER_SCALE)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"config: cannot read {args.config}: {e}") from e
        try:
            layered = _merge(layered, json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: {args.config} is not valid JSON: {e}") from e
    for _, path, _ in RUN_FLAGS:
        v = getattr(args, _dest(path))
        if v is not None:
            _set_path(layered, path, v)
    try:
        return RunConfig.from_dict(layered)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# train ---------------------------------------------------------------------------------

def _load_data(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    train, val = load_dataset(spec)
    side = train.images.shape[-1]
    if side != spec.image_size:
        raise ConfigError(f"dataset.image_size: is {spec.image_size} but the data is {side}x{side}")
    return train, val


def cmd_train(config: RunConfig, teacher: TapNet | None = None) -> RunRecord:
    """Train one run; with ``output_dir`` set, writes record.csv, record.json
    and model.ckpt there."""
    config.validate(check_paths=teacher is None)
    train, val = _load_data(config.dataset)
    record, trainer = run(config, train, val, teacher=teacher)
    if config.output_dir:
        out = Path(config.output_dir)
        record.write(out)
        save_checkpoint(trainer.student, out / "model.ckpt")
    return record


# eval ------------------------------------------------------------------------------------

def cmd_eval(checkpoint, dataset: DatasetSpec, teacher_checkpoint=None, attention_dir=None,
             with_cka: bool = True) -> dict:
    student = load_checkpoint(checkpoint)
    _, val = _load_data(dataset)
    if student.num_classes != val.num_classes:
        raise DimensionError(f"checkpoint has {student.num_classes} classes, dataset has {val.num_classes}")
    images = normalize(val.images, dataset.mean, dataset.std)
    logits = student_logits(student, images)
    k = val.num_classes
    row = {"top1": topk_accuracy(logits, val.labels, 1), "top5": topk_accuracy(logits, val.labels, min(5, k)),
           "ek": None, "ek_error": None, "cka": None}
    if teacher_checkpoint:
        teacher = load_checkpoint(teacher_checkpoint, frozen=True)
        if teacher.num_classes != k:
            raise DimensionError(f"teacher has {teacher.num_classes} classes, dataset has {k}")
        t_logits = student_logits(teacher, images)
        try:
            row["ek"] = ek_metric(PredictionLog(predictions(t_logits), predictions(logits), val.labels))
        except Exception as e:  # surfaced, not fatal: "EK undefined"
            row["ek_error"] = str(e)
        if with_cka:
            s_acts, t_acts = _all_taps(student, images), _all_taps(teacher, images)
            row["cka"] = cka_matrix([s_acts[i] for i in sorted(s_acts)], [t_acts[j] for j in sorted(t_acts)]).tolist()
    if attention_dir:
        export_attention(student, images, Path(attention_dir))
    return row


def _all_taps(net: TapNet, images: np.ndarray) -> dict[int, np.ndarray]:
    view = net.with_taps(tuple(range(1, net.depth + 1)))
    acts = {i: [] for i in view.tap_indices}
    with ag.no_grad():
        for s in range(0, len(images), EVAL_BATCH):
            taps: dict = {}
            view.run_units(Tensor(images[s:s + EVAL_BATCH]), 1, net.depth, taps)
            for i in acts:
                acts[i].append(taps[i].data.reshape(taps[i].shape[0], -1))
    return {i: np.concatenate(v) for i, v in acts.items()}


# export-attention ------------------------------------------------------------------------

def export_attention(net: TapNet, images: np.ndarray, outdir: Path, samples: int = 4, taps=None,
                     ndam: NdamSettings = NdamSettings()) -> list[Path]:
    """For each sample and tap, write the NDAM weight map (``w_*``, built from
    the unit's pre-activation) and the squared-activation attention map
    (``at_*``) as PGM images."""
    taps = tuple(taps) if taps else tuple(net.stage_ends())
    outdir.mkdir(parents=True, exist_ok=True)
    x = Tensor(images[:samples])
    feats: dict = {}
    pres: dict = {}
    with ag.no_grad():
        net.with_taps(taps).run_units(x, 1, net.depth, feats, pres)
    written = []
    for i in taps:
        w = build_weight(pres[i], ndam.alpha_pool, ndam.beta_pool, ndam.use_abs).map.data
        side = feats[i].shape[-1]
        at = attention_map(feats[i]).data.reshape(-1, side, side)
        for n in range(x.shape[0]):
            for tag, m in (("w", w[n, 0]), ("at", at[n])):
                path = outdir / f"{tag}_sample{n:03d}_unit{i}.pgm"
                write_pgm(path, m)
                written.append(path)
    return written


# ablate ----------------------------------------------------------------------------------

def detach_locations(depth: int) -> list[list[int]]:
    """[n, 2n, 3n], [n-1, 2n-1, 3n] and [1, n+1, 3n] for a depth-3n student."""
    if depth % 3 or depth < 6:
        raise ConfigError(f"student.depth: detach sweep needs a multiple of 3 (>= 6), got {depth}")
    n = depth // 3
    locs = [[n, 2 * n, 3 * n], [n - 1, 2 * n - 1, 3 * n], [1, n + 1, 3 * n]]
    unique = []
    for loc in locs:
        if loc not in unique:
            unique.append(loc)
    return unique


def detach_cells(base: RunConfig, locations=None) -> list[tuple[dict, RunConfig]]:
    """No-detach baseline at the first location, then one detached cell per location."""
    locations = locations or detach_locations(base.student.depth)
    first = list(locations[0])
    cells = [({"detach": "none", "location": first},
              replace(base, regime="lakd", plan=plan_from_location(first, detach=False)))]
    for loc in locations:
        cells.append(({"detach": "yes", "location": list(loc)},
                      replace(base, regime="lakd", plan=plan_from_location(loc, detach=True))))
    return cells


NDAM_GRID = [(True, 0.0, 0.0), (True, 0.5, 0.5), (False, 0.5, 0.5), (True, 0.25, 0.75), (False, 0.25, 0.75)]


def ndam_cells(base: RunConfig) -> list[tuple[dict, RunConfig]]:
    cells = []
    for use_abs, a, b in NDAM_GRID:
        off = a == 0 and b == 0
        label = {"abs": "off" if off else ("yes" if use_abs else "no"), "alpha": a, "beta": b}
        cells.append((label, replace(base, regime="lakd", ndam=replace(base.ndam, alpha_pool=a, beta_pool=b,
                                                                        use_abs=use_abs, enabled=True))))
    return cells


def _cell_name(label: dict) -> str:
    raw = "_".join(f"{k}-{v}" for k, v in label.items())
    return re.sub(r"[^A-Za-z0-9.\-_]+", "", raw.replace(",", "-"))


def _run_cell(config_json: str) -> dict:
    """Worker entry point; a cell never raises, failures come back as a status."""
    try:
        rec = cmd_train(RunConfig.from_json(config_json))
        final = rec.final
        return {"status": "ok", "top1": final["val_top1"], "top5": final["val_top5"], "ek": final["ek"],
                "layer_l2": final["layer_l2"], "config_hash": rec.config_hash}
    except Exception as e:  # noqa: BLE001 - the row records it and the sweep continues
        return {"status": f"failed: {type(e).__name__}: {e}"}


def cmd_ablate(cells: list[tuple[dict, RunConfig]], outdir=None, workers: int = 1) -> list[dict]:
    if not cells:
        raise ConfigError("sweep: no cells")
    jobs = []
    for label, cfg in cells:
        if outdir:
            cfg = replace(cfg, output_dir=str(Path(outdir) / _cell_name(label)))
        jobs.append(cfg.to_json())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = [{**label, **res} for (label, _), res in zip(cells, results)]
    if outdir:
        write_table(rows, Path(outdir) / "table.csv")
    return rows


def write_table(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [c for c in rows[0] if c not in ("layer_l2",)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in cols})


def _fmt(v):
    if isinstance(v, list):
        return "[" + ",".join(str(x) for x in v) + "]"
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else v


def format_table(rows: list[dict], cols) -> str:
    body = [[_fmt(r.get(c)) if c not in ("top1", "ek") or r.get(c) is None else f"{100 * r[c]:.2f}"
             for c in cols] for r in rows]
    widths = [max(len(str(c)), *(len(str(b[i])) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(str(x).ljust(w) for x, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


# entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="lakd", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    _add_run_flags(p)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attention-dir", help="also dump attention maps as PGM here")
    p.add_argument("--json-out", help="write the metrics row to this file")

    p = sub.add_parser("ablate", parents=[common], help="run a detach-location or NDAM sweep")
    _add_run_flags(p)
    p.add_argument("--sweep", choices=("detach", "ndam"), required=True)
    p.add_argument("--locations", help="detach sweep locations, e.g. '3,6,9;1,4,9'")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("export-attention", parents=[common], help="write attention maps of a checkpoint as PGM")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--taps", type=_int_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DimensionError as e:
        print(f"mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except FormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    config = config_from_args(args)
    if args.verb == "train":
        if args.print_config:
            print(config.to_json())
            return EXIT_OK
        rec = cmd_train(config)
        f = rec.final
        print(f"config_hash={rec.config_hash} top1={f['val_top1']:.4f} top5={f['val_top5']:.4f} ek={f['ek']}")
        return EXIT_OK
    if args.verb == "eval":
        row = cmd_eval(args.checkpoint, config.dataset, config.teacher.checkpoint, args.attention_dir, config.eval_cka)
        text = json.dumps(row, indent=2)
        if args.json_out:
            Path(args.json_out).write_text(text)
        print(text)
        return EXIT_OK
    if args.verb == "ablate":
        config.validate()
        if args.sweep == "detach":
            locs = [_int_list(s) for s in args.locations.split(";")] if args.locations else None
            cells, cols = detach_cells(config, locs), ["detach", "location", "top1", "status"]
        else:
            cells, cols = ndam_cells(config), ["abs", "alpha", "beta", "ek", "top1", "status"]
        for _, cfg in cells:
            cfg.validate()
        rows = cmd_ablate(cells, config.output_dir, args.workers)
        print(format_table(rows, cols))
        return EXIT_PARTIAL if any(r["status"] != "ok" for r in rows) else EXIT_OK
    if args.verb == "export-attention":
        net = load_checkpoint(args.checkpoint)
        _, val = _load_data(config.dataset)
        images = normalize(val.images, config.dataset.mean, config.dataset.std)
        net.check_input(Tensor(images[:1]))
        outdir = Path(config.output_dir or ".") / "attention"
        paths = export_attention(net, images, outdir, args.samples, args.taps, config.ndam)
        print(f"wrote {len(paths)} maps to {outdir}")
        return EXIT_OK
    raise ConfigError(f"unknown verb {args.verb}")


if __name__ == "__main__":
    sys.exit(main())
