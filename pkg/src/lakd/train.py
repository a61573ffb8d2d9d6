"""Training loops for every regime, evaluation, and run records.

Regimes:
    scratch          hard loss only, end-to-end
    traditional-kd   alpha*hard + (1-alpha)*soft + beta*sum(feature), end-to-end
    attention-kd     alpha*hard + (1-alpha)*attention + beta*sum(feature), end-to-end
    lakd             local blocks (see ``sdm``) with NDAM weighting
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .config import DISTILL_REGIMES, RunConfig
from .data import Dataset, batch_iter, epoch_seed, normalize
from .errors import ContractError, DimensionError
from .losses import LossWeights, hard_loss, soft_loss, total_loss_traditional
from .metrics import PredictionLog, cka_matrix, ek_metric, layer_l2_report, predictions, topk_accuracy
from .models import Projection, TapNet, build_tapnet, expected_tap_shapes, forward_with_taps, load_checkpoint
from .ndam import NdamSettings
from .optim import SGD, linear_decay
from .sdm import (LocalBlock, PartitionPlan, StepReport, TeacherTargets, _sum, feature_terms, partition,
                  sdm_step, terminal_loss)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "lr", "loss_total", "loss_hard", "loss_attention", "loss_feature", "block_losses",
               "val_top1", "val_top5", "ek", "layer_l2", "peak_retained", "peak_bytes", "seconds")
EVAL_BATCH = 200


def teacher_index_map(student: TapNet, teacher: TapNet, align, explicit=()) -> dict[int, int]:
    """Student alignment index -> teacher unit.  By default each student
    index pairs with the last unit of the teacher stage at the same depth
    position, so spatial sizes agree."""
    align = tuple(align)
    if explicit:
        return dict(zip(align, explicit))
    ends = teacher.stage_ends()
    return {i: ends[min(student.stage_of(i), len(ends) - 1)] for i in align}


def build_projections(student: TapNet, teacher: TapNet, mapping: dict[int, int], seed: int) -> dict[int, Projection]:
    size = student.input_size or teacher.input_size
    s_shapes = expected_tap_shapes(student.depth, student.width, size)
    t_shapes = expected_tap_shapes(teacher.depth, teacher.width, size)
    rng = np.random.default_rng([seed, 1])
    return {i: Projection(s_shapes[i], t_shapes[t], rng) for i, t in sorted(mapping.items())}


class TeacherCache:
    """Teacher outputs for a fixed image array, computed once in chunks."""

    def __init__(self, teacher: TapNet, images: np.ndarray, mapping: dict[int, int]):
        self.mapping = mapping
        wanted = sorted(set(mapping.values()) | {teacher.depth})
        view = teacher.with_taps(wanted)
        feats = {t: [] for t in wanted}
        pres = {t: [] for t in wanted}
        logits = []
        with ag.no_grad():
            for s in range(0, len(images), EVAL_BATCH):
                taps, preacts = {}, {}
                out = view.run_units(Tensor(images[s:s + EVAL_BATCH]), 1, teacher.depth, taps, preacts)
                logits.append(view.head(out).data)
                for t in wanted:
                    feats[t].append(taps[t].data)
                    pres[t].append(preacts[t].data)
        self.feats = {t: np.concatenate(v) for t, v in feats.items()}
        self.preacts = {t: np.concatenate(v) for t, v in pres.items()}
        self.logits = np.concatenate(logits)
        self.final_index = teacher.depth

    def targets(self, idx: np.ndarray) -> TeacherTargets:
        return TeacherTargets(
            feats={i: Tensor(self.feats[t][idx]) for i, t in self.mapping.items()},
            final=Tensor(self.feats[self.final_index][idx]),
            ndam_source={i: Tensor(self.preacts[t][idx]) for i, t in self.mapping.items()},
            logits=Tensor(self.logits[idx]),
        )


def compute_targets(teacher: TapNet, images: Tensor, mapping: dict[int, int]) -> TeacherTargets:
    cache = TeacherCache(teacher, images.data, mapping)
    return cache.targets(np.arange(images.shape[0]))


def end_to_end_step(student: TapNet, optimizer: SGD, regime: str, batch: Tensor, labels,
                    weights: LossWeights, targets: TeacherTargets | None = None,
                    align=(), projections: dict[int, Projection] | None = None,
                    ndam: NdamSettings | None = None, lr: float | None = None,
                    plan: PartitionPlan | None = None, update: bool = True) -> StepReport:
    """One standard step: a single backward of the whole objective."""
    projections = projections or {}
    plan = plan or PartitionPlan()
    student.check_input(batch)
    report = StepReport(block_losses=[])
    with Tape() as tape:
        view = student.with_taps(align)
        taps: dict[int, Tensor] = {}
        out = view.run_units(batch, 1, student.depth, taps)
        logits = student.head(out)
        if regime == "scratch":
            loss = hard_loss(logits, labels)
            report.hard = float(loss.data)
        else:
            if targets is None:
                raise ContractError(f"regime {regime!r} needs teacher targets")
            feats = {}
            if weights.beta != 0 and align:
                feats = feature_terms(taps, align, targets, projections, ndam if regime != "traditional-kd" else None)
            report.feature = {i: float(f.data) for i, f in feats.items()}
            if regime == "traditional-kd":
                hard = hard_loss(logits, labels)
                report.hard = float(hard.data)
                loss = total_loss_traditional(weights, hard, soft_loss(logits, targets.logits, weights.temperature),
                                              list(feats.values()))
            else:
                loss = terminal_loss(weights, plan, logits, out, labels, targets, _sum(feats.values()), report)
        report.block_losses.append(float(loss.data))
        loss.backward()
        tape.release()
    report.logits = ag.detach(logits)
    report.peak_retained = tape.peak_retained
    report.peak_bytes = tape.peak_bytes
    if update:
        optimizer.step(lr)
        optimizer.zero_grad()
    return report


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    cka: list[list[float]] | None = None
    cka_rows: list[int] = field(default_factory=list)
    cka_cols: list[int] = field(default_factory=list)
    config_hash: str = ""
    config: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "config": self.config, "rows": self.rows,
                "cka": {"matrix": self.cka, "student_taps": self.cka_rows, "teacher_taps": self.cka_cols}}

    def numeric_content(self) -> list[dict]:
        """Rows without wall-clock fields (the reproducible part)."""
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]

    def write(self, outdir) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "record.csv", "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_csv_cell(r.get(c)) for c in CSV_COLUMNS])
        (out / "record.json").write_text(json.dumps(self.to_json(), indent=2))


def _csv_cell(v):
    if isinstance(v, (list, tuple)):
        return ";".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def read_record_csv(path) -> tuple[str, list[dict]]:
    with open(path) as fh:
        first = fh.readline().strip()
        config_hash = first.split("=", 1)[1] if first.startswith("# config_hash=") else ""
        rows = []
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k in ("block_losses", "layer_l2"):
                    row[k] = [float(x) for x in v.split(";")] if v else []
                elif k in ("epoch", "peak_retained", "peak_bytes"):
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else None
            rows.append(row)
    return config_hash, rows


class Trainer:
    """Owns the student, its projections and optimizer state for one run."""

    def __init__(self, config: RunConfig, student: TapNet | None = None, teacher: TapNet | None = None,
                 num_classes: int | None = None):
        self.config = config
        k = num_classes or config.dataset.num_classes
        size = config.dataset.image_size
        if student is None:
            if config.student.checkpoint:
                student = load_checkpoint(config.student.checkpoint)
            else:
                student = build_tapnet(config.student.depth, config.student.width, k, config.student.seed, size)
        if student.num_classes != k:
            raise DimensionError(f"student has {student.num_classes} classes, dataset has {k}")
        self.student = student
        self.regime = config.regime
        self.teacher = None
        self.mapping: dict[int, int] = {}
        self.projections: dict[int, Projection] = {}
        align = config.plan.align_at
        if self.regime in DISTILL_REGIMES:
            if teacher is None:
                teacher = load_checkpoint(config.teacher.checkpoint, frozen=True)
            if teacher.num_classes != k:
                raise DimensionError(f"teacher has {teacher.num_classes} classes, dataset has {k}")
            self.teacher = teacher.freeze() if not teacher.frozen else teacher
            self.mapping = teacher_index_map(student, self.teacher, align, config.teacher_align)
            self.projections = build_projections(student, self.teacher, self.mapping, config.student.seed)
        self.ndam = config.ndam if self.regime == "lakd" else None
        self.blocks: list[LocalBlock] = []
        self.optimizer: SGD | None = None
        if self.regime == "lakd":
            self.blocks = partition(student, config.plan, self.projections, config.optim)
        else:
            params = student.parameters() + [p for i in sorted(self.projections) for p in self.projections[i].parameters()]
            self.optimizer = SGD(params, config.optim)
        self._train_cache: TeacherCache | None = None
        self._val_cache: TeacherCache | None = None
        self._val_cache_len = -1
        self.step_count = 0

    def _norm(self, images: np.ndarray) -> np.ndarray:
        return normalize(images, self.config.dataset.mean, self.config.dataset.std)

    def step(self, batch: Tensor, labels, targets: TeacherTargets | None, lr: float) -> StepReport:
        cfg = self.config
        if self.regime == "lakd":
            rep = sdm_step(self.blocks, self.student, cfg.plan, targets, batch, labels, cfg.weights,
                           self.projections, self.ndam, lr)
        else:
            rep = end_to_end_step(self.student, self.optimizer, self.regime, batch, labels, cfg.weights, targets,
                                  cfg.plan.align_at if self.regime != "scratch" else (), self.projections,
                                  self.ndam, lr, cfg.plan)
        self.step_count += 1
        return rep

    def train_epoch(self, train: Dataset, epoch: int, total_steps: int) -> dict:
        cfg = self.config
        if self.teacher is not None and not cfg.dataset.augment and self._train_cache is None:
            self._train_cache = TeacherCache(self.teacher, self._norm(train.images), self.mapping)
        sums = {"total": 0.0, "hard": 0.0, "attention": 0.0, "feature": 0.0}
        block_sums: list[float] = []
        peak = peak_bytes = 0
        n_steps = 0
        for b in batch_iter(train, min(cfg.batch_size, len(train)), epoch_seed(cfg.dataset.shuffle_seed, epoch),
                            cfg.dataset.augment):
            x = Tensor(self._norm(b.images.data))
            targets = None
            if self.teacher is not None:
                if self._train_cache is not None:
                    targets = self._train_cache.targets(b.indices)
                else:
                    targets = compute_targets(self.teacher, x, self.mapping)
            lr = cfg.optim.lr if cfg.lr_schedule == "constant" else linear_decay(cfg.optim.lr, self.step_count, total_steps)
            rep = self.step(x, b.labels, targets, lr)
            sums["total"] += float(np.sum(rep.block_losses))
            for key, val in (("hard", rep.hard), ("attention", rep.attention)):
                if not np.isnan(val):
                    sums[key] += val
            sums["feature"] += float(np.sum(list(rep.feature.values()))) if rep.feature else 0.0
            if len(block_sums) < len(rep.block_losses):
                block_sums += [0.0] * (len(rep.block_losses) - len(block_sums))
            for i, v in enumerate(rep.block_losses):
                block_sums[i] += v
            peak = max(peak, rep.peak_retained)
            peak_bytes = max(peak_bytes, rep.peak_bytes)
            n_steps += 1
        return {
            "lr": lr,
            "loss_total": sums["total"] / n_steps,
            "loss_hard": sums["hard"] / n_steps,
            "loss_attention": sums["attention"] / n_steps,
            "loss_feature": sums["feature"] / n_steps,
            "block_losses": [v / n_steps for v in block_sums],
            "peak_retained": peak,
            "peak_bytes": peak_bytes,
        }

    def evaluate(self, ds: Dataset, with_cka: bool = False) -> dict:
        return evaluate(self.student, ds, self.config, teacher=self.teacher, mapping=self.mapping,
                        projections=self.projections, with_cka=with_cka, cache=self._val_cache_for(ds))

    def _val_cache_for(self, ds: Dataset) -> TeacherCache | None:
        if self.teacher is None:
            return None
        if self._val_cache is None or self._val_cache_len != len(ds):
            self._val_cache = TeacherCache(self.teacher, self._norm(ds.images), self.mapping)
            self._val_cache_len = len(ds)
        return self._val_cache

    def fit(self, train: Dataset, val: Dataset, epochs: int | None = None) -> RunRecord:
        cfg = self.config
        epochs = epochs or cfg.epochs
        steps_per_epoch = -(-len(train) // min(cfg.batch_size, len(train)))
        total = epochs * steps_per_epoch
        record = RunRecord(config_hash=cfg.hash(), config=cfg.to_dict())
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            row = {"epoch": epoch, **self.train_epoch(train, epoch, total)}
            last = epoch == epochs
            ev = self.evaluate(val, with_cka=last and cfg.eval_cka)
            row.update(val_top1=ev["top1"], val_top5=ev["top5"], ek=ev["ek"], layer_l2=ev["layer_l2"])
            row["seconds"] = time.perf_counter() - t0
            record.rows.append(row)
            logger.info("epoch %d loss %.4f top1 %.4f ek %s", epoch, row["loss_total"], row["val_top1"], row["ek"])
            if last and ev.get("cka") is not None:
                record.cka = ev["cka"].tolist()
                record.cka_rows, record.cka_cols = ev["cka_rows"], ev["cka_cols"]
        return record


def student_logits(student: TapNet, images: np.ndarray) -> np.ndarray:
    out = []
    with ag.no_grad():
        for s in range(0, len(images), EVAL_BATCH):
            out.append(forward_with_taps(student.with_taps(()), Tensor(images[s:s + EVAL_BATCH]))[0].data)
    return np.concatenate(out)


def evaluate(student: TapNet, ds: Dataset, config: RunConfig, teacher: TapNet | None = None,
             mapping: dict[int, int] | None = None, projections: dict[int, Projection] | None = None,
             with_cka: bool = False, cache: TeacherCache | None = None) -> dict:
    """top-1/top-5 on ``ds``; with a teacher also EK, per-layer L2 at the
    alignment taps and optionally the student x teacher CKA matrix."""
    images = normalize(ds.images, config.dataset.mean, config.dataset.std)
    mapping = mapping or {}
    projections = projections or {}
    align = sorted(mapping)
    s_view = student.with_taps(tuple(range(1, student.depth + 1)) if with_cka else align)
    logits, l2_sums, s_acts = [], np.zeros(len(align)), {i: [] for i in s_view.tap_indices}
    if teacher is not None and cache is None:
        cache = TeacherCache(teacher, images, mapping)
    with ag.no_grad():
        for s in range(0, len(images), EVAL_BATCH):
            idx = np.arange(s, min(s + EVAL_BATCH, len(images)))
            z, taps = forward_with_taps(s_view, Tensor(images[idx]))
            logits.append(z.data)
            if with_cka:
                for i in s_acts:
                    s_acts[i].append(taps[i].data.reshape(len(idx), -1))
            if cache is not None and align:
                tgt = cache.targets(idx)
                proj = [projections[i](taps[i]) if i in projections else taps[i] for i in align]
                l2 = layer_l2_report([tgt.feats[i] for i in align], proj)
                l2_sums += np.asarray(l2) * len(idx)
    logits = np.concatenate(logits)
    k = ds.num_classes
    result = {
        "logits": logits,
        "top1": topk_accuracy(logits, ds.labels, 1),
        "top5": topk_accuracy(logits, ds.labels, min(5, k)),
        "ek": None,
        "layer_l2": (l2_sums / len(images)).tolist() if cache is not None and align else [],
    }
    if teacher is not None:
        log = PredictionLog(predictions(cache.logits), predictions(logits), ds.labels)
        try:
            result["ek"] = ek_metric(log)
        except ContractError:
            result["ek"] = None
        if with_cka:
            t_acts = _teacher_acts(teacher, images)
            rows = sorted(s_acts)
            cols = sorted(t_acts)
            result["cka"] = cka_matrix([np.concatenate(s_acts[i]) for i in rows], [t_acts[j] for j in cols])
            result["cka_rows"], result["cka_cols"] = rows, cols
    return result


def _teacher_acts(teacher: TapNet, images: np.ndarray) -> dict[int, np.ndarray]:
    view = teacher.with_taps(tuple(range(1, teacher.depth + 1)))
    acts = {i: [] for i in view.tap_indices}
    with ag.no_grad():
        for s in range(0, len(images), EVAL_BATCH):
            _, taps = forward_with_taps(view, Tensor(images[s:s + EVAL_BATCH]))
            for i in acts:
                acts[i].append(taps[i].data.reshape(taps[i].shape[0], -1))
    return {i: np.concatenate(v) for i, v in acts.items()}


def run(config: RunConfig, train: Dataset, val: Dataset, student: TapNet | None = None,
        teacher: TapNet | None = None) -> tuple[RunRecord, Trainer]:
    trainer = Trainer(config, student, teacher, num_classes=train.num_classes)
    return trainer.fit(train, val), trainer
