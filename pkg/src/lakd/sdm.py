"""Separation-decoupling: gradient-isolated local blocks of the student.

The student is cut after each index in ``detach_after``.  A block's output is
detached before it feeds the next block, so a loss attached to block j can
never move parameters in block i < j.  Each block owns its optimizer state.

A step runs block by block: forward the block, form its local loss, run its
backward at once, then forward the next block from the detached output.
Forward values are identical to an uncut forward, but each block's saved
activations are released before the next block starts, which is where the
activation-memory saving comes from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

from . import autograd as ag
from .autograd import Tape, Tensor
from .errors import ConfigError, DimensionError
from .losses import LossWeights, attention_loss, feature_loss, hard_loss, total_loss_lakd
from .models import Projection, TapNet
from .ndam import NdamSettings, apply_weighting, build_weight
from .optim import SGD, OptimConfig


@dataclass(frozen=True)
class PartitionPlan:
    detach_after: tuple[int, ...] = ()
    align_at: tuple[int, ...] = ()
    hard_in_terminal: bool = True
    attention_in_terminal: bool = True
    # Whether align taps inside the terminal block contribute a feature term.
    terminal_feature: bool = True

    def __post_init__(self):
        object.__setattr__(self, "detach_after", tuple(int(i) for i in self.detach_after))
        object.__setattr__(self, "align_at", tuple(int(i) for i in self.align_at))
        for name in ("detach_after", "align_at"):
            seq = getattr(self, name)
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {list(seq)}")

    def validate(self, depth: int) -> None:
        if self.detach_after and (self.detach_after[0] < 1 or self.detach_after[-1] >= depth):
            raise ConfigError(
                f"detach_after must lie in [1, {depth}); detaching at the final unit would orphan "
                f"the classifier (got {list(self.detach_after)})")
        if self.align_at and (self.align_at[0] < 1 or self.align_at[-1] > depth):
            raise ConfigError(f"align_at must lie in [1, {depth}], got {list(self.align_at)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detach_after"] = list(self.detach_after)
        d["align_at"] = list(self.align_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(**d)


def plan_from_location(location: Sequence[int], detach: bool = True, **flags) -> PartitionPlan:
    """Align at every location; with ``detach``, also cut after every
    location except the last (the terminal block ends at the classifier)."""
    location = tuple(location)
    return PartitionPlan(detach_after=location[:-1] if detach else (), align_at=location, **flags)


def remap_alignment(base_align: Sequence[int], mode: str = "standard") -> list[int]:
    """[n, 2n, 3n] -> itself ("standard") or [1, n+1, 3n] ("forward-shifted")."""
    base = [int(i) for i in base_align]
    if len(base) != 3 or base[0] < 1 or base != [base[0], 2 * base[0], 3 * base[0]]:
        raise ConfigError(f"base alignment must have the form [n, 2n, 3n], got {base}")
    n = base[0]
    if mode == "standard":
        return base
    if mode == "forward-shifted":
        return [1, n + 1, 3 * n]
    raise ConfigError(f"unknown remap mode {mode!r}")


@dataclass
class LocalBlock:
    first: int
    last: int
    terminal: bool
    align: tuple[int, ...]
    params: list[Tensor]
    optimizer: SGD

    @property
    def unit_range(self) -> range:
        return range(self.first, self.last + 1)


def partition(student: TapNet, plan: PartitionPlan, projections: dict[int, Projection] | None = None,
              optim: OptimConfig = OptimConfig()) -> list[LocalBlock]:
    plan.validate(student.depth)
    projections = projections or {}
    bounds = [0, *plan.detach_after, student.depth]
    blocks = []
    for b, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        first, last = lo + 1, hi
        terminal = b == len(bounds) - 2
        align = tuple(i for i in plan.align_at if first <= i <= last)
        if terminal and not plan.terminal_feature:
            align = ()
        if not terminal and not align:
            raise ConfigError(f"block {b} (units {first}..{last}) has no alignment tap, so no local loss")
        params = student.unit_parameters(first, last, include_head=terminal)
        for i in align:
            if i in projections:
                params += projections[i].parameters()
        blocks.append(LocalBlock(first, last, terminal, align, params, SGD(params, optim)))
    return blocks


@dataclass
class TeacherTargets:
    """Teacher quantities for one batch, keyed by *student* alignment index."""
    feats: dict[int, Tensor]
    final: Tensor | None = None
    ndam_source: dict[int, Tensor] = field(default_factory=dict)
    logits: Tensor | None = None


def feature_terms(student_taps: dict[int, Tensor], align: Sequence[int], targets: TeacherTargets,
                  projections: dict[int, Projection], ndam: NdamSettings | None,
                  block_id: int | None = None) -> dict[int, Tensor]:
    """Per-index feature loss, after projection and optional NDAM weighting."""
    out = {}
    for i in align:
        teacher = targets.feats[i]
        proj = projections.get(i)
        s = proj(student_taps[i]) if proj is not None else student_taps[i]
        if s.shape != teacher.shape:
            where = f"block {block_id}, " if block_id is not None else ""
            raise DimensionError(f"{where}tap {i}: student {s.shape} vs teacher {teacher.shape} after projection")
        if ndam is not None and ndam.enabled:
            w = build_weight(targets.ndam_source.get(i, teacher), ndam.alpha_pool, ndam.beta_pool, ndam.use_abs)
            s = apply_weighting(s, w)
            if ndam.apply_to == "both":
                teacher = apply_weighting(teacher, w)
        out[i] = feature_loss(teacher, s)
    return out


def _sum(terms) -> Tensor | float:
    total = 0.0
    for t in terms:
        total = t if isinstance(total, float) else total + t
    return total


@dataclass
class StepReport:
    block_losses: list[float]
    hard: float = float("nan")
    attention: float = float("nan")
    feature: dict[int, float] = field(default_factory=dict)
    logits: Tensor | None = None
    peak_retained: int = 0
    peak_bytes: int = 0


def terminal_loss(weights: LossWeights, plan: PartitionPlan, logits: Tensor, final_feats: Tensor,
                  labels, targets: TeacherTargets, feat: Tensor | float, report: StepReport):
    hard = hard_loss(logits, labels) if plan.hard_in_terminal else 0.0
    att = 0.0
    if plan.attention_in_terminal and targets.final is not None:
        att = attention_loss(targets.final, final_feats)
    report.hard = float(hard.data) if isinstance(hard, Tensor) else float("nan")
    report.attention = float(att.data) if isinstance(att, Tensor) else float("nan")
    return total_loss_lakd(weights, hard, att, feat)


def sdm_step(blocks: list[LocalBlock], student: TapNet, plan: PartitionPlan, targets: TeacherTargets,
             batch: Tensor, labels, weights: LossWeights, projections: dict[int, Projection] | None = None,
             ndam: NdamSettings | None = None, lr: float | None = None, update: bool = True) -> StepReport:
    """One local-learning step; returns per-block losses in block order."""
    projections = projections or {}
    student.check_input(batch)
    report = StepReport(block_losses=[])
    with Tape() as tape:
        x = batch
        for b, block in enumerate(blocks):
            taps: dict[int, Tensor] = {}
            view = student.with_taps(block.align) if block.align else student.with_taps(())
            out = view.run_units(x, block.first, block.last, taps)
            feats = {}
            if weights.beta != 0 and block.align:
                feats = feature_terms(taps, block.align, targets, projections, ndam, b)
            report.feature.update({i: float(f.data) for i, f in feats.items()})
            feat = _sum(feats.values())
            if block.terminal:
                logits = student.head(out)
                loss = terminal_loss(weights, plan, logits, out, labels, targets, feat, report)
                report.logits = ag.detach(logits)
            else:
                loss = weights.beta * feat
            report.block_losses.append(float(loss.data) if isinstance(loss, Tensor) else float(loss))
            if isinstance(loss, Tensor) and loss.node is not None:
                loss.backward()
            x = ag.detach(out)
        tape.release()
    report.peak_retained = tape.peak_retained
    report.peak_bytes = tape.peak_bytes
    if update:
        for block in blocks:
            block.optimizer.step(lr)
            block.optimizer.zero_grad()
    return report
