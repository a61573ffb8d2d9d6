"""Run configuration: dataclasses, JSON round-trip, canonical hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .losses import LossWeights
from .ndam import NdamSettings
from .optim import OptimConfig
from .sdm import PartitionPlan

REGIMES = ("scratch", "traditional-kd", "attention-kd", "lakd")
DISTILL_REGIMES = ("traditional-kd", "attention-kd", "lakd")


@dataclass(frozen=True)
class NetSpec:
    depth: int = 9
    width: int = 8
    seed: int = 0
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    student: NetSpec = field(default_factory=NetSpec)
    teacher: NetSpec = field(default_factory=lambda: NetSpec(depth=9, width=16))
    regime: str = "lakd"
    weights: LossWeights = field(default_factory=LossWeights)
    plan: PartitionPlan = field(default_factory=lambda: PartitionPlan((1, 4), (1, 4, 9)))
    ndam: NdamSettings = field(default_factory=NdamSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 64
    lr_schedule: str = "linear"
    # Teacher unit paired with each student alignment index; empty means
    # "last unit of the teacher stage containing the student index".
    teacher_align: tuple[int, ...] = ()
    eval_cka: bool = True
    output_dir: str | None = None

    def validate(self, check_paths: bool = True) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError(f"lr_schedule: must be 'linear' or 'constant', got {self.lr_schedule!r}")
        if self.student.depth < 2 or self.student.width < 1:
            raise ConfigError("student: depth must be >= 2 and width >= 1")
        if self.regime == "lakd":
            self.plan.validate(self.student.depth)
        elif self.regime != "scratch" and self.plan.align_at:
            self.plan.validate(self.student.depth)
        if self.teacher_align and len(self.teacher_align) != len(self.plan.align_at):
            raise ConfigError("teacher_align: must pair one teacher unit with every align_at index")
        if check_paths:
            if self.regime in DISTILL_REGIMES:
                if not self.teacher.checkpoint:
                    raise ConfigError(f"teacher.checkpoint: required for regime {self.regime!r}")
                if not Path(self.teacher.checkpoint).exists():
                    raise ConfigError(f"teacher.checkpoint: {self.teacher.checkpoint} does not exist")
            if self.student.checkpoint and not Path(self.student.checkpoint).exists():
                raise ConfigError(f"student.checkpoint: {self.student.checkpoint} does not exist")
            if self.dataset.source != "synthetic" and not Path(self.dataset.source).exists():
                raise ConfigError(f"dataset.source: {self.dataset.source} does not exist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        d["plan"] = self.plan.to_dict()
        d["teacher_align"] = list(self.teacher_align)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        """sha256 of the canonical JSON form, ignoring ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sub = {
            "dataset": DatasetSpec,
            "student": NetSpec,
            "teacher": NetSpec,
            "weights": LossWeights,
            "plan": PartitionPlan,
            "ndam": NdamSettings,
            "optim": OptimConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in sub and isinstance(v, dict):
                sub_known = {f.name for f in fields(sub[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ConfigError(f"{k}: unknown fields {sorted(bad)}")
                try:
                    kwargs[k] = sub[k](**v)
                except TypeError as e:
                    raise ConfigError(f"{k}: {e}") from e
            elif k == "teacher_align":
                kwargs[k] = tuple(v)
            else:
                kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    def with_updates(self, **changes) -> "RunConfig":
        return replace(self, **changes)
