"""Small normalization-free residual conv nets with exposed tap points.

Layout for ``depth`` feature units split into up to three stages::

    unit 1            conv-relu stem          (width,   H,   W)
    stage starts      downsample block        (2x channels, H/2, W/2)
    everything else   residual block
    head              global-pool -> classifier

Unit indices are 1-based, so a depth-9 net has stage ends at 3, 6, 9 just as
a ResNet-20 has three stages of three blocks.  The head is not a tappable
unit; ``taps[depth]`` is the last spatial map before pooling.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CheckpointError, ConfigError, DimensionError

UNIT_KINDS = ("conv-relu", "residual-block", "downsample", "global-pool", "classifier")
RESIDUAL_SCALE = 0.5
# Variance gain of the last conv in each residual branch.  Small, so every
# block starts close to its shortcut; keeps normalization-free nets trainable
# at lr 0.05 without zeroing any gradient path.
BRANCH_GAIN = 0.2
MAGIC = b"LAKD"
FORMAT_VERSION = 1


def stage_sizes(depth: int) -> list[int]:
    n_stages = min(3, depth)
    return [depth // n_stages + (1 if i < depth % n_stages else 0) for i in range(n_stages)]


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


@dataclass
class LayerUnit:
    kind: str
    index: int
    params: dict[str, Tensor] = field(default_factory=dict)
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output, pre-activation before the final relu)."""
        p = self.params
        if self.kind == "conv-relu":
            pre = ag.conv2d(x, p["conv.weight"], 1, 1) + p["conv.bias"]
            return ag.relu(pre), pre
        h = ag.relu(ag.conv2d(x, p["conv1.weight"], self.stride, 1) + p["conv1.bias"])
        h = ag.conv2d(h, p["conv2.weight"], 1, 1) + p["conv2.bias"]
        if self.kind == "downsample":
            shortcut = ag.conv2d(x, p["shortcut.weight"], self.stride, 0) + p["shortcut.bias"]
        else:
            shortcut = x
        pre = shortcut + ag.scale(h, RESIDUAL_SCALE)
        return ag.relu(pre), pre

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]


class TapNet:
    """Feature units plus a pooled linear head; ``tap_indices`` selects which
    unit outputs ``forward_with_taps`` returns."""

    def __init__(self, units: list[LayerUnit], fc_weight: Tensor, fc_bias: Tensor,
                 tap_indices=None, input_size: int | None = None, frozen: bool = False):
        self.units = units
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        self.input_size = input_size
        self.frozen = False
        self.tap_indices = tuple(range(1, self.depth + 1)) if tap_indices is None else tuple(tap_indices)
        self._check_taps(self.tap_indices)
        if frozen:
            self.freeze()

    @property
    def depth(self) -> int:
        return len(self.units)

    @property
    def width(self) -> int:
        return self.units[0].out_channels

    @property
    def num_classes(self) -> int:
        return self.fc_weight.shape[1]

    def _check_taps(self, taps) -> None:
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap indices must be strictly increasing, got {list(taps)}")
        if taps and (taps[0] < 1 or taps[-1] > self.depth):
            raise ConfigError(f"tap indices must lie in [1, {self.depth}], got {list(taps)}")

    def with_taps(self, taps) -> "TapNet":
        """Shallow view sharing parameters but exposing different taps."""
        view = copy.copy(self)
        view.tap_indices = tuple(taps)
        view._check_taps(view.tap_indices)
        return view

    def stage_ends(self) -> list[int]:
        return [int(e) for e in np.cumsum(stage_sizes(self.depth))]

    def stage_of(self, index: int) -> int:
        """0-based stage that contains unit ``index``."""
        for s, end in enumerate(self.stage_ends()):
            if index <= end:
                return s
        raise ConfigError(f"unit index {index} beyond depth {self.depth}")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for u in self.units:
            for key in sorted(u.params):
                out.append((f"unit{u.index}.{key}", u.params[key]))
        out.append(("head.fc.weight", self.fc_weight))
        out.append(("head.fc.bias", self.fc_bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def unit_parameters(self, first: int, last: int, include_head: bool = False) -> list[Tensor]:
        """Parameters of units ``first..last`` (1-based, inclusive)."""
        ps = [u.params[k] for u in self.units[first - 1:last] for k in sorted(u.params)]
        if include_head:
            ps += [self.fc_weight, self.fc_bias]
        return ps

    def freeze(self) -> "TapNet":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def clone(self) -> "TapNet":
        return copy.deepcopy(self)

    def check_input(self, batch: Tensor) -> None:
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise DimensionError(f"expected a [N,3,H,W] batch, got shape {batch.shape}")
        if self.input_size is not None and batch.shape[2:] != (self.input_size, self.input_size):
            raise DimensionError(
                f"input spatial size {batch.shape[2:]} does not match network input "
                f"{(self.input_size, self.input_size)}")

    def run_units(self, x: Tensor, first: int, last: int, taps: dict | None = None,
                  preacts: dict | None = None) -> Tensor:
        """Run units ``first..last``; fill ``taps`` (and optionally the matching
        pre-activations) for configured tap indices in that range."""
        for u in self.units[first - 1:last]:
            x, pre = u.forward(x)
            if u.index in self.tap_indices:
                if taps is not None:
                    taps[u.index] = x
                if preacts is not None:
                    preacts[u.index] = pre
        return x

    def head(self, features: Tensor) -> Tensor:
        return ag.global_avg_pool(features) @ self.fc_weight + self.fc_bias

    def __call__(self, batch: Tensor) -> Tensor:
        return forward_with_taps(self, batch)[0]


def build_tapnet(depth: int, width: int, num_classes: int, seed: int,
                 input_size: int | None = None, tap_indices=None, frozen: bool = False) -> TapNet:
    if depth < 2:
        raise ConfigError(f"depth must be >= 2, got {depth}")
    if width < 1 or num_classes < 1:
        raise ConfigError("width and num_classes must be positive")
    sizes = stage_sizes(depth)
    if input_size is not None and input_size % (2 ** (len(sizes) - 1)):
        raise ConfigError(f"input size {input_size} not divisible by {2 ** (len(sizes) - 1)}")
    rng = np.random.default_rng(seed)
    units: list[LayerUnit] = []
    ch = width
    index = 1
    for s, n in enumerate(sizes):
        for j in range(n):
            if index == 1:
                u = LayerUnit("conv-relu", 1, in_channels=3, out_channels=width)
                u.params["conv.weight"] = ag.parameter(_kaiming(rng, (width, 3, 3, 3), 27))
                u.params["conv.bias"] = ag.parameter(np.zeros((1, width, 1, 1)))
            else:
                down = j == 0 and s > 0
                cin, cout = ch, ch * 2 if down else ch
                u = LayerUnit("downsample" if down else "residual-block", index,
                              in_channels=cin, out_channels=cout, stride=2 if down else 1)
                u.params["conv1.weight"] = ag.parameter(_kaiming(rng, (cout, cin, 3, 3), cin * 9))
                u.params["conv1.bias"] = ag.parameter(np.zeros((1, cout, 1, 1)))
                u.params["conv2.weight"] = ag.parameter(_kaiming(rng, (cout, cout, 3, 3), cout * 9, BRANCH_GAIN))
                u.params["conv2.bias"] = ag.parameter(np.zeros((1, cout, 1, 1)))
                if down:
                    u.params["shortcut.weight"] = ag.parameter(_kaiming(rng, (cout, cin, 1, 1), cin, 1.0))
                    u.params["shortcut.bias"] = ag.parameter(np.zeros((1, cout, 1, 1)))
                ch = cout
            units.append(u)
            index += 1
    fc_w = ag.parameter(_kaiming(rng, (ch, num_classes), ch, 1.0))
    fc_b = ag.parameter(np.zeros((num_classes,)))
    for u in units:
        for name, p in u.params.items():
            p.name = f"unit{u.index}.{name}"
    fc_w.name, fc_b.name = "head.fc.weight", "head.fc.bias"
    return TapNet(units, fc_w, fc_b, tap_indices, input_size, frozen)


def forward_with_taps(net: TapNet, batch: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
    """Logits (pre-softmax) plus ``{unit index: output}`` for every configured tap."""
    net.check_input(batch)
    taps: dict[int, Tensor] = {}
    feats = net.run_units(batch, 1, net.depth, taps)
    return net.head(feats), taps


def expected_tap_shapes(depth: int, width: int, input_size: int) -> dict[int, tuple[int, int, int]]:
    """(C, H, W) of every unit output, from the conv arithmetic alone."""
    shapes = {}
    index, ch, hw = 1, width, input_size
    for s, n in enumerate(stage_sizes(depth)):
        for j in range(n):
            if index > 1 and j == 0 and s > 0:
                ch *= 2
                hw = (hw + 2 - 3) // 2 + 1
            shapes[index] = (ch, hw, hw)
            index += 1
    return shapes


class Projection:
    """Maps a student tap onto a teacher tap's [C, H, W]: 1x1 conv for channels,
    then average pooling (student larger) or nearest upsampling (student smaller).
    Identity when the shapes already agree."""

    def __init__(self, student_shape, teacher_shape, rng: np.random.Generator | None = None):
        cs, hs, ws = student_shape[-3:]
        ct, ht, wt = teacher_shape[-3:]
        self.identity = (cs, hs, ws) == (ct, ht, wt)
        self.weight = self.bias = None
        self.pool = self.upsample = 1
        if self.identity:
            return
        if hs % ht == 0 and ws % wt == 0 and hs // ht == ws // wt:
            self.pool = hs // ht
        elif ht % hs == 0 and wt % ws == 0 and ht // hs == wt // ws:
            self.upsample = ht // hs
        else:
            raise DimensionError(f"cannot reconcile spatial sizes {(hs, ws)} -> {(ht, wt)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = ag.parameter(_kaiming(rng, (ct, cs, 1, 1), cs, 1.0))
        self.bias = ag.parameter(np.zeros((1, ct, 1, 1)))

    def parameters(self) -> list[Tensor]:
        return [] if self.identity else [self.weight, self.bias]

    def __call__(self, student_tap: Tensor) -> Tensor:
        if self.identity:
            return student_tap
        y = ag.conv2d(student_tap, self.weight, 1, 0) + self.bias
        if self.pool > 1:
            y = ag.avg_pool2d(y, self.pool, self.pool)
        elif self.upsample > 1:
            y = ag.upsample_nearest(y, self.upsample)
        return y


def project_features(student_tap: Tensor, teacher_tap: Tensor, projection: Projection | None = None) -> Tensor:
    if projection is None:
        projection = Projection(student_tap.shape, teacher_tap.shape)
    out = projection(student_tap)
    if out.shape[1:] != teacher_tap.shape[1:]:
        raise DimensionError(f"projected shape {out.shape} does not match teacher tap {teacher_tap.shape}")
    return out


# checkpoints -----------------------------------------------------------------------

def save_checkpoint(net: TapNet, path) -> None:
    """Binary container: b"LAKD", u32 version, u32 unit count, then one record
    per parameter (u32 name length, utf-8 name, u32 rank, u64 dims, f64 payload),
    all little-endian."""
    records = list(net.named_parameters())
    if net.input_size is not None:
        records.append(("meta.input_size", Tensor(np.array([float(net.input_size)]))))
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, net.depth))
        for name, t in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, n_units = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos, arrays = 12, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated record") from e
    return n_units, arrays


def load_checkpoint(path, tap_indices=None, frozen: bool = False) -> TapNet:
    n_units, arrays = read_checkpoint(path)
    try:
        width = arrays["unit1.conv.weight"].shape[0]
        num_classes = arrays["head.fc.weight"].shape[1]
    except KeyError as e:
        raise CheckpointError(f"{path}: missing parameter {e}") from e
    input_size = int(arrays.pop("meta.input_size")[0]) if "meta.input_size" in arrays else None
    net = build_tapnet(n_units, width, num_classes, seed=0, input_size=input_size, tap_indices=tap_indices)
    expected = dict(net.named_parameters())
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"{path}: parameter set mismatch ({missing[:4]}...)")
    for name, t in expected.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    if frozen:
        net.freeze()
    return net
