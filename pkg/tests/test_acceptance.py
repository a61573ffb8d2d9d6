"""Acceptance suite: one test per criterion, each printed as a PASS/FAIL line
in the terminal summary (see conftest).  Criterion 8 and 9 train real models
and take several minutes; everything else runs in seconds."""

import time
from dataclasses import replace

import numpy as np
import pytest

from lakd import autograd as ag
from lakd.autograd import Tape, Tensor
from lakd.cli import cmd_ablate, cmd_train, ndam_cells
from lakd.config import NetSpec, RunConfig
from lakd.data import DatasetSpec, load_cifar_binary, load_dataset, synth_generate, write_cifar_binary
from lakd.gradcheck import numeric_grad, relative_error
from lakd.losses import LossWeights, attention_loss, feature_loss, soft_loss
from lakd.metrics import PredictionLog, cka_linear, ek_metric, memory_report
from lakd.models import build_tapnet, forward_with_taps, load_checkpoint, save_checkpoint
from lakd.ndam import NdamSettings, channel_sum, pool_combine
from lakd.optim import SGD, linear_decay
from lakd.sdm import PartitionPlan, StepReport, _sum, feature_terms, partition, plan_from_location, sdm_step, \
    terminal_loss
from lakd.train import build_projections, compute_targets, end_to_end_step, run, teacher_index_map

import oracles

SIZE = 12


def toy_setup(plan, seed, n=4, width=4, teacher_width=8):
    rng = np.random.default_rng(seed)
    student = build_tapnet(9, width, 3, seed=seed, input_size=SIZE)
    teacher = build_tapnet(9, teacher_width, 3, seed=seed + 1000, input_size=SIZE, frozen=True)
    x = Tensor(rng.normal(size=(n, 3, SIZE, SIZE)))
    y = rng.integers(0, 3, n)
    mapping = teacher_index_map(student, teacher, plan.align_at)
    proj = build_projections(student, teacher, mapping, seed)
    return student, x, y, proj, compute_targets(teacher, x, mapping)


# 1 ----------------------------------------------------------------------------------------

def random_net(rng):
    """A seeded conv/relu/pool/linear stack; returns (loss closure, params)."""
    c_in, side = int(rng.integers(1, 3)), int(rng.integers(5, 8))
    x = Tensor(rng.normal(size=(2, c_in, side, side)))
    layers, params, c, h = [], [], c_in, side
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "conv", "maxpool", "avgpool"])
        if kind == "conv" or h < 3:
            k = int(rng.choice([1, 3])) if h >= 3 else 1
            s, p = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
            cout = int(rng.integers(1, 4))
            w = ag.parameter(rng.normal(size=(cout, c, k, k)) * np.sqrt(2.0 / (c * k * k)))
            params.append(w)
            layers.append(lambda t, w=w, s=s, p=p: ag.relu(ag.conv2d(t, w, s, p)))
            c, h = cout, (h + 2 * p - k) // s + 1
        elif kind == "maxpool":
            layers.append(lambda t: ag.max_pool2d(t, 2, 2))
            h = h // 2
        else:
            layers.append(lambda t: ag.avg_pool2d(t, 2, 1))
            h = h - 1
    # fan-in scaling keeps the softmax out of saturation, where gradients
    # shrink below what central differences can resolve
    wl = ag.parameter(rng.normal(size=(c * h * h, 3)) / np.sqrt(c * h * h))
    bl = ag.parameter(rng.normal(size=(3,)))
    params += [wl, bl]
    target = Tensor(np.eye(3)[rng.integers(0, 3, 2)])

    def loss():
        t = x
        for f in layers:
            t = f(t)
        z = ag.reshape(t, (2, -1)) @ wl + bl
        return -ag.sum(ag.log_softmax(z, axis=1) * target)

    return loss, params


@pytest.mark.criterion(1, "autograd matches finite differences on 50 random nets")
def test_autograd_soundness(record_property):
    t0, worst = time.perf_counter(), 0.0
    for seed in range(50):
        loss, params = random_net(np.random.default_rng(seed))
        loss().backward()
        for p in params:
            num = numeric_grad(loss, p)
            worst = max(worst, float(relative_error(p.grad, num, 1e-6).max()))
    took = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.2e}, {took:.1f}s")
    assert worst < 1e-4
    assert took < 120


# 2 ----------------------------------------------------------------------------------------

def random_plan(rng):
    cuts = sorted(rng.choice(np.arange(1, 9), size=int(rng.integers(1, 5)), replace=False).tolist())
    extra = rng.choice(np.arange(1, 10), size=int(rng.integers(0, 3)), replace=False).tolist()
    return PartitionPlan(tuple(cuts), tuple(sorted(set(cuts) | set(extra) | {9})))


def block_losses(student, plan, blocks, x, y, proj, targets, weights):
    """Forward every block from its detached input and return one loss per block."""
    losses, inp = [], x
    for b, block in enumerate(blocks):
        taps = {}
        out = student.with_taps(block.align).run_units(inp, block.first, block.last, taps)
        feat = _sum(feature_terms(taps, block.align, targets, proj, None, b).values())
        if block.terminal:
            losses.append(terminal_loss(weights, plan, student.head(out), out, y, targets, feat, StepReport([])))
        else:
            losses.append(ag.scale(feat, weights.beta))
        inp = ag.detach(out)
    return losses


@pytest.mark.criterion(2, "later-block losses give exactly zero gradient to earlier blocks")
def test_gradient_isolation(record_property):
    t0, checked = time.perf_counter(), 0
    weights = LossWeights(0.5, 1e-3)
    for seed in range(20):
        plan = random_plan(np.random.default_rng(seed))
        student, x, y, proj, targets = toy_setup(plan, seed)
        blocks = partition(student, plan, proj)
        with Tape():
            losses = block_losses(student, plan, blocks, x, y, proj, targets, weights)
            for j, loss in enumerate(losses):
                for p in student.parameters() + [q for pr in proj.values() for q in pr.parameters()]:
                    p.grad = None
                loss.backward()
                for i in range(j):
                    for p in blocks[i].params:
                        assert p.grad is None or not np.any(p.grad), f"plan {plan}: block {j} reached block {i}"
                        checked += 1
                if not blocks[j].terminal:
                    for p in blocks[j].params:
                        assert p.grad is not None and np.any(p.grad), f"plan {plan}: block {j} own gradient is zero"
    took = time.perf_counter() - t0
    record_property("detail", f"{checked} cross-block parameter checks, {took:.1f}s")
    assert took < 60


# 3 ----------------------------------------------------------------------------------------

@pytest.mark.criterion(3, "partitioned forward is bitwise identical to the plain forward")
def test_forward_equivalence():
    rng = np.random.default_rng(3)
    plans = [plan_from_location([1, 4, 9]), plan_from_location([3, 6, 9]), PartitionPlan((2, 5, 7), (2, 5, 7, 9))]
    student, _, _, proj, _ = toy_setup(plans[0], 0)
    teacher = build_tapnet(9, 8, 3, seed=1000, input_size=SIZE, frozen=True)
    for b in range(100):
        plan = plans[b % len(plans)]
        mapping = teacher_index_map(student, teacher, plan.align_at)
        proj = build_projections(student, teacher, mapping, 0)
        x = Tensor(rng.normal(size=(int(rng.integers(1, 6)), 3, SIZE, SIZE)))
        y = rng.integers(0, 3, x.shape[0])
        ref = forward_with_taps(student, x)[0].data
        rep = sdm_step(partition(student, plan, proj), student, plan, compute_targets(teacher, x, mapping), x, y,
                       LossWeights(), proj, NdamSettings(), update=False)
        assert rep.logits.data.tobytes() == ref.tobytes()
        for p in student.parameters():
            p.grad = None


# 4 ----------------------------------------------------------------------------------------

@pytest.mark.criterion(4, "zero-detach, zero-beta LAKD follows the end-to-end trajectory bitwise")
def test_degeneracy():
    plan = PartitionPlan((), (3, 6, 9))
    student, x, y, proj, targets = toy_setup(plan, 4, n=8)
    twin, twin_proj = student.clone(), {i: p for i, p in proj.items()}
    weights = LossWeights(0.5, 0.0)
    blocks = partition(student, plan, proj)
    opt = SGD(twin.parameters())
    rng = np.random.default_rng(4)
    for step in range(5):
        lr = linear_decay(0.05, step, 5)
        idx = rng.permutation(8)[:6]
        xb, yb = Tensor(x.data[idx]), y[idx]
        tb = replace(targets, feats={i: Tensor(t.data[idx]) for i, t in targets.feats.items()},
                     final=Tensor(targets.final.data[idx]))
        sdm_step(blocks, student, plan, tb, xb, yb, weights, proj, NdamSettings(), lr)
        end_to_end_step(twin, opt, "attention-kd", xb, yb, weights, tb, plan.align_at, twin_proj, None, lr, plan)
        for p, q in zip(student.parameters(), twin.parameters()):
            assert p.data.tobytes() == q.data.tobytes(), f"diverged at step {step}"


# 5 ----------------------------------------------------------------------------------------

@pytest.mark.criterion(5, "losses and metrics match brute-force oracles on 100+ instances")
def test_oracles(record_property):
    rng = np.random.default_rng(5)
    n_inst = 100
    worst = 0.0

    def close(got, want):
        nonlocal worst
        err = float(np.max(np.abs(np.asarray(got, dtype=float) - np.asarray(want, dtype=float))))
        worst = max(worst, err)
        assert err <= 1e-10

    for _ in range(n_inst):
        n, c, h, w = (int(v) for v in rng.integers(1, 5, 4))
        h, w = h + 2, w + 2
        t, s = rng.normal(size=(n, c, h, w)), rng.normal(size=(n, c, h, w))
        close(feature_loss(Tensor(t), Tensor(s)).data, oracles.feature_loss(t, s))
        s2 = rng.normal(size=(n, int(rng.integers(1, 6)), h, w))
        close(attention_loss(Tensor(t), Tensor(s2)).data, oracles.attention_loss(t, s2))
        k, temp = int(rng.integers(2, 8)), float(rng.uniform(0.5, 8))
        zs, zt = rng.normal(size=(n, k)) * 3, rng.normal(size=(n, k)) * 3
        close(soft_loss(Tensor(zs), Tensor(zt), temp).data, oracles.soft_loss(zs, zt, temp))
        use_abs = bool(rng.integers(0, 2))
        close(channel_sum(Tensor(t), use_abs).data, oracles.channel_sum(t, use_abs))
        f = rng.normal(size=(n, 1, h, w))
        a, b = rng.uniform(0, 1, 2)
        close(pool_combine(Tensor(f), a, b).data, oracles.pool_combine(f, a, b))
        m = int(rng.integers(20, 200))
        labels, tp, sp = rng.integers(0, 4, m), rng.integers(0, 4, m), rng.integers(0, 4, m)
        right, wrong = oracles.ek(tp, sp, labels)
        assert ek_metric(PredictionLog(tp, sp, labels)) == right / wrong
        rows = int(rng.integers(4, 20))
        x, y = rng.normal(size=(rows, int(rng.integers(1, 9)))), rng.normal(size=(rows, int(rng.integers(1, 9))))
        close(cka_linear(x, y), oracles.cka(x, y))
    record_property("detail", f"{n_inst} instances per function, max abs err {worst:.1e}")


# 6 ----------------------------------------------------------------------------------------

@pytest.mark.criterion(6, "CKA self-similarity, orthogonal and isotropic-scale invariance")
def test_cka_invariances():
    rng = np.random.default_rng(6)
    for _ in range(50):
        n, d = int(rng.integers(3, 30)), int(rng.integers(1, 12))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, int(rng.integers(1, 12))))
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        c = float(rng.uniform(0.01, 100)) * rng.choice([-1, 1])
        base = cka_linear(x, y)
        assert abs(cka_linear(x, x) - 1.0) <= 1e-10
        assert abs(cka_linear(x, x @ q) - 1.0) <= 1e-10
        assert abs(cka_linear(x @ q, y) - base) <= 1e-10
        assert abs(cka_linear(x, c * y) - base) <= 1e-10


# 7 ----------------------------------------------------------------------------------------

@pytest.mark.criterion(7, "detached [1,4,9] step retains fewer activations than end-to-end")
def test_memory_direction(record_property):
    plan = plan_from_location([1, 4, 9])
    student, x, y, proj, targets = toy_setup(plan, 7, n=32, width=8, teacher_width=16)
    weights = LossWeights()
    lakd = sdm_step(partition(student, plan, proj), student, plan, targets, x, y, weights, proj, NdamSettings(),
                    update=False)
    twin = student.clone()
    e2e = end_to_end_step(twin, SGD(twin.parameters()), "attention-kd", x, y, weights, targets, plan.align_at,
                          proj, NdamSettings(), update=False, plan=plan)
    rep = memory_report([e2e.peak_retained], [lakd.peak_retained], [e2e.peak_bytes], [lakd.peak_bytes])
    record_property("detail", f"peak {rep.baseline_peak} -> {rep.candidate_peak} activations "
                              f"({100 * rep.reduction:.1f}% fewer, {100 * rep.bytes_reduction:.1f}% fewer bytes)")
    assert lakd.peak_retained < e2e.peak_retained


# 8 and 9 share one teacher -------------------------------------------------------------------

DATA = DatasetSpec()
TEACHER = NetSpec(depth=9, width=16, seed=100)
STUDENT_EPOCHS = 6
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def teacher_ckpt(tmp_path_factory):
    train, val = load_dataset(DATA)
    cfg = RunConfig(dataset=DATA, student=TEACHER, regime="scratch", epochs=6, eval_cka=False)
    rec, trainer = run(cfg, train, val)
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    save_checkpoint(trainer.student, path)
    return path, rec.final["val_top1"]


def student_config(teacher_path, seed, **changes):
    base = RunConfig(dataset=DATA, student=NetSpec(9, 8, seed), teacher=replace(TEACHER, checkpoint=str(teacher_path)),
                     weights=LossWeights(alpha=0.5, beta=1e-3), epochs=STUDENT_EPOCHS, eval_cka=False)
    return replace(base, **changes)


TREND_CELLS = {
    "scratch": dict(regime="scratch"),
    "no-detach [3,6,9]": dict(regime="lakd", plan=plan_from_location([3, 6, 9], detach=False)),
    "detach [3,6,9]": dict(regime="lakd", plan=plan_from_location([3, 6, 9])),
    "detach [1,4,9]": dict(regime="lakd", plan=plan_from_location([1, 4, 9])),
}


@pytest.fixture(scope="module")
def trend(teacher_ckpt):
    path, _ = teacher_ckpt
    train, val = load_dataset(DATA)
    teacher = load_checkpoint(path, frozen=True)
    t0 = time.perf_counter()
    finals = {k: [] for k in TREND_CELLS}
    for seed in SEEDS:
        for name, kw in TREND_CELLS.items():
            rec, _ = run(student_config(path, seed, **kw), train, val, teacher=teacher)
            finals[name].append(rec.final)
    return finals, time.perf_counter() - t0


@pytest.mark.slow
@pytest.mark.criterion(8, "3-seed trend: forward-shifted >= standard - 0.5, detach >= no-detach - 0.5, > scratch")
def test_end_to_end_trend(teacher_ckpt, trend, record_property):
    _, teacher_acc = teacher_ckpt
    finals, took = trend
    mean = {k: 100 * float(np.mean([r["val_top1"] for r in v])) for k, v in finals.items()}
    record_property("detail", f"teacher {100 * teacher_acc:.2f}; " +
                    ", ".join(f"{k} {v:.2f}" for k, v in mean.items()) + f"; students {took:.0f}s")
    assert teacher_acc >= 0.95
    fwd, std, none = mean["detach [1,4,9]"], mean["detach [3,6,9]"], mean["no-detach [3,6,9]"]
    assert fwd >= std - 0.5
    assert std >= none - 0.5 and fwd >= none - 0.5
    assert fwd > mean["scratch"]
    assert took < 15 * 60


@pytest.mark.slow
def test_forward_shift_deep_alignment(trend):
    """Direction only: the forward-shifted plan ends with lower L2 at the
    last alignment layer than the standard plan (3-seed mean)."""
    finals, _ = trend
    deep = {k: float(np.mean([r["layer_l2"][-1] for r in finals[k]])) for k in ("detach [1,4,9]", "detach [3,6,9]")}
    assert deep["detach [1,4,9]"] < deep["detach [3,6,9]"], deep


@pytest.mark.slow
@pytest.mark.criterion(9, "NDAM sweep: five rows with EK and top-1; off row equals bypassed run bitwise")
def test_ndam_ablation(teacher_ckpt, tmp_path, record_property):
    path, _ = teacher_ckpt
    # three epochs: after one, every cell still sits at chance and the table says nothing
    base = student_config(path, 0, regime="lakd", plan=plan_from_location([1, 4, 9]), epochs=3)
    rows = cmd_ablate(ndam_cells(base), tmp_path / "sweep", workers=2)
    assert len(rows) == 5
    for r in rows:
        assert r["status"] == "ok" and r["top1"] is not None and r["ek"] is not None
    assert [(r["abs"], r["alpha"], r["beta"]) for r in rows] == [
        ("off", 0.0, 0.0), ("yes", 0.5, 0.5), ("no", 0.5, 0.5), ("yes", 0.25, 0.75), ("no", 0.25, 0.75)]
    bypass = replace(base, ndam=replace(base.ndam, enabled=False), output_dir=str(tmp_path / "bypass"))
    rec = cmd_train(bypass)
    off = rows[0]
    assert (off["top1"], off["top5"], off["ek"], off["layer_l2"]) == \
        (rec.final["val_top1"], rec.final["val_top5"], rec.final["ek"], rec.final["layer_l2"])
    off_ckpt = next((tmp_path / "sweep").glob("abs-off*/model.ckpt"))
    assert off_ckpt.read_bytes() == (tmp_path / "bypass" / "model.ckpt").read_bytes()
    record_property("detail", "; ".join(f"{r['abs']} {r['alpha']}/{r['beta']}: top1 {100 * r['top1']:.2f} "
                                        f"ek {100 * r['ek']:.2f}" for r in rows))


# 10 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(10, "checkpoint, CIFAR export and crafted-record round trips")
def test_format_roundtrips(tmp_path):
    net = build_tapnet(9, 8, 10, seed=10, input_size=32)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()

    ds = synth_generate(10, 50, 32, seed=10)
    write_cifar_binary(ds, tmp_path / "synth.bin")
    back = load_cifar_binary(tmp_path / "synth.bin")
    assert back.images.tobytes() == ds.images.tobytes() and np.array_equal(back.labels, ds.labels)

    rec0 = bytes([3]) + bytes(range(256)) * 12
    rec1 = bytes([9]) + bytes([255]) * 3072
    (tmp_path / "two.bin").write_bytes(rec0 + rec1)
    two = load_cifar_binary(tmp_path / "two.bin")
    assert two.labels.tolist() == [3, 9]
    assert two.images[0, 0, 0, 7] == 7 / 255 and two.images[0, 2, 31, 31] == 255 / 255
    assert two.images[0, 1, 0, 0] == (1024 % 256) / 255
    assert np.all(two.images[1] == 1.0)
