"""Acceptance suite A1-A10.  Each test prints one PASS/FAIL line with its measurements."""

import time

import numpy as np
import pytest

from supermix.bench import draw_instances, run_bench
from supermix.classifier import Schedule, build_classifier, train_classifier
from supermix.data import LabeledDataset, MixedDataset, SynthSpec, synth_dataset
from supermix.errors import FormatError
from supermix.mixing import MixInput, box_masks, cutmix, cutmix_box, mix, mixup, normalize_masks
from supermix.numerics import gaussian_kernel
from supermix.objective import ObjectiveConfig, sparsity_loss, supermix_loss_and_grad
from supermix.optimizer import SuperMixConfig, newton_step, smooth_newton_step, supermix, topk_satisfied
from supermix.pipeline import build_mixed_dataset, distill, evaluate, smoothness_profile
from supermix.serialization import checkpoint_bytes, dataset_bytes, load_checkpoint, load_dataset, save_checkpoint, save_dataset


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{tag}: {detail}"
    return emit


@pytest.fixture(scope="module")
def desk():
    """Default synthetic data and a trained tiny-CNN teacher."""
    train, test = synth_dataset(SynthSpec())
    teacher = build_classifier("tiny-cnn", train.image_shape, train.n_classes, rng=np.random.default_rng(0),
                               filters=(8, 16))
    teacher, _ = train_classifier(teacher, train, Schedule(lr=0.02, epochs=30, milestones=(20, 25)),
                                  np.random.default_rng(1))
    return train, test, teacher


def test_a1_convexity(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_sum = 0.0
    lo, hi = 1.0, 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        gh, gw = rng.integers(4, 17, size=2)
        raw = rng.normal(0.0, rng.uniform(0.1, 20.0), size=(k, gh, gw))
        m = normalize_masks(raw, 32, 32)
        worst_sum = max(worst_sum, float(np.abs(m.sum(axis=0) - 1.0).max()))
        lo, hi = min(lo, float(m.min())), max(hi, float(m.max()))
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-6 and lo >= 0.0 and hi <= 1.0 and elapsed < 5
    report("A1", ok, f"max |sum-1| {worst_sum:.2e}, range [{lo:.3g}, {hi:.3g}], {elapsed:.2f}s")


def test_a2_root_identity(report, small_teacher):
    rng = np.random.default_rng(2)
    kernel = gaussian_kernel(1.0)
    cfg = ObjectiveConfig(lambda_s=25.0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(size=(2, 16, 16, 3))
        inputs = MixInput(x, rng.choice(4, size=2, replace=False))
        target = rng.dirichlet(np.ones(4))
        raw = rng.normal(0, 2, size=(2, 8, 8))
        loss, g = supermix_loss_and_grad(raw, inputs, small_teacher, target, cfg)
        for d in (newton_step(g, loss.total), smooth_newton_step(g, loss.total, kernel)):
            inner = float(np.sum(g * d))
            worst = max(worst, abs(inner + loss.total) / loss.total)
    elapsed = time.perf_counter() - start
    report("A2", worst <= 1e-10 and elapsed < 10, f"max relative error {worst:.2e} over 200 steps, {elapsed:.2f}s")


def _fd_relative(teacher, rng, cfg):
    x = rng.uniform(size=(2, 16, 16, 3))
    inputs = MixInput(x, rng.choice(4, size=2, replace=False))
    target = rng.dirichlet(np.ones(4))
    raw = rng.normal(0, 1, size=(2, 4, 4))
    _, g = supermix_loss_and_grad(raw, inputs, teacher, target, cfg)
    fd = np.zeros_like(raw)
    h = 1e-4
    for idx in np.ndindex(raw.shape):
        rp, rm = raw.copy(), raw.copy()
        rp[idx] += h
        rm[idx] -= h
        fd[idx] = (supermix_loss_and_grad(rp, inputs, teacher, target, cfg)[0].total
                   - supermix_loss_and_grad(rm, inputs, teacher, target, cfg)[0].total) / (2 * h)
    return float(np.linalg.norm(fd - g) / np.linalg.norm(fd))


def test_a3_gradient(report, small_data, small_teacher):
    train, _ = small_data
    linear = build_classifier("softmax-regression", train.image_shape, 4, rng=np.random.default_rng(0))
    linear, _ = train_classifier(linear, train, Schedule(lr=0.02, epochs=10), np.random.default_rng(0))
    rng = np.random.default_rng(3)
    cfg = ObjectiveConfig(lambda_s=25.0)
    start = time.perf_counter()
    worst = {}
    for name, teacher in (("softmax-regression", linear), ("mlp", small_teacher)):
        worst[name] = max(_fd_relative(teacher, rng, cfg) for _ in range(10))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    report("A3", ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f" (relative), {elapsed:.1f}s")


def test_a4_optimizer_speed(report, desk):
    train, _, teacher = desk
    start = time.perf_counter()
    rep = run_bench(train, teacher, SuperMixConfig(), np.random.default_rng(4), n_instances=256)
    elapsed = time.perf_counter() - start
    ratio = rep.iteration_ratio("newton-sp")
    speedup = rep.speedup("newton-sp")
    beats_newton = rep.row("newton-sp").mean_seconds < rep.row("newton").mean_seconds
    ok = ratio <= 0.2 and speedup >= 10.0 and beats_newton and elapsed < 600
    iters = ", ".join(f"{r.method} {r.mean_iterations:.2f}" for r in rep.rows)
    report("A4", ok, f"iterations {iters}; ratio {ratio:.3f} (need <= 0.2); speedup vs sgd {speedup:.2f}x "
                     f"(need >= 10); vs newton {rep.speedup('newton-sp', 'newton'):.2f}x; {elapsed:.0f}s")


def test_a5_self_training(report):
    train, test = synth_dataset(SynthSpec())
    sched = Schedule(lr=0.01, epochs=30, milestones=(20, 25))
    start = time.perf_counter()
    teacher = build_classifier("mlp", train.image_shape, 4, rng=np.random.default_rng(1000))
    teacher, _ = train_classifier(teacher, train, sched, np.random.default_rng(1000))
    mixed = {m: build_mixed_dataset(train, teacher, m, 5, SuperMixConfig(k=2, alpha=3.0, lambda_s=25.0),
                                    np.random.default_rng(7))
             for m in ("supermix", "mixup")}
    acc = {"base": [], "supermix": [], "mixup": []}
    for seed in range(4):
        for name in acc:
            student = build_classifier("mlp", train.image_shape, 4, rng=np.random.default_rng(seed))
            student, _, _ = distill(student, None, train, mixed.get(name), "ce", sched, np.random.default_rng(seed))
            acc[name].append(evaluate(student, test)["top1"])
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    gain = 100 * (mean["supermix"] - mean["base"])
    ok = gain >= 0.5 and mean["supermix"] >= mean["mixup"] and elapsed < 1800
    report("A5", ok, f"mean test accuracy base {mean['base']:.4f}, supermix {mean['supermix']:.4f}, "
                     f"mixup {mean['mixup']:.4f}; gain {gain:.2f} points (need >= 0.5); {elapsed:.0f}s")


def test_a6_smoothness(report, desk):
    train, _, teacher = desk
    rng = np.random.default_rng(6)
    top_n = min(5, train.n_classes)
    originals = train.images[rng.choice(len(train), size=1000, replace=False)]
    mixed = build_mixed_dataset(train, teacher, "supermix", 1000 / len(train), SuperMixConfig(), rng)
    assert len(mixed) == 1000
    p_orig = smoothness_profile(teacher, originals, top_n)
    p_mix = smoothness_profile(teacher, mixed.images, top_n)
    report("A6", p_mix[0] < p_orig[0],
           f"top-{top_n} profile original {np.round(p_orig, 4).tolist()}, supermix {np.round(p_mix, 4).tolist()}")


def test_a7_reductions(report):
    rng = np.random.default_rng(7)
    same_mixup = same_cutmix = 0
    for _ in range(100):
        x = rng.uniform(size=(2, 12, 10, 3))
        img, _, r = mixup(x[0], x[1], 1.0, rng)
        masks = np.stack([np.full((12, 10), r), np.full((12, 10), 1.0 - r)])
        same_mixup += np.array_equal(mix(x, masks), img)
        box = cutmix_box(12, 10, float(rng.uniform()), rng)
        img, _, _ = cutmix(x[0], x[1], 1.0, rng, box=box)
        same_cutmix += np.array_equal(mix(x, box_masks(box, 12, 10)), img)
    report("A7", same_mixup == 100 and same_cutmix == 100,
           f"bit-exact mixup {same_mixup}/100, cutmix {same_cutmix}/100")


def test_a8_termination(report, desk):
    train, _, teacher = desk
    rng = np.random.default_rng(8)
    cfg = SuperMixConfig(max_iters=50)
    insts = draw_instances(train, teacher, 256, 2, rng, distinct_classes=False)
    converged = reverified = 0
    for inst in insts:
        x = train.images[list(inst.sources)].astype(np.float64)
        inputs = MixInput(x, np.asarray(teacher.predict_class(x)))
        res = supermix(inputs, teacher, cfg, np.random.default_rng(inst.seed))
        if res.converged:
            converged += 1
            reverified += topk_satisfied(teacher.predict_proba(res.mixed), inputs.classes)
    rate = converged / len(insts)
    report("A8", reverified == converged and rate >= 0.9,
           f"converged {converged}/{len(insts)} ({rate:.3f}, need >= 0.9); re-verified {reverified}/{converged}")


def test_a9_sparsity(report):
    binary = np.zeros((3, 6, 6))
    binary[0, :2], binary[1, 2:4], binary[2, 4:] = 1, 1, 1
    vals = (sparsity_loss(np.full((2, 8, 8), 0.5)), sparsity_loss(np.full((3, 8, 8), 1 / 3)), sparsity_loss(binary))
    ok = vals[0] == 0.25 and abs(vals[1] - 2 / 9) <= 2.0 ** -52 and vals[2] == 0.0
    report("A9", ok, f"k=2 uniform {vals[0]!r}, k=3 uniform {vals[1]!r} (2/9 = {2 / 9!r}), binary {vals[2]!r}")


def test_a10_serialization(report, tmp_path, small_teacher):
    rng = np.random.default_rng(10)
    ds = LabeledDataset(rng.uniform(size=(20, 8, 8, 3)).astype(np.float32), rng.integers(4, size=20), 4)
    mixed = MixedDataset(rng.uniform(size=(10, 8, 8, 3)).astype(np.float32), rng.integers(4, size=10), 4,
                         "supermix", 0.5, rng.dirichlet(np.ones(4), size=10).astype(np.float32))
    ok = True
    for name, d in (("d.smxd", ds), ("m.smxd", mixed)):
        save_dataset(tmp_path / name, d)
        back = load_dataset(tmp_path / name)
        ok &= back.images.tobytes() == d.images.tobytes() and dataset_bytes(back) == dataset_bytes(d)
    save_checkpoint(tmp_path / "t.ckpt", small_teacher)
    back = load_checkpoint(tmp_path / "t.ckpt")
    ok &= checkpoint_bytes(back) == checkpoint_bytes(small_teacher)
    rejected = 0
    diagnostics = set()
    for path, loader, span in ((tmp_path / "d.smxd", load_dataset, 40), (tmp_path / "t.ckpt", load_checkpoint, 24)):
        blob = path.read_bytes()
        for offset in range(span):
            bad = bytearray(blob)
            bad[offset] ^= 0xA5
            (tmp_path / "bad").write_bytes(bytes(bad))
            try:
                loader(tmp_path / "bad")
            except FormatError as exc:
                rejected += 1
                diagnostics.add(str(exc).split(":")[-1].strip()[:30])
    report("A10", ok and rejected == 64,
           f"round-trips bit-exact {bool(ok)}; corrupted headers rejected {rejected}/64 with FormatError")
