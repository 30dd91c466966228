"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The toy training runs are shared through module fixtures; the whole file
takes a few minutes on a desktop CPU.
"""

import math
import time

import numpy as np
import pytest
import torch

from respolish import gradcheck
from respolish.adversary import DiscSpec, build_discriminator
from respolish.checkpoint import digest, load_network, save_network
from respolish.coarse import CpnSpec, build_cpn
from respolish.data import (
    ImageTensor,
    InpaintingSet,
    SplitSpec,
    Space,
    center_mask,
    load_corpus,
    normalize,
    synthetic_corpus,
)
from respolish.evaluation import assemble, evaluate_pipeline, mean_l1, mean_l2, psnr
from respolish.fine import FpnSpec, build_fpn, fpn_forward
from respolish.objectives import (
    adversarial_losses,
    discriminator_loss_from_logits,
    euclidean_loss,
    feature_loss,
    fixed_random_cnn,
    fpn_loss,
    generator_loss_from_logits,
    joint_cpn_loss,
    l2_penalty,
)
from respolish.optim import Adam
from respolish.trainer import TrainConfig, train_cpn, train_fpn

import oracles

TOY_CPN = CpnSpec(32, 16, (16, 32, 64), 256, (64, 32))
TOY_DISC = DiscSpec(16, (16, 32))
TOY_FPN = FpnSpec(16)
TINY_CPN = CpnSpec(16, 8, (4, 8), 16, (4,))
TINY_DISC = DiscSpec(8, (4, 8))
TINY_FPN = FpnSpec(8, 3, 4)
GRAD_TOL = 1e-4
INSTANCES = 20


@pytest.fixture(scope="module")
def toy_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus")
    synthetic_corpus(16, 32, 7, root)
    corpus = load_corpus(root, SplitSpec(["part1"], [], []))
    return InpaintingSet.from_records(corpus.splits["train"], 32)


def _cpn_config(root):
    return TrainConfig(epochs=2000, batch_size=16, mask_size=16, plateau_patience=None,
                       eval_every=100, checkpoint_dir=str(root), checkpoint_every=10**6, seed=0)


@pytest.fixture(scope="module")
def cpn_runs(toy_set, tmp_path_factory):
    runs = []
    for name in ("cpn_a", "cpn_b"):
        t0 = time.perf_counter()
        res = train_cpn(_cpn_config(tmp_path_factory.mktemp(name)), toy_set, None,
                        TOY_CPN, TOY_DISC, fixed_random_cnn(0))
        runs.append((res, time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="module")
def fpn_run(toy_set, cpn_runs, tmp_path_factory):
    coarse = cpn_runs[0][0].checkpoint
    before = digest(coarse)
    cfg = TrainConfig(phase="fpn", epochs=1000, batch_size=16, mask_size=16,
                      plateau_patience=None, eval_every=50,
                      checkpoint_dir=str(tmp_path_factory.mktemp("fpn")),
                      checkpoint_every=10**6, seed=0)
    t0 = time.perf_counter()
    res = train_fpn(cfg, toy_set, None, coarse, TOY_FPN)
    return res, time.perf_counter() - t0, before, digest(coarse)


def _series(curve, metric, split="train"):
    rows = curve.series(metric, split)
    return np.array([r.step for r in rows]), np.array([r.value for r in rows])


# --------------------------------------------------------------------------- 1


def test_criterion_1_composition_identity(tmp_path, record):
    t0 = time.perf_counter()
    synthetic_corpus(100, 32, 11, tmp_path)
    corpus = load_corpus(tmp_path, SplitSpec(["part1"], [], []))
    images = InpaintingSet.from_records(corpus.splits["train"], 32).images
    storage = ImageTensor(images.astype(np.float32), Space.STORAGE)
    failures = []
    for img in (storage, normalize(storage)):
        for m in range(1, 33):
            s = center_mask(img, m, fill=0.25)
            if not np.array_equal(assemble(s, s.ground_truth_patch).data, img.data):
                failures.append((img.space.name, m))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    record(1, ok, f"100 images x 32 mask sizes x 2 spaces, {len(failures)} mismatches, "
                  f"{elapsed:.1f}s (< 10s)")
    assert ok, failures


# --------------------------------------------------------------------------- 2


def _leaf(rng, shape, low=-1.0, high=1.0):
    return torch.tensor(rng.uniform(low, high, shape), dtype=torch.float64, requires_grad=True)


def _gradient_groups():
    """name -> builder(rng, seed) returning (scalar fn, tensors to check)."""

    def eq2(rng, seed):
        a, b = _leaf(rng, (3, 3, 4, 4)), _leaf(rng, (3, 3, 4, 4))
        return lambda: euclidean_loss(a, b), [a, b]

    def eq3_gen(rng, seed):
        fake = _leaf(rng, 6, 0.05, 0.95)
        real = torch.tensor(rng.uniform(0.05, 0.95, 6), dtype=torch.float64)
        return lambda: adversarial_losses(real, fake)[0], [fake]

    def eq3_disc(rng, seed):
        real, fake = _leaf(rng, 5, 0.05, 0.95), _leaf(rng, 7, 0.05, 0.95)
        return lambda: adversarial_losses(real, fake)[1], [real, fake]

    def eq3_logits(rng, seed):
        lr, lf = _leaf(rng, 6, -3, 3), _leaf(rng, 6, -3, 3)
        return (lambda: discriminator_loss_from_logits(lr, lf)
                + generator_loss_from_logits(lf)), [lr, lf]

    def eq4(rng, seed):
        ext = fixed_random_cnn(seed, widths=(4, 6)).double()
        a, b = _leaf(rng, (2, 3, 16, 16)), _leaf(rng, (2, 3, 16, 16))
        return lambda: feature_loss(ext, a, b), [a, b]

    def eq5(rng, seed):
        cpn = build_cpn(TINY_CPN, seed).double().train()
        disc = build_discriminator(TINY_DISC, seed + 1).double().train()
        ext = fixed_random_cnn(seed, widths=(4, 6)).double()
        masked, truth = _leaf(rng, (2, 3, 16, 16)), _leaf(rng, (2, 3, 8, 8))
        full = masked.detach().clone()
        full[:, :, 4:12, 4:12] = truth.detach()

        def fn():
            fake = cpn(masked)
            filled = masked.clone()
            filled[:, :, 4:12, 4:12] = fake
            return joint_cpn_loss(euclidean_loss(fake, truth),
                                  generator_loss_from_logits(disc.logits(fake)),
                                  feature_loss(ext, filled, full), l2_penalty(cpn)).total

        return fn, [masked, truth, *cpn.parameters()]

    def eq6(rng, seed):
        coarse, r = _leaf(rng, (2, 3, 8, 8), -0.7, 0.7), _leaf(rng, (2, 3, 8, 8), -0.2, 0.2)
        truth = torch.tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), dtype=torch.float64)
        return lambda: fpn_loss(coarse + r, truth), [coarse, r]

    def cpn_net(rng, seed):
        cpn = build_cpn(TINY_CPN, seed).double().train()
        x, w = _leaf(rng, (2, 3, 16, 16)), torch.tensor(rng.normal(size=(2, 3, 8, 8)))
        return lambda: (cpn(x) * w).sum(), [x, *cpn.parameters()]

    def fpn_net(rng, seed):
        fpn = build_fpn(TINY_FPN, seed).double().train()
        with torch.no_grad():
            # a zero head would hide every gradient below it
            fpn.head.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(seed))
        x, truth = _leaf(rng, (2, 3, 8, 8), -0.5, 0.5), torch.tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
        return lambda: fpn_loss(fpn(x)[0] + x, truth), [x, *fpn.parameters()]

    def disc_net(rng, seed):
        disc = build_discriminator(TINY_DISC, seed).double().train()
        real, fake = _leaf(rng, (2, 3, 8, 8)), _leaf(rng, (2, 3, 8, 8))
        return (lambda: discriminator_loss_from_logits(disc.logits(real), disc.logits(fake))), \
            [real, fake, *disc.parameters()]

    return {
        "Eq2 euclidean": eq2, "Eq3 generator": eq3_gen, "Eq3 discriminator": eq3_disc,
        "Eq3 logit form": eq3_logits, "Eq4 feature": eq4, "Eq5 joint": eq5, "Eq6 fine": eq6,
        "CPN": cpn_net, "FPN": fpn_net, "discriminator": disc_net,
    }


def _kink_distance(fn) -> float:
    """Smallest |pre-activation| seen by any (leaky) ReLU during one call of ``fn``."""
    seen = [math.inf]

    def hook(module, inputs, output):
        if isinstance(module, (torch.nn.ReLU, torch.nn.LeakyReLU)):
            seen.append(inputs[0].detach().abs().min().item())

    handle = torch.nn.modules.module.register_module_forward_hook(hook)
    try:
        with torch.no_grad():
            fn()
    finally:
        handle.remove()
    return min(seen)


def test_criterion_2_gradient_suite(record):
    # A central difference straddling a ReLU corner measures the corner, not the
    # gradient, so instances with a pre-activation within 10 h of 0 are redrawn.
    kink_margin = 1e-5
    t0 = time.perf_counter()
    worst, redrawn = {}, 0
    for name, build in _gradient_groups().items():
        errs, seed = [], 0
        while len(errs) < INSTANCES:
            rng = np.random.default_rng(1000 + seed)
            fn, tensors = build(rng, seed)
            seed += 1
            if _kink_distance(fn) < kink_margin:
                redrawn += 1
                continue
            errs.append(gradcheck.check(fn, tensors, h=1e-6, max_entries=12, rng=rng,
                                       per_tensor=False))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(e < GRAD_TOL for e in worst.values()) and elapsed < 300
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"worst whole-gradient relative error per group over {INSTANCES} instances "
                  f"(< {GRAD_TOL:g}): {summary}; {redrawn} instances redrawn for a ReLU "
                  f"corner within {kink_margin:g}; {elapsed:.0f}s (< 300s)")
    assert ok, worst


# --------------------------------------------------------------------------- 3


def test_criterion_3_metric_oracles(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3)
        a = rng.integers(0, 256, shape)
        b = a.copy() if rng.random() < 0.02 else rng.integers(0, 256, shape)
        l1, l2, p = oracles.metrics(a, b)
        got = (mean_l1(a, b), mean_l2(a, b), psnr(a, b))
        for g, o in zip(got, (l1, l2, p)):
            if math.isinf(o):
                worst = max(worst, 0.0 if g == o else math.inf)
            else:
                worst = max(worst, abs(g - o))
    zero, full = np.zeros((8, 8, 3)), np.full((8, 8, 3), 255.0)
    half = zero.copy()
    half[:4] = 255.0
    anchors = (
        abs(psnr(zero, full)) < 1e-12
        and abs(psnr(zero, half) - 10 * math.log10(2)) < 1e-12
        and round(psnr(zero, half), 4) == 3.0103
        and math.isinf(psnr(zero, zero))
    )
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and anchors and elapsed < 30
    record(3, ok, f"1000 pairs, worst deviation {worst:.1e} (< 1e-9), anchors "
                  f"{'hold' if anchors else 'broken'}, {elapsed:.1f}s (< 30s)")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_4_residual_identity(tmp_path, record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    exact = True
    for k in range(10):
        spec = FpnSpec(int(rng.integers(2, 12)), int(rng.integers(2, 5)), int(rng.integers(1, 6)))
        net = build_fpn(spec, k)
        for dtype in (np.float32, np.float64):
            x = rng.uniform(-1, 1, (3, spec.patch_size, spec.patch_size, 3)).astype(dtype)
            for mode in ("eval", "train"):
                _, y = fpn_forward(net, ImageTensor(x, Space.MODEL), mode)
                exact &= bool(np.array_equal(y.data, x))
    cpn = build_cpn(TINY_CPN, 0)
    save_network(tmp_path / "c.ckpt", cpn, extra={"fill": [0.0, 0.0, 0.0], "mask_size": 8})
    save_network(tmp_path / "f.ckpt", build_fpn(TINY_FPN, 1))
    data = InpaintingSet(rng.integers(0, 256, (6, 16, 16, 3)).astype(np.uint8),
                         [f"x{i}" for i in range(6)])
    coarse, polished = evaluate_pipeline(tmp_path / "c.ckpt", tmp_path / "f.ckpt", data)
    rows_equal = coarse.rows == polished.rows
    elapsed = time.perf_counter() - t0
    ok = exact and rows_equal and elapsed < 10
    record(4, ok, f"fresh FPN y == coarse exactly: {exact}, pipeline rows identical: "
                  f"{rows_equal}, {elapsed:.1f}s (< 10s)")
    assert ok


# --------------------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_toy_overfit(cpn_runs, record):
    res, elapsed = cpn_runs[0]
    _, psnr_curve = _series(res.curve, "psnr_cpn")
    steps, total = _series(res.curve, "total")
    _, ed = _series(res.curve, "ed")
    final_psnr = psnr_curve[-1]
    # moving averages over 50 steps at the start and at the end of the run
    ratio = total[:50].mean() / total[-50:].mean()
    ed_ratio = ed[:50].mean() / ed[-50:].mean()
    ok = steps[-1] == 2000 and final_psnr >= 25 and ratio >= 5 and elapsed < 900
    record(5, ok, f"train patch PSNR {final_psnr:.2f} dB (>= 25), joint total ratio "
                  f"{ratio:.2f}x (>= 5; Euclidean term alone {ed_ratio:.1f}x), "
                  f"{steps[-1]} steps in {elapsed:.0f}s (< 900s)")
    assert final_psnr >= 25
    assert ratio >= 5


# --------------------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_polishing_improves(fpn_run, record):
    res, elapsed, _, _ = fpn_run
    steps, coarse = _series(res.curve, "psnr_cpn")
    _, polished = _series(res.curve, "psnr_fpn")
    gain = polished - coarse
    late = gain[steps > 200]
    ok = steps[-1] == 1000 and gain[-1] >= 0.5 and late.min() >= -0.05 and elapsed < 600
    record(6, ok, f"final gain {gain[-1]:.2f} dB (>= 0.5), worst gain after step 200 "
                  f"{late.min():.2f} dB (>= -0.05), {elapsed:.0f}s (< 600s)")
    assert ok


# --------------------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_freeze_and_determinism(cpn_runs, fpn_run, record):
    (a, _), (b, _) = cpn_runs
    _, _, before, after = fpn_run
    frozen = before == after
    same = all(
        a.checkpoint.with_name(a.checkpoint.name.replace("cpn", kind)).read_bytes()
        == b.checkpoint.with_name(b.checkpoint.name.replace("cpn", kind)).read_bytes()
        for kind in ("cpn", "disc", "state")
    )
    ok = frozen and same
    record(7, ok, f"CPN checksum unchanged by phase 2: {frozen}, two deterministic runs "
                  f"byte-identical: {same}")
    assert ok


# --------------------------------------------------------------------------- 8


def _random_specs(rng, n):
    cpns, discs, fpns = [], [], []
    while len(cpns) < n:
        n_dec = int(rng.integers(0, 3))
        s = int(rng.integers(1, 3))
        patch = s << (n_dec + 1)
        n_enc = int(rng.integers(1, 4))
        size = (1 << n_enc) * int(rng.integers(1, 4))
        if size < patch:
            continue
        depths = tuple(int(d) for d in rng.integers(1, 6, n_enc))
        dec = tuple(int(d) for d in rng.integers(1, 6, n_dec))
        cpns.append(CpnSpec(size, patch, depths, s * s * int(rng.integers(1, 4)), dec).validate())
    while len(discs) < n:
        k = int(rng.integers(1, 4))
        discs.append(DiscSpec((1 << k) * int(rng.integers(1, 3)),
                              tuple(int(d) for d in rng.integers(1, 6, k))).validate())
    while len(fpns) < n:
        fpns.append(FpnSpec(int(rng.integers(1, 10)), int(rng.integers(2, 5)),
                            int(rng.integers(1, 6)), int(rng.choice([1, 3, 5]))).validate())
    return cpns, discs, fpns


def test_criterion_8_checkpoint_roundtrip(tmp_path, record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    cpns, discs, fpns = _random_specs(rng, 10)
    builders = [(build_cpn, cpns), (build_discriminator, discs), (build_fpn, fpns)]
    mismatches = 0
    for build, specs in builders:
        for k, spec in enumerate(specs):
            net = build(spec, k)
            with torch.no_grad():
                for p in net.state_dict().values():
                    if p.is_floating_point():
                        p.copy_(torch.randn_like(p))
            first = save_network(tmp_path / "a.ckpt", net, seed=k, step=k)
            loaded, _ = load_network(first)
            second = save_network(tmp_path / "b.ckpt", loaded, seed=k, step=k)
            mismatches += first.read_bytes() != second.read_bytes()
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    record(8, ok, f"30 random specs (10 per network), {mismatches} byte mismatches, "
                  f"{elapsed:.1f}s (< 30s)")
    assert ok


# --------------------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_9_adversarial_sanity(cpn_runs, record):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    disc = build_discriminator(TOY_DISC, 0)
    opt = Adam(disc, 2e-4)
    gen = torch.Generator().manual_seed(9)

    def batch(n):
        real = 0.8 + 0.2 * torch.rand(n, 3, 16, 16, generator=gen)
        fake = -0.8 - 0.2 * torch.rand(n, 3, 16, 16, generator=gen)
        return real, fake

    held_real, held_fake = batch(64)
    reached = None
    for step in range(1, 501):
        disc.train()
        real, fake = batch(16)
        loss = discriminator_loss_from_logits(disc.logits(real), disc.logits(fake))
        opt.zero_grad()
        loss.backward()
        opt.step()
        disc.eval()
        with torch.no_grad():
            right = (disc(held_real) > 0.5).sum() + (disc(held_fake) < 0.5).sum()
        if right.item() == 128:
            reached = step
            break
    res, _ = cpn_runs[0]
    _, d_loss = _series(res.curve, "disc")
    _, ed = _series(res.curve, "ed")
    finite = bool(np.isfinite(d_loss).all())
    decreasing = ed[-50:].mean() < ed[:50].mean()
    elapsed = time.perf_counter() - t0
    ok = reached is not None and finite and decreasing and elapsed < 300
    record(9, ok, f"D-only 100% held-out accuracy at step {reached} (<= 500); toy run "
                  f"disc loss finite: {finite} (max {d_loss.max():.3f}), Euclidean term "
                  f"{ed[:50].mean():.4f} -> {ed[-50:].mean():.4f}")
    assert ok
