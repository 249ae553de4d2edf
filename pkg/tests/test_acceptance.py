"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""
import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from maediff.cli import main
from maediff.config import preset
from maediff.inference import reconstruct
from maediff.mae import MAEBranch
from maediff.metrics import auprc, dice, erode_mask, median_filter, remove_small_components
from maediff.patching import enumerate_patches, expected_patch_count, visible_grid_table
from maediff.schedule import DiffusionConfig, build_linear_schedule, forward_diffuse
from maediff.training import masked_l1
from maediff.unet import MAEDiffUNet, UNetConfig, count_parameters

from test_metrics import components_oracle, dice_oracle, erosion_oracle, median_oracle


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.mark.criterion(1, "schedule matches sequential-product oracle (rel <= 1e-12)")
def test_criterion_1_schedule(detail):
    with Timer() as tm:
        sched = build_linear_schedule(DiffusionConfig(T=1000, beta_min=1e-4, beta_max=2e-2))
        acc, worst = 1.0, 0.0
        for t in range(1, 1001):
            acc *= 1.0 - (1e-4 + (t - 1) / 999 * (2e-2 - 1e-4))
            worst = max(worst, abs(sched.alpha_bar(t) - acc) / acc)
    detail(f"max rel err {worst:.1e}, {tm.elapsed:.3f}s")
    assert sched.betas[0] == 1e-4 and abs(sched.betas[-1] - 2e-2) <= 1e-17
    assert worst <= 1e-12
    assert tm.elapsed < 1.0


@pytest.mark.criterion(2, "iterated one-step chain agrees with closed-form marginal (3 SE)")
def test_criterion_2_forward_diffusion(detail):
    sched = build_linear_schedule(DiffusionConfig())
    rng = np.random.default_rng(2024)
    n = 100_000
    x0 = rng.uniform(-1, 1, size=(4, 4))
    worst = 0.0
    with Timer() as tm:
        for t in (1, 10, 100):
            chain = np.broadcast_to(x0, (n, 4, 4)).copy()
            for s in range(1, t + 1):
                b = sched.beta(s)
                chain = math.sqrt(1 - b) * chain + math.sqrt(b) * rng.standard_normal(chain.shape)
            closed = forward_diffuse(np.broadcast_to(x0, (n, 4, 4)), rng.standard_normal((n, 4, 4)), t, sched)
            va, vb = chain.var(0, ddof=1), closed.var(0, ddof=1)
            se_mean = np.sqrt(va / n + vb / n)
            se_var = np.sqrt(2 / (n - 1) * (va**2 + vb**2))
            z = max(np.max(np.abs(chain.mean(0) - closed.mean(0)) / se_mean), np.max(np.abs(va - vb) / se_var))
            worst = max(worst, float(z))
    detail(f"max |z| {worst:.2f}, {tm.elapsed:.1f}s")
    assert worst < 3.0
    assert tm.elapsed < 30


@pytest.mark.criterion(3, "patch count formula equals brute-force enumeration (100 geometries)")
def test_criterion_3_patch_plan(detail):
    rng = np.random.default_rng(3)
    geoms = [(96, 96, 48, 16)]
    while len(geoms) < 100:
        r = int(rng.choice([1, 2, 4, 8]))
        s = r * int(rng.integers(1, 4))
        p = r * int(rng.integers(2, 7))
        H, W = p + s * int(rng.integers(0, 5)), p + s * int(rng.integers(0, 5))
        geoms.append((H, W, p, s))
    with Timer() as tm:
        for H, W, p, s in geoms:
            brute = [(i, j) for i in range(H) for j in range(W)
                     if i % s == 0 and j % s == 0 and i + p <= H and j + p <= W]
            plan = enumerate_patches(H, W, p, s)
            assert plan.K == expected_patch_count(H, W, p, s) == len(brute)
            assert list(plan.origins) == brute
    detail(f"{len(geoms)} geometries, {tm.elapsed:.3f}s")
    assert enumerate_patches(96, 96, 48, 16).K == 16
    assert tm.elapsed < 1.0


@pytest.mark.criterion(4, "ground-truth stub denoiser reconstructs bit-exactly, zero anomaly map")
def test_criterion_4_reconstruction_oracle(detail):
    sched = build_linear_schedule(DiffusionConfig())
    rng = np.random.default_rng(4)
    with Timer() as tm:
        for geom in ((96, 96, 48, 16, 16), (64, 64, 32, 16, 16)):
            plan = enumerate_patches(*geom)
            for i in range(20):
                x0 = rng.random((plan.H, plan.W)).astype(np.float32)
                truth = torch.from_numpy(x0)

                def oracle(x, t, k):
                    return truth.expand(x.shape[0], 1, *truth.shape).clone()

                res = reconstruct(x0, oracle, sched, plan, 500, seed=i)
                assert np.array_equal(res.x0_rec, x0)
                assert not res.score.any()
    detail(f"40 images, {tm.elapsed:.2f}s")
    assert tm.elapsed < 10


@pytest.mark.criterion(5, "MAE encoder ignores masked grids; decoder sensitive to visible grids")
def test_criterion_5_masking_soundness(detail):
    cfg = preset("desk")
    plan = enumerate_patches(64, 64, 32, 16, 16)
    torch.manual_seed(5)
    branch = MAEBranch(cfg.mae, channels=cfg.unet.fusion_channels, feature_hw=(16, 16), cell=4).eval()
    table = visible_grid_table(plan)
    gen = torch.Generator().manual_seed(5)
    C = cfg.unet.fusion_channels
    gw = plan.grid_shape[1]

    def cell_mask(cells):
        m = torch.zeros(16, 16, dtype=torch.bool)
        for g in cells:
            a, b = divmod(int(g), gw)
            m[a * 4:(a + 1) * 4, b * 4:(b + 1) * 4] = True
        return m

    with Timer() as tm, torch.no_grad():
        for trial in range(100):
            k = trial % plan.K
            vis = table[[k]]
            hidden = cell_mask(set(range(plan.n_grids)) - set(vis[0].tolist()))
            f = torch.randn(1, C, 16, 16, generator=gen)
            g = f.clone()
            g[..., hidden] += 10 * torch.randn(C, int(hidden.sum()), generator=gen)
            for a, b in zip(branch.encode_visible(f, vis), branch.encode_visible(g, vis)):
                assert torch.equal(a, b)

        insensitive = 0
        for k in range(plan.K):
            vis = table[[k]]
            masked_tokens = sorted(set(range(plan.n_grids)) - set(vis[0].tolist()))
            f = torch.randn(1, C, 16, 16, generator=gen)
            base = branch.decode(f, branch.encode_visible(f, vis))[0, masked_tokens]
            changed = torch.zeros(len(masked_tokens), dtype=torch.bool)
            for cell in vis[0].tolist():
                g = f.clone()
                g[..., cell_mask([cell])] += torch.randn(C, 16, generator=gen)
                out = branch.decode(g, branch.encode_visible(g, vis))[0, masked_tokens]
                changed |= (out != base).any(dim=-1)
            insensitive += int((~changed).sum())
    detail(f"100 masked perturbations bit-identical; {insensitive} insensitive masked tokens; {tm.elapsed:.1f}s")
    assert insensitive == 0
    assert tm.elapsed < 60


@pytest.mark.criterion(6, "masked l1 gradient: zero outside patch, matches central differences inside")
def test_criterion_6_masked_loss_gradient(detail):
    rng = np.random.default_rng(6)
    plan = enumerate_patches(16, 16, 8, 4, 4)
    worst = 0.0
    with Timer() as tm:
        for k in range(plan.K):
            x0 = torch.from_numpy(rng.uniform(-1, 1, size=(1, 1, 16, 16)).astype(np.float32))
            off = rng.uniform(0.2, 1.0, size=x0.shape) * rng.choice([-1, 1], size=x0.shape)
            rec = (x0 + torch.from_numpy(off.astype(np.float32))).requires_grad_(True)
            mask = torch.zeros(1, 1, 16, 16)
            i, j = plan.origins[k]
            mask[..., i:i + 8, j:j + 8] = 1
            masked_l1(x0, rec, mask).backward()
            assert torch.all(rec.grad[mask == 0] == 0)
            h = 0.05
            for a, b in torch.nonzero(mask[0, 0]).tolist():
                up, dn = rec.detach().clone(), rec.detach().clone()
                up[0, 0, a, b] += h
                dn[0, 0, a, b] -= h
                fd = float((masked_l1(x0, up, mask) - masked_l1(x0, dn, mask)) / (2 * h))
                an = float(rec.grad[0, 0, a, b])
                worst = max(worst, abs(fd - an) / abs(an))
    detail(f"max rel err {worst:.1e}, {tm.elapsed:.1f}s")
    assert worst <= 1e-4
    assert tm.elapsed < 60


def auprc_rational(scores, labels):
    n_pos = sum(labels)
    total, prev = Fraction(0), 0
    for thr in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        total += Fraction(tp - prev, n_pos) * Fraction(tp, len(sel))
        prev = tp
    return total


def auprc_float_sweep(scores, labels):
    """Threshold sweep with the same per-step terms, summed with a correctly rounded sum."""
    n_pos = sum(labels)
    terms, prev = [], 0
    for thr in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        terms.append(((tp - prev) / n_pos) * (tp / len(sel)))
        prev = tp
    return math.fsum(terms)


@pytest.mark.criterion(7, "dice and auprc match brute-force oracles; auprc invariant under cubing")
def test_criterion_7_metric_oracles(detail):
    masks = [np.array(bits, bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    with Timer() as tm:
        flat = np.array([m.ravel() for m in masks])
        sizes = flat.sum(1)
        inter = flat.astype(int) @ flat.T.astype(int)
        for a in range(512):
            for b in range(512):
                tot = sizes[a] + sizes[b]
                expected = 1.0 if tot == 0 else 2 * int(inter[a, b]) / int(tot)
                assert dice(masks[a], masks[b]) == expected
        for a in range(0, 512, 7):
            for b in range(0, 512, 11):
                assert dice(masks[a], masks[b]) == dice_oracle(masks[a], masks[b])

        rng = np.random.default_rng(7)
        worst = 0.0
        for case in range(50):
            scores = np.round(rng.random(10), 1 + case % 3)
            labels = rng.integers(0, 2, size=10)
            labels[case % 10] = 1
            got = auprc(scores, labels)
            assert got == auprc_float_sweep(list(scores), list(labels))
            worst = max(worst, abs(got - float(auprc_rational(list(scores), list(labels)))))
            assert auprc(scores**3, labels) == got
    detail(f"262144 dice pairs, 50 auprc cases (max dev from exact rational {worst:.1e}); {tm.elapsed:.1f}s")
    assert worst <= 2.3e-16


@pytest.mark.criterion(8, "median, erosion and small-component removal match definitional oracles")
def test_criterion_8_postprocess_oracles(detail):
    rng = np.random.default_rng(8)
    for case in range(50):
        a = rng.random((12, 12))
        assert np.array_equal(median_filter(a, 5), median_oracle(a, 5))
        m = median_filter(rng.random((12, 12)), 3) > 0.35
        cycles = 1 + case % 3
        assert np.array_equal(erode_mask(m, cycles), erosion_oracle(m, cycles))
        b = rng.random((12, 12)) < 0.4
        assert np.array_equal(remove_small_components(b, 7, 8), components_oracle(b, 7, 8))
    six = np.zeros((12, 12), bool)
    six[2, 2:8] = True
    seven = six.copy()
    seven[3, 7] = True
    assert not remove_small_components(six, 7).any()
    assert np.array_equal(remove_small_components(seven, 7), seven)
    detail("50 random 12x12 cases each; 6-pixel blob removed, 7-pixel blob kept")


@pytest.mark.slow
@pytest.mark.criterion(9, "end-to-end smoke: loss -50%, test Dice > 0.10 and >= 2x random baseline, < 20 min")
def test_criterion_9_end_to_end(tmp_path, detail):
    with Timer() as tm:
        assert main(["gen-data", "--out", str(tmp_path / "data"), "--preset", "desk"]) == 0
        manifest = str(tmp_path / "data" / "manifest.json")
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "run"), "--preset", "desk"]) == 0
        assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "best.pt"), "--manifest", manifest,
                     "--out", str(tmp_path / "eval"), "--random-baseline"]) == 0
    records = [json.loads(x) for x in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    losses = [r["loss"] for r in records if r["loss"] is not None]
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    counts = json.loads((tmp_path / "data" / "manifest.json").read_text())["generator"]["counts"]
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    model_dice = report["dice_mean"]
    random_dice = report["random_baseline"]["dice_mean"]
    detail(f"{len(losses)} steps, loss {first:.3f}->{last:.3f}, dice {model_dice:.3f} vs random "
           f"{random_dice:.3f} ({model_dice / max(random_dice, 1e-12):.2f}x), {tm.elapsed / 60:.1f} min")
    assert counts == {"train": 40, "val-healthy": 8, "val-unhealthy": 8, "test-healthy": 8, "test-unhealthy": 8}
    assert len(losses) == 300
    assert last <= 0.5 * first
    assert model_dice > 0.10
    assert model_dice >= 2 * random_dice
    assert tm.elapsed < 20 * 60


@pytest.mark.criterion(10, "four ablation rows have distinct parameter counts; off/off has no MAE parameters")
def test_criterion_10_ablation_rows(detail):
    cfg = preset("desk")
    plan = enumerate_patches(64, 64, 32, 16, 16)
    rows = {}
    for name, att, mae in (("U-Net", False, False), ("+ Att.", True, False), ("+ MAE", False, True),
                           ("+ Att. + MAE", True, True)):
        torch.manual_seed(0)
        model = MAEDiffUNet(UNetConfig(base_channels=cfg.unet.base_channels, use_global_attention=att,
                                       use_mae=mae), cfg.mae if mae else None, plan)
        rows[name] = (count_parameters(model), count_parameters(model.mae))
    detail(", ".join(f"{k}: {v[0]:,}" for k, v in rows.items()))
    assert len({total for total, _ in rows.values()}) == 4
    assert rows["U-Net"][1] == 0 and rows["+ Att."][1] == 0
    assert rows["+ MAE"][1] > 0 and rows["+ MAE"][1] == rows["+ Att. + MAE"][1]
    assert rows["+ Att. + MAE"][0] - rows["+ MAE"][0] == rows["+ Att."][0] - rows["U-Net"][0]
