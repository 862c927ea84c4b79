"""Acceptance suite: one test per criterion, each checked at its stated tolerance
and runtime budget. A PASS/FAIL line per criterion is printed in the terminal
summary (and when run as ``python tests/test_acceptance.py``)."""
import functools
import math
import time

import numpy as np
import pytest
import torch

from conftest import tiny_config
from iboot.augment import augment, draw_aug_params
from iboot.config import AugConfig, EncoderConfig, LossConfig, OptimConfig, RunConfig
from iboot.dataset import Clip, make_synthetic_dataset
from iboot.encoders import MomentumBranch, OnlineNetwork, ema_update
from iboot.evaluation import FeatureBank, knn_classify, knn_eval, semi_split
from iboot.harness import Pretrainer, epoch_batches, load_or_make_dataset, make_batch, run_pretrain
from iboot.objective import cosine_distance, ensemble_loss, iboot_loss
from iboot.optim import LARS, base_lr, lr_at
from iboot.plots import moving_average
from iboot.storage import read_log

RESULTS: list[tuple[int, bool, str]] = []


def _record(num, budget):
    """Time the criterion body, enforce its runtime budget and log the outcome."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
                elapsed = time.perf_counter() - t0
                assert elapsed < budget, f"runtime {elapsed:.1f}s exceeds {budget}s"
            except AssertionError as err:
                RESULTS.append((num, False, f"{fn.__doc__.strip()}: {err}"))
                raise
            RESULTS.append((num, True, f"{fn.__doc__.strip()}: {detail} ({elapsed:.2f}s)"))

        return run

    return wrap


# 1 -------------------------------------------------------------------------
@_record(1, 1.0)
def test_c01_loss_properties():
    """loss properties"""
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        q, k = (torch.tensor(rng.standard_normal(rng.integers(2, 17))) for _ in range(2))
        k = k[: len(q)] if len(k) >= len(q) else torch.cat([k, torch.ones(len(q) - len(k), dtype=k.dtype)])
        d = cosine_distance(q, k).item()
        assert 0.0 <= d <= 4.0
        a, b = rng.uniform(1e-3, 1e3, 2)
        worst = max(worst, abs(cosine_distance(a * q, b * k).item() - d))
    assert worst < 1e-12, f"scale invariance error {worst}"
    v = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    ortho = torch.tensor([2.0, 0.5, 0.0], dtype=torch.float64)
    assert cosine_distance(v, 4 * v).item() == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(v, ortho).item() == pytest.approx(2.0, abs=1e-12)
    assert cosine_distance(v, -v).item() == pytest.approx(4.0, abs=1e-12)
    return f"max scale error {worst:.1e}"


# 2 -------------------------------------------------------------------------
def _central_diff(f, x, eps=1e-5):
    g = torch.zeros_like(x)
    for i in range(x.numel()):
        old = x.view(-1)[i].item()
        x.view(-1)[i] = old + eps
        hi = f()
        x.view(-1)[i] = old - eps
        lo = f()
        x.view(-1)[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


@_record(2, 30.0)
def test_c02_gradient_check():
    """gradient check"""
    rng = np.random.default_rng(2)
    worst = 0.0
    for case in range(100):
        pool = case % 2 == 0
        cfg = LossConfig(temporal_pool=pool)
        ensemble = case % 4 >= 2
        T = int(rng.integers(1, 5))
        dims = [int(rng.integers(2, 17)) for _ in range(2 if ensemble else 1)]
        names = [f"t{i}" for i in range(len(dims))]
        qs = {n: [torch.tensor(rng.standard_normal((2, T, d)), requires_grad=True) for _ in range(2)] for n, d in zip(names, dims)}
        ks = {n: torch.tensor(rng.standard_normal((2, T, d))) for n, d in zip(names, dims)}

        def value():
            if ensemble:
                return ensemble_loss({n: [q.detach() for q in v] for n, v in qs.items()}, ks, cfg)[0].item()
            return iboot_loss([q.detach() for q in qs[names[0]]], ks[names[0]], pool).item()

        loss = ensemble_loss(qs, ks, cfg)[0] if ensemble else iboot_loss(qs[names[0]], ks[names[0]], pool)
        loss.backward()
        for n in names:
            for q in qs[n]:
                fd = _central_diff(value, q.detach())
                rel = ((q.grad - fd).norm() / max(q.grad.norm(), fd.norm(), 1e-12)).item()
                worst = max(worst, rel)
    assert worst < 1e-4, f"max relative error {worst:.2e}"
    return f"max relative error {worst:.1e} over 100 instances"


# 3 -------------------------------------------------------------------------
def _lars_closed_form(w, g, u, lr, wd, momentum, eta, adapt):
    gp = [gi + wd * wi for gi, wi in zip(g, w)]
    wn = math.sqrt(sum(x * x for x in w))
    gn = math.sqrt(sum(x * x for x in gp))
    r = eta * wn / gn if adapt and wn > 0 and gn > 0 else 1.0
    u_new = [momentum * ui + r * lr * gi for ui, gi in zip(u, gp)]
    return [wi - ui for wi, ui in zip(w, u_new)], u_new


@_record(3, 5.0)
def test_c03_lars_oracle():
    """LARS oracle"""
    rng = np.random.default_rng(3)
    worst = 0.0
    for case in range(50):
        n = int(rng.integers(1, 9))
        w0 = rng.standard_normal(n)
        g = np.zeros(n) if case % 5 == 0 else rng.standard_normal(n)  # wd-only cases
        adapt = case % 3 != 0  # exclusion-predicate cases
        lr, wd, mom, eta = rng.uniform(0.01, 2), rng.uniform(0, 0.1), rng.uniform(0, 0.99), rng.uniform(1e-4, 0.1)
        u0 = rng.standard_normal(n) if case % 2 else np.zeros(n)
        p = torch.tensor(w0, requires_grad=True)
        opt = LARS([{"params": [p], "adapt": adapt}], lr=lr, weight_decay=wd, momentum=mom, trust_coefficient=eta)
        opt.state[p]["momentum_buffer"] = torch.tensor(u0)
        p.grad = torch.tensor(g)
        opt.step()
        expect, _ = _lars_closed_form(list(w0), list(g), list(u0), lr, wd, mom, eta, adapt)
        worst = max(worst, float(np.abs(p.detach().numpy() - np.array(expect)).max()))
    assert worst <= 1e-10, f"max abs error {worst:.2e}"
    return f"max abs error {worst:.1e} over 50 cases"


# 4 -------------------------------------------------------------------------
@_record(4, 1.0)
def test_c04_scheduler():
    """scheduler landmarks"""
    cfg = OptimConfig(batch_size=16, warmup_epochs=2, total_epochs=5)
    spe = 3  # warmup 6 steps, 15 total, cosine midpoint at step 10
    peak = 2.4 * 16 / 256
    assert base_lr(cfg) == pytest.approx(peak, abs=1e-15)
    assert lr_at(0, spe, cfg) == 0.0
    assert lr_at(6, spe, cfg) == pytest.approx(peak, abs=1e-15)
    assert lr_at(10, spe, cfg) == pytest.approx(peak / 2, abs=1e-15)
    assert lr_at(14, spe, cfg) <= 1e-12
    # continuity: the last warmup step is one increment below peak
    assert abs(lr_at(5, spe, cfg) - peak) <= peak / 6 + 1e-15
    return "0 / peak / peak/2 / 0 at steps 0, 6, 10, 14"


# 5 -------------------------------------------------------------------------
def _knn_quadratic(features, labels, query, k, tau):
    sims = sorted(((-sum(a * b for a, b in zip(row, query)), i) for i, row in enumerate(features)))
    votes = {}
    for neg, i in sims[:k]:
        votes[labels[i]] = votes.get(labels[i], 0.0) + math.exp(-neg / tau)
    top = max(votes.values())
    return min(c for c, v in votes.items() if v == top)


@_record(5, 30.0)
def test_c05_knn_oracle():
    """kNN oracle equivalence"""
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(20):
        n, d, c = int(rng.integers(20, 501)), int(rng.integers(2, 33)), int(rng.integers(2, 11))
        x = rng.standard_normal((n, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        labels = rng.integers(0, c, n)
        bank = FeatureBank(x, labels, tuple(map(str, range(n))))
        feats, labs = x.tolist(), labels.tolist()
        for _ in range(5):
            q = rng.standard_normal(d)
            q /= np.linalg.norm(q)
            assert knn_classify(bank, q, 20, 0.07)[0] == _knn_quadratic(feats, labs, q.tolist(), 20, 0.07)
            checked += 1
    return f"{checked} queries over 20 banks agree"


# 6 -------------------------------------------------------------------------
@_record(6, 60.0)
def test_c06_augmentation_contract():
    """augmentation contract"""
    cfg = AugConfig()
    g = torch.Generator().manual_seed(6)
    frame = torch.rand(1, 40, 48, 3, generator=g)
    clip = Clip(frame.expand(8, -1, -1, -1).clone(), "v", 0, 1)
    for seed in range(20):
        out = augment(clip, cfg, np.random.default_rng(seed)).frames
        assert all(torch.equal(out[0], out[t]) for t in range(1, 8)), "frames diverged"
        assert torch.equal(out, augment(clip, cfg, np.random.default_rng(seed)).frames), "not deterministic"
    rng = np.random.default_rng(60)
    n = 10_000
    draws = [draw_aug_params(cfg, (40, 48), rng) for _ in range(n)]
    rates = {
        "jitter": (np.mean([p.apply_jitter for p in draws]), cfg.jitter_prob),
        "gray": (np.mean([p.apply_gray for p in draws]), cfg.grayscale_prob),
        "blur": (np.mean([p.blur_sigma is not None for p in draws]), cfg.blur_prob),
    }
    for name, (rate, p) in rates.items():
        assert (p, name) in {(0.8, "jitter"), (0.2, "gray"), (0.5, "blur")}
        assert abs(rate - p) < 5 * math.sqrt(p * (1 - p) / n), f"{name} rate {rate}"
    return ", ".join(f"{k} {v[0]:.3f}" for k, v in rates.items())


# 7 -------------------------------------------------------------------------
@_record(7, 60.0)
def test_c07_target_immutability(tmp_path):
    """stop-gradient and target immutability"""
    cfg = tiny_config(tmp_path)
    cfg.optim.batch_size = 4
    cfg.optim.total_epochs = 20  # 5 steps per epoch -> 100 steps
    cfg.validate()
    records = make_synthetic_dataset(5, 4, 64, 32, seed=7, val_fraction=0.0)
    trainer = Pretrainer(cfg, records)
    probe = make_batch(records[:6], cfg, epoch=1000, b=0)
    before = {n: t(probe.ref, probe.ref_meta).clone() for n, t in trainer.targets.items()}
    buffers = {n: [b.clone() for b in t.buffers()] for n, t in trainer.targets.items()}
    steps = 0
    for epoch in range(cfg.optim.total_epochs):
        trainer.epoch = epoch
        for batch in epoch_batches(trainer.train_set, cfg, epoch):
            trainer.train_step(batch)
            steps += 1
    assert steps == 100
    for n, t in trainer.targets.items():
        assert torch.equal(t(probe.ref, probe.ref_meta), before[n])
        assert all(torch.equal(a, b) for a, b in zip(t.buffers(), buffers[n]))
        assert not any(p.requires_grad for p in t.parameters())
    return f"{steps} steps, outputs bit-identical"


# 8 -------------------------------------------------------------------------
@pytest.mark.slow
@_record(8, 15 * 60.0)
def test_c08_end_to_end_distillation(tmp_path):
    """end-to-end distillation"""
    cfg = RunConfig()
    cfg.output_dir = str(tmp_path / "distill")
    records = load_or_make_dataset(cfg)
    baseline = Pretrainer(cfg, records)
    baseline.model.eval()
    random_top1 = knn_eval(baseline.model.features, baseline.train_set, baseline.val_set, cfg).top1
    result = run_pretrain(cfg, records=records)
    result.trainer.model.eval()
    trained = result.trainer.knn_snapshot().top1
    losses = [r["loss_total"] for r in read_log(result.log_path) if r["kind"] == "train"]
    smooth = moving_average(losses, 20)
    drop = 1 - smooth[-1] / smooth[0]
    detail = f"loss {smooth[0]:.3f}->{smooth[-1]:.3f} (drop {drop:.0%}), kNN {trained:.2f} vs random-init {random_top1:.2f}"
    assert drop >= 0.5, detail
    assert trained >= 0.60, detail
    assert trained >= random_top1 + 0.20, detail
    return detail


# 9 -------------------------------------------------------------------------
@_record(9, 5.0)
def test_c09_ensemble_decomposition():
    """ensemble decomposition"""
    g = torch.Generator().manual_seed(9)
    worst = 0.0
    for pool in (True, False):
        cfg = LossConfig(temporal_pool=pool)
        qa = [torch.randn(4, 3, 12, generator=g, dtype=torch.float64) for _ in range(2)]
        qb = [torch.randn(4, 3, 7, generator=g, dtype=torch.float64) for _ in range(2)]
        ka = torch.randn(4, 3, 12, generator=g, dtype=torch.float64)
        kb = torch.randn(4, 3, 7, generator=g, dtype=torch.float64)
        total, _ = ensemble_loss({"A": qa, "B": qb}, {"A": ka, "B": kb}, cfg)
        parts = iboot_loss(qa, ka, pool) + iboot_loss(qb, kb, pool)
        worst = max(worst, abs(total.item() - parts.item()))
    assert worst <= 1e-10, f"error {worst:.1e}"
    return f"max error {worst:.1e}"


# 10 ------------------------------------------------------------------------
@_record(10, 5.0)
def test_c10_semi_split():
    """semi-split exactness"""
    from iboot.dataset import VideoRecord

    blank = np.zeros((1, 1, 1, 3), np.uint8)
    recs = [VideoRecord(f"c{c}_{i}", blank, c) for c in range(5) for i in range(100)]
    for seed in range(20):
        ten = semi_split(recs, 0.10, seed)
        one = semi_split(recs, 0.01, seed)
        assert np.bincount([r.label for r in ten]).tolist() == [10] * 5
        assert np.bincount([r.label for r in one]).tolist() == [1] * 5
        assert {r.id for r in one} <= {r.id for r in ten}, f"not nested for seed {seed}"
    return "10/class and 1/class, nested across 20 seeds"


# 11 ------------------------------------------------------------------------
@_record(11, 1.0)
def test_c11_ema():
    """EMA update"""
    torch.manual_seed(11)
    cfg = EncoderConfig(widths=(4, 8, 8), proj_hidden=16, proj_dim=8, pred_hidden=16)
    online = OnlineNetwork(cfg, {"t": 6}).double()
    mom = MomentumBranch(online)
    with torch.no_grad():
        for p in mom.parameters():
            p.normal_()
    snap = [p.clone() for p in mom.parameters()]
    ema_update(mom, online, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(mom.parameters(), snap))
    ema_update(mom, online, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(mom.parameters(), online.parameters()))
    with torch.no_grad():
        for p in mom.parameters():
            p.zero_()
    ema_update(mom, online, 0.5)
    worst = max((a - b / 2).abs().max().item() for a, b in zip(mom.parameters(), online.parameters()))
    assert worst <= 1e-12
    return f"m=1 identity, m=0 copy, m=0.5 error {worst:.1e}"


# 12 ------------------------------------------------------------------------
@_record(12, 120.0)
def test_c12_checkpoint_round_trip(tmp_path):
    """checkpoint round-trip"""
    full = run_pretrain(tiny_config(tmp_path / "a"))
    part_cfg = tiny_config(tmp_path / "b")
    part = run_pretrain(part_cfg, stop_after_epoch=1)
    resumed = run_pretrain(part_cfg, resume=part.checkpoints[0])
    next_step = part.trainer.step

    def loss_at(path, step):
        return next(r["loss_total"] for r in read_log(path) if r["kind"] == "train" and r["step"] == step)

    a, b = loss_at(full.log_path, next_step), loss_at(resumed.log_path, next_step)
    assert abs(a - b) <= 1e-6, f"{a} vs {b}"
    return f"step {next_step} loss {a:.6f} vs {b:.6f}"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
