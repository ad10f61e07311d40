"""Desk-scale acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py). Run just this file with ``pytest -m acceptance``.
"""
import csv
import math
import time

import numpy as np
import pytest
import torch

from oracles import (batched_central_differences, conv_trans_loop, ga_weight_loop, np64, pooled_attention_loop,
                     st_mhsa_loop, trans_conv_loop)
from vidformer.cli import main as cli_main
from vidformer.config import get_profile
from vidformer.ctim import ConvTransBridge, TransConvBridge
from vidformer.dataio import ingest
from vidformer.evaluation import ablate, bland_altman, evaluate, write_bland_altman
from vidformer.global_branch import STMHSA
from vidformer.heads_loss import combined_loss, dual_objective, pearson_loss, smooth_l1_loss
from vidformer.local_branch import PooledAttention, ga_weight
from vidformer.model import VidFormer, init_params
from vidformer.sigproc import IbiSeries, estimate_hr, green_baseline, hrv_metrics, ssim
from vidformer.skinsim import BvpSpec, DatasetSpec, SceneConfig, make_dataset, render_clip, synth_bvp
from vidformer.training import ClipBank, TrainSettings, head_pearson_losses, train

pytestmark = pytest.mark.acceptance

VERDICTS: dict[int, str] = {}

# shared protocol for the generalization and ablation criteria
MODERATE = dict(noise_range=(1.0, 3.0), illum_amplitude_range=(0.0, 0.1))
GEN_STEPS = 2240
GEN_LR = 1e-3


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


def _randomize(module, gen, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def test_c01_gradient_integrity():
    torch.set_num_threads(1)
    model = init_params(get_profile("micro"), seed=0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # the conv-side bridge starts at zero; give it weights so its path is exercised
        for br in model.tc_bridges:
            br.proj.weight.copy_(torch.randn(br.proj.weight.shape, generator=g, dtype=torch.float64) * 0.3)
    x = torch.rand(1, 3, 10, 16, 16, generator=g, dtype=torch.float64)
    y = torch.randn(1, 10, generator=g, dtype=torch.float64)

    t0 = time.process_time()
    loss = dual_objective(*model(x), y)[0]
    analytic = torch.autograd.grad(loss, list(model.parameters()))
    names, numeric = batched_central_differences(model, lambda out: dual_objective(out[0], out[1], y)[0], (x,))
    elapsed = time.process_time() - t0

    total, bad, worst = 0, 0, 0.0
    for a, n in zip(analytic, numeric):
        a = a.reshape(-1)
        rel = (a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-6)
        total += a.numel()
        bad += int((rel > 1e-3).sum())
        worst = max(worst, float(rel.max()))
    verdict(1, bad == 0 and elapsed <= 120,
            f"{total - bad}/{total} parameters within 1e-3 (worst {worst:.1e}), {elapsed:.0f}s CPU")


def test_c02_formula_oracles():
    worst = {}
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        for kind, shape in (("spatial", (1, 8, 6, 4, 4)), ("temporal", (1, 8, 6, 4, 4))):
            m = PooledAttention(8, heads=4, kind=kind).double()
            _randomize(m, g)
            x = torch.randn(*shape, generator=g, dtype=torch.float64)
            params = (np64(m.proj1.weight)[:, :, 0, 0, 0], np64(m.proj1.bias),
                      np64(m.proj2.weight)[:, :, 0, 0, 0], np64(m.proj2.bias))
            ref, _ = pooled_attention_loop(np64(x), *params, heads=4, kind=kind)
            worst[f"{kind}_attention"] = max(worst.get(f"{kind}_attention", 0), np.abs(np64(m(x)) - ref).max())

        x = torch.randn(2, 4, 5, 3, 3, generator=g, dtype=torch.float64)
        s = torch.randn(2, 4, 1, 3, 3, generator=g, dtype=torch.float64)
        t = torch.randn(2, 4, 5, 1, 1, generator=g, dtype=torch.float64)
        worst["ga_weight"] = max(worst.get("ga_weight", 0),
                                 np.abs(np64(ga_weight(x, s, t)) - ga_weight_loop(np64(x), np64(s), np64(t))).max())

        m = STMHSA(8, 2).double()
        _randomize(m, g)
        x = torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
        xct = torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
        branch = {k: (np64(n.weight), np64(n.bias), np64(a.qkv.weight), np64(a.qkv.bias), np64(a.out.weight),
                      np64(a.out.bias)) for k, n, a in (("s", m.norm_s, m.attn_s), ("t", m.norm_t, m.attn_t))}
        ref = st_mhsa_loop(np64(x), np64(xct), (2, 2, 2), branch, 2)
        worst["st_mhsa"] = max(worst.get("st_mhsa", 0), np.abs(np64(m(x, xct, (2, 2, 2))) - ref).max())

        br = TransConvBridge(4, 3, (5, 6, 4), (2, 3, 2)).double()
        _randomize(br, g)
        xt = torch.randn(2, 12, 4, generator=g, dtype=torch.float64)
        ref = trans_conv_loop(np64(xt), (2, 3, 2), (5, 6, 4), np64(br.proj.weight)[:, :, 0, 0, 0], np64(br.proj.bias))
        worst["trans_conv"] = max(worst.get("trans_conv", 0), np.abs(np64(br(xt)) - ref).max())

        br = ConvTransBridge(3, 4, (2, 2, 2)).double()
        _randomize(br, g)
        xc = torch.randn(2, 3, 4, 6, 4, generator=g, dtype=torch.float64)
        ref = conv_trans_loop(np64(xc), (2, 2, 2), np64(br.proj.weight), np64(br.proj.bias),
                              np64(br.norm.weight), np64(br.norm.bias))
        worst["conv_trans"] = max(worst.get("conv_trans", 0), np.abs(np64(br(xc)) - ref).max())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, all(v <= 1e-5 for v in worst.values()), f"20 seeds, max abs error: {detail}")


def test_c03_loss_identities():
    g = torch.Generator().manual_seed(0)
    y = torch.randn(4, 50, generator=g, dtype=torch.float64)
    Y = torch.randn(4, 50, generator=g, dtype=torch.float64)
    checks = {
        "L_p(y,y)=0": abs(float(pearson_loss(y, y))) <= 1e-6,
        "L_p(y,-y)=2": abs(float(pearson_loss(y, -y)) - 2) <= 1e-6,
        "affine": abs(float(pearson_loss(3.7 * y - 1.2, Y)) - float(pearson_loss(y, Y))) <= 1e-6,
    }
    diffs = torch.tensor([[0.0, 0.5, 2.0]], dtype=torch.float64)
    per_point = [float(smooth_l1_loss(diffs[:, i:i + 1], torch.zeros(1, 1, dtype=torch.float64))) for i in range(3)]
    checks["smooth_l1 0/0.125/1.5"] = per_point == [0.0, 0.125, 1.5]
    mean = (pearson_loss(y, Y) + smooth_l1_loss(y, Y)) / 2
    checks["alpha=0.5 mean"] = abs(float(combined_loss(y, Y, 0.5)) - float(mean)) <= 1e-12
    failed = [k for k, ok in checks.items() if not ok]
    verdict(3, not failed, "all identities hold" if not failed else f"failed: {failed}")


def test_c04_shape_contract():
    cfg = get_profile("paper")
    with torch.device("meta"):
        r1, r2 = VidFormer(cfg)(torch.empty(2, 3, 250, 128, 128))
    ok = cfg.num_patches == 640 and r1.shape == (2, 250) and r2.shape == (2, 250)
    verdict(4, ok, f"P={cfg.num_patches}, R1 {tuple(r1.shape)}, R2 {tuple(r2.shape)}")


def test_c05_overfit(tmp_path):
    torch.set_num_threads(1)
    index = ingest(make_dataset(tmp_path, DatasetSpec(n_clips=8, duration=5.0, seed=1)))
    cfg = get_profile("test")
    t0 = time.process_time()
    res = train(cfg, index, TrainSettings(lr_max=GEN_LR, steps=300, seed=0))
    elapsed = time.process_time() - t0
    lp = head_pearson_losses(res.model, ClipBank(index.entries, cfg))
    ok = lp["r1"] <= 0.05 and lp["r2"] <= 0.05 and elapsed <= 600
    verdict(5, ok, f"L_p(R1)={lp['r1']:.4f}, L_p(R2)={lp['r2']:.4f}, {elapsed:.0f}s CPU")


@pytest.fixture(scope="module")
def generalization(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    train_idx = ingest(make_dataset(root / "train", DatasetSpec(n_clips=64, duration=10.0, seed=0, **MODERATE)))
    test_idx = ingest(make_dataset(root / "test", DatasetSpec(n_clips=16, duration=10.0, seed=1000, **MODERATE)))
    return train_idx, test_idx, {}


def _ablation(generalization, flags):
    train_idx, test_idx, cache = generalization
    t0 = time.process_time()
    run = ablate(get_profile("test"), [flags], train_idx, test_idx,
                 TrainSettings(lr_max=GEN_LR, steps=GEN_STEPS, seed=0), cache=cache)[0]
    return run.report, time.process_time() - t0


def test_c06_generalization(generalization):
    torch.set_num_threads(1)
    rep, elapsed = _ablation(generalization, ())
    ok = rep.mae <= 3.0 and rep.r >= 0.95 and elapsed <= 45 * 60
    verdict(6, ok, f"MAE {rep.mae:.2f} bpm, r {rep.r:.3f}, {rep.n_failed_windows} failed windows, {elapsed:.0f}s CPU")


def test_c07_ablation_direction(generalization):
    torch.set_num_threads(1)
    full, _ = _ablation(generalization, ())
    maes = {flag: _ablation(generalization, (flag,))[0].mae for flag in ("GA", "S-MHSA", "LCB", "C-TB")}
    # a variant whose every window fails has no MAE; count it as worse than the full model
    worse = {k: (math.isnan(v) or v >= full.mae) for k, v in maes.items()}
    detail = f"full {full.mae:.2f}; " + ", ".join(f"w/o {k} {v:.2f}" for k, v in maes.items())
    verdict(7, all(worse.values()), detail)


def test_c08_signal_toolkit():
    t = np.arange(300) / 30
    hrs = [estimate_hr(np.sin(2 * np.pi * f * t), 30) for f in (1.0, 1.5, 2.0)]
    hr_ok = all(abs(h - e) <= 0.5 for h, e in zip(hrs, (60, 90, 120)))

    rng = np.random.default_rng(0)
    ibi = 0.8 + 0.05 * rng.standard_normal(120)
    m = hrv_metrics(IbiSeries.from_peaks(np.cumsum(ibi)))
    nu_ok = abs(m.lf_nu + m.hf_nu - 1) <= 1e-12

    img = rng.uniform(0, 255, (32, 32))
    ssim_ok = ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    errs = []
    for hr in (55.0, 80.0, 110.0, 140.0):
        bvp = synth_bvp(BvpSpec(hr=hr, rate=30, duration=10))
        scene = SceneConfig(height=16, width=16)
        frames, gt, _ = render_clip(bvp.waveform, scene)
        errs.append(abs(estimate_hr(green_baseline(frames, scene.skin_mask(), 30), 30) - estimate_hr(gt.samples, 30)))
    green_ok = max(errs) <= 2.0
    detail = (f"HR {[round(h, 2) for h in hrs]}, |LF+HF-1|={abs(m.lf_nu + m.hf_nu - 1):.0e}, "
              f"ssim(x,x)={ssim(img, img):.6f}, green baseline max err {max(errs):.2f} bpm")
    verdict(8, hr_ok and nu_ok and ssim_ok and green_ok, detail)


def test_c09_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--out", str(data), "--n-clips", "3", "--duration", "6", "--seed", "2"]) == 0
    (tmp_path / "micro.cfg").write_text("profile = micro\nseed = 5\n")
    for run in ("a", "b"):
        assert cli_main(["train", "--config", str(tmp_path / "micro.cfg"), "--data", str(data),
                         "--out", str(tmp_path / run), "--steps", "5", "--lr", "1e-3"]) == 0
        assert cli_main(["eval", "--ckpt", str(tmp_path / run / "model.pt"), "--data", str(data),
                         "--out", str(tmp_path / run / "eval")]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "eval").glob("*.csv"))
    same = [(tmp_path / "a" / "eval" / f).read_bytes() == (tmp_path / "b" / "eval" / f).read_bytes() for f in files]
    verdict(9, bool(files) and all(same), f"{sum(same)}/{len(files)} metric CSVs byte-identical")


def test_c10_bland_altman(tmp_path):
    gt = [60.0, 72.0, 85.0, 100.0, 120.0]
    et = [61.0, 70.5, 86.0, 103.0, 119.0]
    d = [b - a for a, b in zip(gt, et)]
    bias = sum(d) / 5
    sd = math.sqrt(sum((x - bias) ** 2 for x in d) / 4)
    write_bland_altman(bland_altman(gt, et), tmp_path / "pairs.csv", tmp_path / "limits.csv")
    with open(tmp_path / "limits.csv") as fh:
        lim = {k: float(v) for k, v in next(csv.DictReader(fh)).items()}
    ok = abs(lim["lower"] - (bias - 1.96 * sd)) <= 1e-9 and abs(lim["upper"] - (bias + 1.96 * sd)) <= 1e-9
    verdict(10, ok, f"bias {lim['bias']:.4f}, limits [{lim['lower']:.6f}, {lim['upper']:.6f}]")
