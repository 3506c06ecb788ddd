"""Acceptance criteria 1-10, one printed PASS/FAIL line each.

Criteria 7, 8 and 10 train real adapters and take minutes; they carry the
``slow`` marker so ``-m "not slow"`` gives a quick pass over the rest.
"""

import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from inbetween.backbone import BackboneConfig, forward, init_backbone, params_checksum
from inbetween.conditioning import CodecConfig, decode_latent, encode_image
from inbetween.data import GenConfig, few_shot_sample, generate_synthetic, split_holdout
from inbetween.flow_matching import SamplerConfig, TrainConfig, euler_sample, fm_loss, train
from inbetween.harness.checkpoint import ChecksumMismatch, load_checkpoint, save_checkpoint
from inbetween.harness.config import RunConfig
from inbetween.harness.runner import backbone_for, encode_manifest, evaluate_model, frozen_model, run_ablation, train_adapter
from inbetween.lora import LoRAConfig, inject, merge, trainable_parameters
from inbetween.metrics import (
    FeatureExtractor,
    estimate_flow,
    fid,
    flolpips,
    psnr,
    straightness_from_embeddings,
)

from .conftest import ACCEPTANCE, TINY, random_cond, random_latent

# toy-scale learning rate for the end-to-end runs (the library default is 1e-4)
TOY_LR = 3e-3


def verdict(n: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail} ({seconds:.1f} s)"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def toy_config(**train_kw) -> RunConfig:
    cfg = RunConfig()
    cfg.train = replace(cfg.train, learning_rate=TOY_LR, **train_kw)
    return cfg


@pytest.fixture(scope="module")
def toy_pool(tmp_path_factory):
    """512 synthetic 32x32 triplets; the last 32 (by id) are held out."""
    root = tmp_path_factory.mktemp("accept")
    manifest = generate_synthetic(GenConfig(image_size=32, n_triplets=512, seed=0), root / "data")
    pool, held = split_holdout(manifest, 32)
    return root, pool, held


@pytest.fixture(scope="module")
def trained_100(toy_pool):
    """Rank-8 adapter after exactly 100 AdamW steps (8 triplets, batch 4, 50 epochs)."""
    _, pool, _ = toy_pool
    cfg = toy_config(epochs=50)
    subset = few_shot_sample(pool, 8, seed=0)
    bcfg = backbone_for(cfg.resolved(), (32, 32))
    before = params_checksum(init_backbone(bcfg))
    t0 = time.perf_counter()
    model, history = train_adapter(subset, cfg, bcfg)
    assert len(history.step_losses) == 100
    return model, before, time.perf_counter() - t0


def test_criterion_01_init_identity():
    t0 = time.perf_counter()
    cfg = BackboneConfig(latent_hw=(16, 16))
    base = init_backbone(cfg)
    model = inject(init_backbone(cfg), cfg, LoRAConfig(rank=8))
    same = 0
    for s in range(10):
        z, c, t = random_latent(cfg, s), random_cond(cfg, s), s / 9
        same += torch.equal(model(z, t, c), forward(base, z, t, c, cfg))
    verdict(1, "LoRA init-identity", same == 10, f"{same}/10 inputs bitwise equal", time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_02_merge_equivalence(trained_100):
    model, _, train_s = trained_100
    t0 = time.perf_counter()
    merged = merge(model)
    worst = 0.0
    for s in range(10):
        z, c = random_latent(model.config, s), random_cond(model.config, s)
        worst = max(worst, (forward(merged, z, s / 9, c, model.config) - model(z, s / 9, c)).abs().max().item())
    verdict(2, "merge equivalence", worst <= 1e-5, f"max |merged - adapted| = {worst:.2e} (<= 1e-5) after 100 steps",
            train_s + time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_03_freeze_integrity(trained_100, tmp_path):
    model, before, _ = trained_100
    t0 = time.perf_counter()
    unchanged = params_checksum(model.base) == before
    save_checkpoint(model, tmp_path / "a.e2i")
    load_checkpoint(tmp_path / "a.e2i", base=model.base)
    try:
        load_checkpoint(tmp_path / "a.e2i", base=init_backbone(replace(model.config, init_seed=1)))
        rejected = False
    except ChecksumMismatch:
        rejected = True
    verdict(3, "freeze integrity", unchanged and rejected,
            f"base checksum unchanged={unchanged}, mismatched base rejected={rejected}", time.perf_counter() - t0)


def test_criterion_04_gradient_correctness():
    t0 = time.perf_counter()
    model = inject(init_backbone(TINY, torch.float64), TINY, LoRAConfig(rank=4))
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for ad in model.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape, generator=g, dtype=torch.float64) * 0.1)
    z = random_latent(TINY, 1, batch=3, dtype=torch.float64)
    cond = random_cond(TINY, 1, batch=3, dtype=torch.float64)
    eps = torch.randn(z.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([0.15, 0.5, 0.85], dtype=torch.float64)
    _, grads = fm_loss(model, z, cond, t=t, noise=eps)
    named = dict(trainable_parameters(model))
    keys = sorted(named)
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        name = keys[int(torch.randint(len(keys), (1,), generator=g))]
        p = named[name]
        idx = tuple(int(torch.randint(s, (1,), generator=g)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = fm_loss(model, z, cond, t=t, noise=eps, params=[])[0].item()
            p[idx] = orig - h
            down = fm_loss(model, z, cond, t=t, noise=eps, params=[])[0].item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grads[name][idx].item() - fd) / max(abs(fd), 1e-8))
    verdict(4, "gradient correctness", worst <= 1e-3, f"max relative error {worst:.2e} over 20 LoRA elements (<= 1e-3)",
            time.perf_counter() - t0)


def test_criterion_05_sampler_exactness():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    eps0 = torch.randn(12, 16, 16, generator=g)
    target = torch.randn(12, 16, 16, generator=g)
    errs = {}
    for steps in (1, 10, 40):
        out = euler_sample(lambda z, t, c: eps0 - target, None, eps0.shape, SamplerConfig(steps=steps), noise=eps0)
        errs[steps] = (out - target).abs().max().item()
    ok = max(errs.values()) <= 1e-5
    verdict(5, "sampler exactness", ok, ", ".join(f"steps={k}: {v:.1e}" for k, v in errs.items()), time.perf_counter() - t0)


def test_criterion_06_codec_round_trip():
    t0 = time.perf_counter()
    cfg = CodecConfig()
    worst = 0.0
    for s in range(100):
        img = np.random.default_rng(s).random((32, 32, 3))
        worst = max(worst, float(np.abs(decode_latent(encode_image(img, cfg), cfg) - img).max()))
    verdict(6, "codec round trip", worst <= 1e-5, f"max error {worst:.1e} over 100 images (<= 1e-5)", time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_07_few_shot_unlock(toy_pool):
    _, pool, held = toy_pool
    t0 = time.perf_counter()
    cfg = toy_config(epochs=10)
    subset = few_shot_sample(pool, 64, seed=0)
    model, history = train_adapter(subset, replace(cfg, lora=LoRAConfig(rank=8)))
    fx = FeatureExtractor(seed=0)
    metrics = ("psnr", "lpips")
    adapted = evaluate_model(model, held, cfg, metrics, "lora", fx)
    baseline = evaluate_model(frozen_model(cfg.resolved(), model.config), held, cfg, metrics, "baseline", fx)
    gain = adapted.psnr_db - baseline.psnr_db
    ok = len(history.step_losses) == 160 and gain >= 2.0 and adapted.lpips < baseline.lpips
    verdict(7, "few-shot unlock", ok,
            f"PSNR {baseline.psnr_db:.2f} -> {adapted.psnr_db:.2f} dB (gain {gain:+.2f}, need >= 2), "
            f"perceptual {baseline.lpips:.4f} -> {adapted.lpips:.4f}", time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_08_data_scaling_trend(toy_pool):
    _, pool, held = toy_pool
    t0 = time.perf_counter()
    result = run_ablation(pool, held, [4, 8], [64, 128, 256], toy_config(epochs=10), ("psnr",))
    cells = ", ".join(f"r{r.rank}/N{r.n_train}: {r.report.psnr_db:.2f}" for r in result.rows[1:])
    status = "no warning" if not result.warnings else "WARNING " + "; ".join(result.warnings)
    print(result.to_markdown())
    # soft criterion: a violated trend is reported, never failed
    verdict(8, "data-scaling trend (soft)", len(result.rows) == 7, f"{cells}; {status}", time.perf_counter() - t0)


def test_criterion_09_metric_units():
    t0 = time.perf_counter()
    fx = FeatureExtractor(seed=0)
    a = np.zeros((8, 8, 3))
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((10, 6))
    s1 = np.array([-1.0, 1.0]) / np.sqrt(2)
    frame = rng.random((16, 16, 3))
    flow = estimate_flow(frame, frame)
    checks = {
        "psnr(MSE=0.01)=20": psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12),
        "fid(identical)<=1e-6": fid(feats, feats) <= 1e-6,
        "fid 1-D mean shift=1": fid(s1, s1 + 1) == pytest.approx(1.0, abs=1e-9),
        "fid 1-D sigma 1 vs 2=1": fid(s1, 2 * s1) == pytest.approx(1.0, abs=1e-9),
        "PS(collinear)=180": straightness_from_embeddings([np.zeros(3), np.ones(3), 2 * np.ones(3)]) == pytest.approx(180.0),
        "PS(reversal)=0": straightness_from_embeddings([np.zeros(2), np.ones(2), np.zeros(2)]) == pytest.approx(0.0),
        "flolpips(pred=gt)=0": flolpips(frame, frame[::-1], frame, frame, fx) == 0.0,
        "HS zero flow": max(np.abs(flow.u).max(), np.abs(flow.v).max()) <= 1e-6,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(9, "metric unit suite", not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold"
            + (f"; failed: {failed}" if failed else ""), time.perf_counter() - t0)


def _pipeline(workdir: Path) -> dict[str, bytes]:
    env = dict(os.environ, E2I_THREADS="0")
    ini = workdir / "run.ini"
    ini.write_text(f"[train]\nlearning_rate = {TOY_LR}\n")

    def cli(*args):
        subprocess.run([sys.executable, "-m", "inbetween.harness.cli", *args], check=True, env=env,
                       capture_output=True, text=True)

    data, run = workdir / "data", workdir / "run"
    cli("gen-data", "--out", str(data), "--n", "96", "--size", "32", "--seed", "3")
    cli("train", "--data", str(data), "--n-train", "64", "--holdout", "8", "--out", str(run), "--config", str(ini))
    frames = data / "triplets" / "00090"
    cli("interpolate", "--ckpt", str(run / "adapter.e2i"), "--frame0", str(frames / "prev.ppm"),
        "--frame1", str(frames / "next.ppm"), "--out", str(workdir / "mid.ppm"))
    cli("evaluate", "--ckpt", str(run / "adapter.e2i"), "--data", str(data), "--holdout", "8",
        "--report", str(workdir / "report.json"), "--with-baseline")
    return {
        "checkpoint": (run / "adapter.e2i").read_bytes(),
        "history": (run / "history.json").read_bytes(),
        "frame": (workdir / "mid.ppm").read_bytes(),
        "report": (workdir / "report.json").read_bytes(),
    }


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = [k for k in first if first[k] == second[k]]
    verdict(10, "determinism", len(same) == len(first),
            f"bit-identical across two runs: {', '.join(same)} ({len(same)}/{len(first)})", time.perf_counter() - t0)
