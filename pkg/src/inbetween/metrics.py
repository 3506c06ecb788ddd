"""Evaluation metrics: PSNR, FID, a feature-space perceptual distance, its
flow-weighted variant, perceptual straightness, and a Horn-Schunck flow estimator.

The perceptual features come from a frozen seeded random conv bank rather than
a pretrained network. Anything with ``spatial_maps`` and ``global_vector``
methods can be passed in its place.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
ALL_METRICS = ("psnr", "lpips", "fid", "flolpips", "ps")
FLOW_TOL = 1e-6


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# --- features ---------------------------------------------------------------------


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return x.reshape(h // 2, 2, w // 2, 2, *x.shape[2:]).mean(axis=(1, 3))


def _conv3x3(img: np.ndarray, filters: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (3, 3), axis=(0, 1))  # H, W, 3, kh, kw
    return np.einsum("hwcij,ocij->hwo", win, filters)


class FeatureExtractor:
    """Frozen random conv features at scales 1, 1/2 and 1/4, unit-normalized over channels."""

    def __init__(self, seed: int = 0, channels: int = 8, n_scales: int = 3, pool_grid: int = 2):
        rng = np.random.default_rng([seed, 0xF1])
        self.filters = [rng.standard_normal((channels, 3, 3, 3)) / math.sqrt(27) for _ in range(n_scales)]
        self.pool_grid = pool_grid
        self.seed = seed

    def spatial_maps(self, img) -> list[np.ndarray]:
        x = np.asarray(img, dtype=np.float64) - 0.5
        maps = []
        for k, f in enumerate(self.filters):
            if k:
                x = _avg_pool2(x)
            feat = _conv3x3(x, f)
            maps.append(feat / (np.linalg.norm(feat, axis=-1, keepdims=True) + 1e-10))
        return maps

    def global_vector(self, img) -> np.ndarray:
        g = self.pool_grid
        parts = []
        for m in self.spatial_maps(img):
            rows = np.array_split(np.arange(m.shape[0]), g)
            cols = np.array_split(np.arange(m.shape[1]), g)
            for r in rows:
                for c in cols:
                    parts.append(m[r[0] : r[-1] + 1, c[0] : c[-1] + 1].mean(axis=(0, 1)))
        return np.concatenate(parts)


def distance_map(a, b, fx: FeatureExtractor, scale: int = 0) -> np.ndarray:
    """Per-pixel squared feature distance (channel mean) at one scale."""
    fa = fx.spatial_maps(a)[scale]
    fb = fx.spatial_maps(b)[scale]
    return np.mean((fa - fb) ** 2, axis=-1)


def perceptual_distance(a, b, fx: FeatureExtractor) -> float:
    a, b = _check_pair(a, b)
    ma, mb = fx.spatial_maps(a), fx.spatial_maps(b)
    return float(np.mean([np.mean((x - y) ** 2) for x, y in zip(ma, mb)]))


# --- FID ----------------------------------------------------------------------------


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _gaussian_fit(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"FID needs at least 2 samples per set, got {x.shape[0]}")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def frechet_distance(mu1, s1, mu2, s2) -> float:
    root1 = _sqrt_psd(s1)
    inner = root1 @ s2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_covmean = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean)
    return max(value, 0.0)


def fid(features_a, features_b) -> float:
    mu1, s1 = _gaussian_fit(features_a)
    mu2, s2 = _gaussian_fit(features_b)
    if mu1.shape != mu2.shape:
        raise ValueError(f"feature dimension mismatch: {mu1.shape[0]} vs {mu2.shape[0]}")
    return frechet_distance(mu1, s1, mu2, s2)


# --- optical flow -----------------------------------------------------------------------


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ LUMA if img.ndim == 3 else img


def estimate_flow(a, b, smoothness: float = 0.1, iterations: int = 100) -> FlowField:
    """Horn-Schunck flow from ``a`` to ``b``.

    Spatial gradients are central differences of the mean frame, so the
    estimate is (nearly) antisymmetric under swapping the frames. The
    smoothness weight enters squared, as the classic alpha^2 term.
    """
    a, b = _check_pair(a, b)
    ga, gb = _gray(a), _gray(b)
    mean = (ga + gb) / 2
    iy, ix = np.gradient(mean)
    it = gb - ga
    denom = smoothness**2 + ix**2 + iy**2
    u = np.zeros_like(mean)
    v = np.zeros_like(mean)
    for _ in range(iterations):
        pu = np.pad(u, 1, mode="edge")
        pv = np.pad(v, 1, mode="edge")
        ubar = (pu[:-2, 1:-1] + pu[2:, 1:-1] + pu[1:-1, :-2] + pu[1:-1, 2:]) / 4
        vbar = (pv[:-2, 1:-1] + pv[2:, 1:-1] + pv[1:-1, :-2] + pv[1:-1, 2:]) / 4
        resid = (ix * ubar + iy * vbar + it) / denom
        u = ubar - ix * resid
        v = vbar - iy * resid
    return FlowField(u, v)


def flolpips(prev, nxt, gt_mid, pred_mid, fx: FeatureExtractor) -> float:
    """Full-scale distance map between gt and prediction, weighted by flow disagreement.

    Weights are ``|flow(prev->pred) - flow(prev->gt)|`` normalized to sum to
    one, falling back to uniform weights when the flows agree everywhere
    (every difference within ``FLOW_TOL`` px, so rounding noise is not
    amplified into a weight map).
    """
    prev, nxt = _check_pair(prev, nxt)
    gt_mid, pred_mid = _check_pair(gt_mid, pred_mid)
    _check_pair(prev, gt_mid)
    dmap = distance_map(gt_mid, pred_mid, fx)
    f_pred = estimate_flow(prev, pred_mid)
    f_gt = estimate_flow(prev, gt_mid)
    w = np.hypot(f_pred.u - f_gt.u, f_pred.v - f_gt.v)
    if w.max() <= FLOW_TOL:
        w = np.full_like(w, 1.0 / w.size)
    else:
        w = w / w.sum()
    return float(np.sum(w * dmap))


# --- perceptual straightness ------------------------------------------------------------


def straightness_from_embeddings(xs: Sequence[np.ndarray]) -> float:
    xs = [np.asarray(x, dtype=np.float64).ravel() for x in xs]
    if len(xs) < 3:
        raise ValueError(f"perceptual straightness needs at least 3 frames, got {len(xs)}")
    d = [xs[i + 1] - xs[i] for i in range(len(xs) - 1)]
    scores = []
    for d0, d1 in zip(d[:-1], d[1:]):
        n0, n1 = np.linalg.norm(d0), np.linalg.norm(d1)
        if n0 < 1e-12 or n1 < 1e-12:
            theta = 0.0
        else:
            # atan2 form stays accurate near 0 and 180 degrees, where acos is ill-conditioned
            u, v = d0 / n0, d1 / n1
            theta = math.degrees(2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))
        scores.append(180.0 - theta)
    return float(np.mean(scores))


def perceptual_straightness(frames: Sequence, fx: FeatureExtractor) -> float:
    if len(frames) < 3:
        raise ValueError(f"perceptual straightness needs at least 3 frames, got {len(frames)}")
    return straightness_from_embeddings([fx.global_vector(f) for f in frames])


# --- dataset evaluation -------------------------------------------------------------------


@dataclass
class MetricReport:
    n_samples: int
    psnr_db: float | None = None
    lpips: float | None = None
    fid: float | None = None
    flolpips: float | None = None
    ps: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_samples", "config"],
    "properties": {
        "n_samples": {"type": "integer", "minimum": 1},
        "psnr_db": {"type": "number", "maximum": PSNR_CAP},
        "lpips": {"type": "number", "minimum": 0},
        "fid": {"type": "number", "minimum": 0},
        "flolpips": {"type": "number", "minimum": 0},
        "ps": {"type": "number", "minimum": 0, "maximum": 180},
        "config": {"type": "object"},
    },
    "additionalProperties": False,
}


def evaluate_dataset(
    interpolate_fn: Callable,
    triplets: Iterable,
    fx: FeatureExtractor | None = None,
    metrics: Iterable[str] = ALL_METRICS,
    config: dict | None = None,
) -> MetricReport:
    """Run ``interpolate_fn(prev, next)`` on every triplet and aggregate metrics.

    ``triplets`` is a manifest (anything with ``.entries`` and
    ``load_triplet``) or an iterable of ``(prev, mid, next)`` arrays; manifests
    are visited in id order.
    """
    metrics = tuple(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {list(ALL_METRICS)}")
    fx = fx or FeatureExtractor()
    if hasattr(triplets, "entries"):
        manifest = triplets
        items = (manifest.load_triplet(e) for e in sorted(manifest.entries, key=lambda e: e["id"]))
    else:
        items = iter(triplets)

    psnrs, lp, flo, ps, feats_pred, feats_gt = [], [], [], [], [], []
    n = 0
    for prev, mid, nxt in items:
        pred = interpolate_fn(prev, nxt)
        n += 1
        if "psnr" in metrics:
            psnrs.append(psnr(pred, mid))
        if "lpips" in metrics:
            lp.append(perceptual_distance(pred, mid, fx))
        if "flolpips" in metrics:
            flo.append(flolpips(prev, nxt, mid, pred, fx))
        if "ps" in metrics:
            ps.append(perceptual_straightness([prev, pred, nxt], fx))
        if "fid" in metrics:
            feats_pred.append(fx.global_vector(pred))
            feats_gt.append(fx.global_vector(mid))
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    report = MetricReport(n_samples=n, config=dict(config or {}))
    if psnrs:
        report.psnr_db = float(np.mean(psnrs))
    if lp:
        report.lpips = float(np.mean(lp))
    if flo:
        report.flolpips = float(np.mean(flo))
    if ps:
        report.ps = float(np.mean(ps))
    if feats_pred:
        if n >= 2:
            report.fid = fid(np.stack(feats_pred), np.stack(feats_gt))
    return report
