"""Glue between the data, model and metric modules: train, evaluate, ablate."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

from ..backbone import BackboneConfig, init_backbone
from ..data import DatasetManifest, few_shot_sample
from ..flow_matching import LatentTriplets, encode_triplets, interpolate, train
from ..lora import AdaptedModel, inject
from ..metrics import ALL_METRICS, FeatureExtractor, MetricReport, evaluate_dataset
from .config import RunConfig

log = logging.getLogger(__name__)


def backbone_for(cfg: RunConfig, image_hw: tuple[int, int]) -> BackboneConfig:
    p = cfg.codec.patch_factor
    h, w = image_hw
    return replace(cfg.backbone, latent_channels=cfg.codec.channels, latent_hw=(h // p, w // p))


def manifest_image_hw(manifest: DatasetManifest) -> tuple[int, int]:
    prev, _, _ = manifest.load_triplet(manifest.entries[0])
    return prev.shape[:2]


def encode_manifest(manifest: DatasetManifest, cfg: RunConfig, bcfg: BackboneConfig) -> LatentTriplets:
    return encode_triplets(
        manifest.triplets(),
        cfg.codec,
        prompt=cfg.prompt,
        semantic_seed=cfg.seeds.init,
        n_tokens=bcfg.k_semantic,
        d_model=bcfg.d_model,
    )


def frozen_model(cfg: RunConfig, bcfg: BackboneConfig) -> AdaptedModel:
    """The backbone with no adapters: the degraded baseline."""
    return AdaptedModel(base=init_backbone(bcfg), config=bcfg, adapters={}, lora_config=None)


def train_adapter(subset: DatasetManifest, cfg: RunConfig, bcfg: BackboneConfig | None = None, progress=None):
    cfg = cfg.resolved()
    bcfg = bcfg or backbone_for(cfg, manifest_image_hw(subset))
    data = encode_manifest(subset, cfg, bcfg)
    model = inject(init_backbone(bcfg), bcfg, cfg.lora)
    return train(model, data, cfg.train, progress=progress)


def interpolator(model: AdaptedModel, cfg: RunConfig):
    cfg = cfg.resolved()

    def fn(prev, nxt):
        return interpolate(model, prev, nxt, cfg.prompt, cfg.codec, cfg.sampler, semantic_seed=cfg.seeds.init)

    return fn


def evaluate_model(
    model: AdaptedModel,
    manifest: DatasetManifest,
    cfg: RunConfig,
    metrics=ALL_METRICS,
    label: str = "lora",
    fx: FeatureExtractor | None = None,
) -> MetricReport:
    cfg = cfg.resolved()
    echo = {
        "label": label,
        "rank": model.lora_config.rank if model.lora_config else None,
        "sampler_steps": cfg.sampler.steps,
        "noise_seed": cfg.sampler.noise_seed,
        "metrics": list(metrics),
    }
    return evaluate_dataset(interpolator(model, cfg), manifest, fx or FeatureExtractor(seed=0), metrics, echo)


@dataclass
class AblationRow:
    label: str
    rank: int | None
    n_train: int | None
    report: MetricReport
    final_loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rank": self.rank,
            "n_train": self.n_train,
            "final_epoch_loss": self.final_loss,
            "report": self.report.to_dict(),
        }


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def cell(self, rank: int, n: int) -> AblationRow:
        for row in self.rows:
            if row.rank == rank and row.n_train == n:
                return row
        raise KeyError((rank, n))

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows], "warnings": self.warnings}, indent=2) + "\n"

    def to_markdown(self) -> str:
        cols = [("PSNR", "psnr_db", "{:.2f}"), ("LPIPS", "lpips", "{:.4f}"), ("FID", "fid", "{:.4f}"),
                ("FloLPIPS", "flolpips", "{:.4f}"), ("PS", "ps", "{:.2f}")]
        lines = ["| Method | " + " | ".join(c[0] for c in cols) + " |", "|---" * (len(cols) + 1) + "|"]
        for row in self.rows:
            d = row.report.to_dict()
            vals = [fmt.format(d[key]) if key in d else "-" for _, key, fmt in cols]
            lines.append(f"| {row.label} | " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"


def check_data_trend(result: AblationResult, tolerance_db: float = 0.1) -> list[str]:
    """PSNR at the largest N should not fall below the smallest N by more than ``tolerance_db``."""
    warnings = []
    ranks = sorted({r.rank for r in result.rows if r.rank is not None})
    for rank in ranks:
        rows = sorted((r for r in result.rows if r.rank == rank), key=lambda r: r.n_train)
        if len(rows) < 2:
            continue
        lo, hi = rows[0], rows[-1]
        if hi.report.psnr_db < lo.report.psnr_db - tolerance_db:
            warnings.append(
                f"data-scaling trend violated at r={rank}: PSNR(N={hi.n_train})={hi.report.psnr_db:.2f} dB "
                f"< PSNR(N={lo.n_train})={lo.report.psnr_db:.2f} dB - {tolerance_db} dB"
            )
    return warnings


class AblationCellError(RuntimeError):
    pass


def run_ablation(
    pool: DatasetManifest,
    eval_set: DatasetManifest,
    ranks,
    sizes,
    cfg: RunConfig,
    metrics=ALL_METRICS,
) -> AblationResult:
    """Train and evaluate one adapter per (rank, N) cell plus the frozen baseline.

    Subsets come from a single seeded permutation, so N=64 is contained in
    N=128 and so on.
    """
    cfg = cfg.resolved()
    bcfg = backbone_for(cfg, manifest_image_hw(eval_set))
    fx = FeatureExtractor(seed=0)
    result = AblationResult()
    baseline = frozen_model(cfg, bcfg)
    result.rows.append(AblationRow("Baseline (frozen)", None, None, evaluate_model(baseline, eval_set, cfg, metrics, "baseline", fx)))
    for rank in ranks:
        for n in sizes:
            label = f"LoRA-r{rank}-N{n}"
            try:
                subset = few_shot_sample(pool, n, cfg.seeds.data)
                cell_cfg = replace(cfg, lora=replace(cfg.lora, rank=rank))
                model, history = train_adapter(subset, cell_cfg, bcfg)
                report = evaluate_model(model, eval_set, cell_cfg, metrics, label, fx)
            except Exception as exc:
                raise AblationCellError(f"ablation cell {label} failed: {exc}") from exc
            log.info("%s: PSNR %.2f dB", label, report.psnr_db if report.psnr_db is not None else float("nan"))
            result.rows.append(AblationRow(label, rank, n, report, history.epoch_means()[-1]))
    if "psnr" in metrics:
        result.warnings = check_data_trend(result)
        for w in result.warnings:
            log.warning(w)
    return result

