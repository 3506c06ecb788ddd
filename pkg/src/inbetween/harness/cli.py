"""Command line entry point: ``inbetween {gen-data,train,interpolate,evaluate,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from ..backbone import init_backbone
from ..data import GenConfig, few_shot_sample, generate_synthetic, load_manifest, read_image, split_holdout, write_image
from ..flow_matching import configure_threads, interpolate
from ..metrics import ALL_METRICS
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, RunConfig, load_config, override
from .runner import (
    AblationCellError,
    backbone_for,
    evaluate_model,
    frozen_model,
    manifest_image_hw,
    run_ablation,
    train_adapter,
)

log = logging.getLogger("inbetween")

CKPT_NAME = "adapter.e2i"


class CLIError(Exception):
    pass


def _csv_ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    seeds = override(
        cfg.seeds,
        init=getattr(args, "init_seed", None),
        data=getattr(args, "data_seed", None),
        noise=getattr(args, "noise_seed", None),
        train=getattr(args, "train_seed", None),
    )
    cfg = replace(cfg, seeds=seeds)
    cfg.lora = override(cfg.lora, rank=getattr(args, "rank", None), alpha=getattr(args, "alpha", None))
    cfg.train = override(
        cfg.train,
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch", None),
        learning_rate=getattr(args, "lr", None),
    )
    cfg.sampler = override(cfg.sampler, steps=getattr(args, "steps", None))
    return cfg


def _model_from_ckpt(path, cfg: RunConfig, image_hw):
    """Returns ``(model, cfg)``; a checkpoint's recorded prompt, codec and init seed win over ``cfg``."""
    if path is None:
        log.info("no checkpoint given: running the frozen baseline")
        return frozen_model(cfg, backbone_for(cfg.resolved(), image_hw)), cfg
    ckpt = load_checkpoint(path)
    extra = ckpt.header.get("extra") or {}
    if "prompt" in extra:
        cfg = replace(cfg, prompt=extra["prompt"])
    if "codec" in extra:
        cfg = replace(cfg, codec=override(cfg.codec, **extra["codec"]))
    if "seeds" in extra:
        cfg = replace(cfg, seeds=override(cfg.seeds, init=extra["seeds"]["init"]))
    model = restore_model(ckpt, init_backbone(ckpt.backbone_config))
    if model.config.latent_hw != backbone_for(cfg.resolved(), image_hw).latent_hw:
        raise CLIError(f"frames of size {image_hw} do not match the checkpoint's latent grid {model.config.latent_hw}")
    return model, cfg


def _eval_split(args):
    manifest = load_manifest(args.data)
    if args.holdout:
        _, manifest = split_holdout(manifest, args.holdout)
    if len(manifest) == 0:
        raise CLIError("evaluation dataset is empty")
    return manifest


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CLIError("n must be ≥ 1")
    cfg = GenConfig(
        image_size=args.size,
        n_triplets=args.n,
        max_shapes=args.shapes,
        pan_mode=args.pan,
        seed=args.seed,
    )
    manifest = generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest)} triplets to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.data)
    pool, _ = split_holdout(manifest, args.holdout) if args.holdout else (manifest, None)
    n = len(pool) if args.n_train == "any" else int(args.n_train)
    if n > len(pool):
        raise CLIError(f"--n-train {n} exceeds the {len(pool)} available training triplets")
    subset = few_shot_sample(pool, n, cfg.seeds.data)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from exc

    model, history = train_adapter(subset, cfg)
    rcfg = cfg.resolved()
    extra = {
        "prompt": rcfg.prompt,
        "codec": {"patch_factor": rcfg.codec.patch_factor, "mix_seed": rcfg.codec.mix_seed},
        "seeds": asdict(rcfg.seeds),
        "n_train": n,
        "train": rcfg.train.to_dict(),
    }
    save_checkpoint(model, out / CKPT_NAME, extra=extra)
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n", encoding="utf-8")
    means = history.epoch_means()
    print(f"trained {len(history.step_losses)} steps; epoch loss {means[0]:.4f} -> {means[-1]:.4f}; saved {out / CKPT_NAME}")
    return 0


def cmd_interpolate(args) -> int:
    cfg = _run_config(args)
    f0, f1 = read_image(args.frame0), read_image(args.frame1)
    if f0.shape != f1.shape:
        raise CLIError(f"frame sizes differ: {f0.shape} vs {f1.shape}")
    model, cfg = _model_from_ckpt(args.ckpt, cfg, f0.shape[:2])
    rcfg = cfg.resolved()
    out = interpolate(model, f0, f1, rcfg.prompt, rcfg.codec, rcfg.sampler, semantic_seed=rcfg.seeds.init)
    write_image(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(metrics) - set(ALL_METRICS)
    if bad:
        raise CLIError(f"unknown metrics {sorted(bad)}; choose from {','.join(ALL_METRICS)}")
    manifest = _eval_split(args)
    hw = manifest_image_hw(manifest)
    rows = []
    if args.ckpt:
        model, cfg = _model_from_ckpt(args.ckpt, cfg, hw)
        rows.append(evaluate_model(model, manifest, cfg, metrics, "lora"))
    if args.with_baseline or not args.ckpt:
        model, _ = _model_from_ckpt(None, cfg, hw)
        rows.append(evaluate_model(model, manifest, cfg, metrics, "baseline"))
    Path(args.report).write_text(json.dumps({"rows": [r.to_dict() for r in rows]}, indent=2) + "\n", encoding="utf-8")
    for r in rows:
        print(json.dumps(r.to_dict(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.data)
    pool, eval_set = split_holdout(manifest, args.holdout)
    if args.eval_n:
        eval_set = eval_set.with_entries(eval_set.entries[: args.eval_n])
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    result = run_ablation(pool, eval_set, args.ranks, args.sizes, cfg, metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(result.to_json(), encoding="utf-8")
    (out / "ablation.md").write_text(result.to_markdown(), encoding="utf-8")
    print(result.to_markdown(), end="")
    for w in result.warnings:
        print(f"WARNING: {w}", file=sys.stderr)
    return 0


def _common(p, train=False, sample=False):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--init-seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--train-seed", type=int)
    if train:
        p.add_argument("--rank", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    if sample:
        p.add_argument("--steps", type=int, help="Euler steps (default 40)")
        p.add_argument("--noise-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inbetween", description="Few-shot LoRA frame interpolation on a toy editing backbone")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=4, help="maximum shapes per scene (1-4)")
    p.add_argument("--pan", action="store_true", help="move the whole scene (camera pan)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a LoRA adapter on a few-shot subset")
    p.add_argument("--data", required=True)
    p.add_argument("--n-train", default="64", help="subset size (integer) or 'any' for the whole pool")
    p.add_argument("--holdout", type=int, default=0, help="exclude the last K triplets (id order) from training")
    p.add_argument("--out", required=True)
    _common(p, train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpolate", help="synthesize the middle frame of two PPM frames")
    p.add_argument("--ckpt", help="adapter checkpoint; omit to run the frozen baseline")
    p.add_argument("--frame0", required=True)
    p.add_argument("--frame1", required=True)
    p.add_argument("--out", required=True)
    _common(p, sample=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="score interpolations on a triplet dataset")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, default=0, help="evaluate only the last K triplets (id order)")
    p.add_argument("--report", required=True)
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--with-baseline", action="store_true")
    _common(p, sample=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="rank x data-size grid")
    p.add_argument("--data", required=True)
    p.add_argument("--ranks", type=_csv_ints, default=[4, 8])
    p.add_argument("--sizes", type=_csv_ints, default=[64, 128, 256])
    p.add_argument("--holdout", type=int, default=32)
    p.add_argument("--eval-n", type=int, default=0, help="evaluate on the first K held-out triplets only")
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--out", required=True)
    _common(p, train=True, sample=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        return args.func(args)
    except (CLIError, ConfigError, CheckpointError, AblationCellError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
