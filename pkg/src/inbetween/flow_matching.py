"""Rectified flow matching: training pairs, loss, LoRA training loop, Euler sampler.

Time convention: ``z_t = (1 - t) z + t eps`` so ``t = 1`` is pure noise and the
regression target is the constant velocity ``eps - z``. Sampling integrates
from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import null_conditioning
from .conditioning import (
    DEFAULT_PROMPT,
    CodecConfig,
    ConditioningSet,
    DimensionError,
    build_conditioning,
    decode_latent,
    encode_image,
)
from .lora import AdaptedModel, trainable_parameters

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    timestep_dist: str = "uniform"
    grad_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.timestep_dist not in ("uniform", "logit-normal"):
            raise ValueError(f"unknown timestep_dist {self.timestep_dist!r}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 40
    guidance_scale: float = 1.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class TrainingPair:
    z_t: torch.Tensor
    t: torch.Tensor
    v_target: torch.Tensor


def make_training_pair(z_target, eps, t) -> TrainingPair:
    z_target = torch.as_tensor(z_target)
    eps = torch.as_tensor(eps, dtype=z_target.dtype)
    if z_target.shape != eps.shape:
        raise DimensionError(f"target {tuple(z_target.shape)} and noise {tuple(eps.shape)} differ")
    t = torch.as_tensor(t, dtype=z_target.dtype)
    tb = t.reshape(t.shape + (1,) * (z_target.ndim - t.ndim))
    return TrainingPair(z_t=(1 - tb) * z_target + tb * eps, t=t, v_target=eps - z_target)


@dataclass
class LatentTriplets:
    """Encoded training/eval data: target latents plus batched conditioning."""

    z_mid: torch.Tensor  # (N, C, h, w)
    z0: torch.Tensor
    z1: torch.Tensor
    h: torch.Tensor  # (N, K, d)

    def __len__(self):
        return self.z_mid.shape[0]

    def cond(self, idx=slice(None)) -> ConditioningSet:
        return ConditioningSet(h=self.h[idx], z0=self.z0[idx], z1=self.z1[idx])


def encode_triplets(
    triplets,
    codec: CodecConfig,
    prompt: str = DEFAULT_PROMPT,
    semantic_seed: int = 0,
    n_tokens: int = 8,
    d_model: int = 64,
    dtype: torch.dtype = torch.float32,
) -> LatentTriplets:
    """Encode ``(prev, mid, next)`` image triplets; prev/next condition, mid is the target."""
    mids, z0s, z1s, hs = [], [], [], []
    for prev, mid, nxt in triplets:
        c = build_conditioning(prev, nxt, prompt, codec, seed=semantic_seed, n_tokens=n_tokens, d_model=d_model)
        mids.append(encode_image(mid, codec))
        z0s.append(c.z0)
        z1s.append(c.z1)
        hs.append(c.h)
    if not mids:
        raise ValueError("no triplets to encode")

    def stack(xs):
        return torch.as_tensor(np.stack(xs), dtype=dtype)

    return LatentTriplets(z_mid=stack(mids), z0=stack(z0s), z1=stack(z1s), h=stack(hs))


def sample_timesteps(n: int, dist: str, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    if dist == "uniform":
        return torch.rand(n, generator=generator, dtype=torch.float64).to(dtype)
    if dist == "logit-normal":
        return torch.sigmoid(torch.randn(n, generator=generator, dtype=torch.float64)).to(dtype)
    raise ValueError(f"unknown timestep_dist {dist!r}")


def fm_loss(
    model: Callable,
    z_target: torch.Tensor,
    cond: ConditioningSet,
    generator: torch.Generator | None = None,
    timestep_dist: str = "uniform",
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    params: Sequence[tuple[str, torch.Tensor]] | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Velocity-matching loss on a batch and its gradients w.r.t. the trainable arrays.

    The squared error is averaged over latent elements, then over the batch.
    ``t`` and ``noise`` are drawn from ``generator`` unless given. Gradients
    are taken with respect to ``params`` (default: the model's LoRA arrays;
    an empty list for arbitrary callables).
    """
    z_target = torch.as_tensor(z_target)
    if z_target.ndim != 4 or z_target.shape[0] == 0:
        raise ValueError(f"fm_loss needs a non-empty (B, C, h, w) batch, got shape {tuple(z_target.shape)}")
    b = z_target.shape[0]
    if t is None:
        t = sample_timesteps(b, timestep_dist, generator, z_target.dtype)
    if noise is None:
        noise = torch.randn(z_target.shape, generator=generator, dtype=torch.float64).to(z_target.dtype)
    pair = make_training_pair(z_target, noise, t)
    if params is None:
        params = trainable_parameters(model) if isinstance(model, AdaptedModel) else []
    with torch.enable_grad():
        pred = model(pair.z_t, pair.t, cond)
        loss = ((pred - pair.v_target) ** 2).flatten(1).mean(dim=1).mean()
        tensors = [p for _, p in params]
        grads = torch.autograd.grad(loss, tensors, allow_unused=True) if tensors else []
    out = {}
    for (name, p), g in zip(params, grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return loss.detach(), out


@dataclass
class LossHistory:
    step_losses: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def epoch_means(self) -> list[float]:
        k = self.steps_per_epoch
        return [float(np.mean(self.step_losses[i : i + k])) for i in range(0, len(self.step_losses), k)]

    def to_dict(self) -> dict:
        return {
            "steps": len(self.step_losses),
            "steps_per_epoch": self.steps_per_epoch,
            "step_losses": self.step_losses,
            "epoch_means": self.epoch_means(),
        }


def configure_threads() -> int:
    """Apply ``E2I_THREADS``; 0 (default) means one thread and deterministic reductions."""
    n = int(os.environ.get("E2I_THREADS", "0") or 0)
    torch.set_num_threads(max(n, 1))
    return n


def train(model: AdaptedModel, data: LatentTriplets, cfg: TrainConfig = TrainConfig(), progress=None):
    """Optimize the LoRA arrays of ``model`` in place with AdamW.

    Runs ``epochs * ceil(N / batch_size)`` steps over a seeded per-epoch
    shuffle. Returns ``(model, LossHistory)``.
    """
    n = len(data)
    if n == 0:
        raise ValueError("training set is empty")
    configure_threads()
    named = trainable_parameters(model)
    if not named:
        raise TrainingError("model has no trainable parameters")
    opt = torch.optim.AdamW(
        [p for _, p in named], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(cfg.grad_seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history = LossHistory(steps_per_epoch=steps_per_epoch)
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            loss, grads = fm_loss(model, data.z_mid[idx], data.cond(idx), gen, cfg.timestep_dist, params=named)
            value = float(loss)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {s} (global step {len(history.step_losses)})")
            for name, p in named:
                p.grad = grads[name]
            opt.step()
            opt.zero_grad(set_to_none=True)
            history.step_losses.append(value)
        log.info("epoch %d mean loss %.5f", epoch, history.epoch_means()[-1])
        if progress is not None:
            progress(epoch, history)
    return model, history


def euler_sample(
    velocity_fn: Callable,
    cond: ConditioningSet,
    shape,
    cfg: SamplerConfig = SamplerConfig(),
    noise: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Integrate ``dz/dt = v`` from noise at ``t = 1`` to ``t = 0`` with left-endpoint Euler.

    Grid ``t_k = 1 - k/steps``; guidance ``v_null + g (v_cond - v_null)``
    is applied only when ``g != 1``.
    """
    if noise is None:
        gen = torch.Generator().manual_seed(cfg.noise_seed)
        noise = torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)
    z = torch.as_tensor(noise).clone()
    dt = 1.0 / cfg.steps
    null = null_conditioning(cond) if cfg.guidance_scale != 1.0 else None
    with torch.no_grad():
        for k in range(cfg.steps):
            t = 1.0 - k / cfg.steps
            v = velocity_fn(z, t, cond)
            if null is not None:
                v_null = velocity_fn(z, t, null)
                v = v_null + cfg.guidance_scale * (v - v_null)
            z = z - dt * v
    return z


def interpolate(
    model: AdaptedModel,
    i0: np.ndarray,
    i1: np.ndarray,
    prompt: str = DEFAULT_PROMPT,
    codec: CodecConfig = CodecConfig(),
    sampler_cfg: SamplerConfig = SamplerConfig(),
    semantic_seed: int = 0,
) -> np.ndarray:
    """Estimate the middle frame between ``i0`` and ``i1``; returns an HxWx3 image in [0, 1]."""
    cfg = model.config
    cond = build_conditioning(i0, i1, prompt, codec, seed=semantic_seed, n_tokens=cfg.k_semantic, d_model=cfg.d_model)
    dtype = model.base["head"].dtype
    z = euler_sample(model, cond, cond.z0.shape, sampler_cfg, dtype=dtype)
    return decode_latent(z.to(torch.float64).numpy(), codec, clamp=True)
