"""A small multimodal diffusion transformer that predicts rectified-flow velocities.

Parameters live in a flat ``dict[str, Tensor]`` keyed by stable names such as
``block0.attn.q`` (weight) and ``block0.attn.q.bias``. Keeping the model
functional makes the frozen/trainable split explicit: LoRA adapters are passed
alongside the base weights instead of being patched into modules.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import ConditioningSet, DimensionError

ROLE_NOISY, ROLE_Z0, ROLE_Z1 = 0, 1, 2
MAX_FREQ = 50.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    latent_channels: int = 12
    latent_hw: tuple[int, int] = (16, 16)
    k_semantic: int = 8
    locality_gain: float = 0.5
    init_seed: int = 0

    def __post_init__(self):
        if min(self.d_model, self.n_blocks, self.n_heads, self.mlp_ratio, self.latent_channels) < 1:
            raise ConfigError(f"backbone sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if len(self.latent_hw) != 2 or min(self.latent_hw) < 1:
            raise ConfigError(f"latent_hw must be two positive ints, got {self.latent_hw}")
        object.__setattr__(self, "latent_hw", tuple(int(v) for v in self.latent_hw))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_hw"] = list(self.latent_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if "latent_hw" in d:
            d["latent_hw"] = tuple(d["latent_hw"])
        return cls(**d)

    @property
    def n_cells(self) -> int:
        return self.latent_hw[0] * self.latent_hw[1]

    def n_tokens(self) -> int:
        return 3 * self.n_cells + self.k_semantic


def init_backbone(cfg: BackboneConfig, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Seeded initialization.

    Projections are N(0, 1/fan_in). The positional table starts from 2-D
    sinusoids and the attention q/k maps get an identity component of weight
    ``locality_gain``, which gives the frozen model a spatial-locality prior:
    tokens at nearby cells (of any role) attend to each other.

    Values are drawn in float64 and then cast, so a float64 copy of the
    model is the exact widening of the float32 one.
    """
    gen = torch.Generator().manual_seed(cfg.init_seed)
    d, c = cfg.d_model, cfg.latent_channels
    hidden = cfg.mlp_ratio * d

    def normal(*shape, std):
        return torch.randn(*shape, generator=gen, dtype=torch.float64) * std

    def linear(name, d_out, d_in, zero=False):
        if zero:
            params[name] = torch.zeros(d_out, d_in, dtype=torch.float64)
        else:
            params[name] = normal(d_out, d_in, std=1.0 / math.sqrt(d_in))
        params[name + ".bias"] = torch.zeros(d_out, dtype=torch.float64)

    params: dict[str, torch.Tensor] = {}
    linear("embed.noisy", d, c)
    linear("embed.cond", d, c)
    linear("embed.semantic", d, d)
    params["embed.role"] = normal(3, d, std=0.5)
    params["embed.pos"] = positional_grid(cfg.latent_hw, d)
    eye = torch.eye(d, dtype=torch.float64)
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        for proj in ("q", "k", "v", "out"):
            linear(f"{p}.attn.{proj}", d, d)
        for proj in ("q", "k"):
            w = params[f"{p}.attn.{proj}"]
            params[f"{p}.attn.{proj}"] = (1 - cfg.locality_gain) * w + cfg.locality_gain * eye
        linear(f"{p}.mlp.fc1", hidden, d)
        linear(f"{p}.mlp.fc2", d, hidden)
        linear(f"{p}.mod.fc1", d, d)
        linear(f"{p}.mod.fc2", 6 * d, d, zero=True)
    linear("head", c, d)
    return {k: v.to(dtype) for k, v in params.items()}


def positional_grid(hw: tuple[int, int], d: int) -> torch.Tensor:
    """(h*w, d) table of sin/cos features of the cell row and column; d must be a multiple of 4."""
    h, w = hw
    if d % 4:
        raise ConfigError(f"d_model={d} must be a multiple of 4 for the positional grid")
    q = d // 4
    periods = torch.linspace(2.0, 2.0 * max(h, w), q, dtype=torch.float64)
    freqs = 2 * math.pi / periods
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    xs, ys = xs[..., None] * freqs, ys[..., None] * freqs
    table = torch.cat([torch.sin(xs), torch.cos(xs), torch.sin(ys), torch.cos(ys)], dim=-1)
    return table.reshape(h * w, d)


def params_checksum(params: dict[str, torch.Tensor]) -> str:
    """sha256 over names and float32 little-endian bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(params[name].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


def timestep_embedding(t, d_model: int, max_freq: float = MAX_FREQ) -> torch.Tensor:
    """Sinusoidal features ``[sin(f_i t), cos(f_i t)]`` with ``d_model/2`` frequencies geometric in [1, max_freq]."""
    t = torch.as_tensor(t, dtype=torch.float64)
    half = d_model // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=torch.float64))
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _linear(params, adapters, name, x):
    out = F.linear(x, params[name], params.get(name + ".bias"))
    if adapters:
        ad = adapters.get(name)
        if ad is not None:
            out = out + ad.scale * F.linear(F.linear(x, ad.A), ad.B)
    return out


def _tokens(latent: torch.Tensor) -> torch.Tensor:
    b, c, h, w = latent.shape
    return latent.reshape(b, c, h * w).transpose(1, 2)


def forward(
    params: dict[str, torch.Tensor],
    z_t,
    t,
    cond: ConditioningSet,
    cfg: BackboneConfig,
    adapters=None,
    attention_maps: list | None = None,
) -> torch.Tensor:
    """Predict the velocity for noisy latent ``z_t`` at time ``t``.

    Accepts a single latent ``(C, H, W)`` or a batch ``(B, C, H, W)``; the
    conditioning fields carry a matching leading batch axis when batched.
    If ``attention_maps`` is a list, per-block attention weights are appended.
    """
    dtype = params["head"].dtype
    z_t = torch.as_tensor(z_t, dtype=dtype)
    single = z_t.ndim == 3
    z0 = torch.as_tensor(cond.z0, dtype=dtype)
    z1 = torch.as_tensor(cond.z1, dtype=dtype)
    h = torch.as_tensor(cond.h, dtype=dtype)
    if single:
        z_t, z0, z1, h = z_t[None], z0[None], z1[None], h[None]
    if z_t.shape != z0.shape or z0.shape != z1.shape:
        raise DimensionError(f"latent shapes differ: z_t {tuple(z_t.shape)}, z0 {tuple(z0.shape)}, z1 {tuple(z1.shape)}")
    b, c, hl, wl = z_t.shape
    if c != cfg.latent_channels or (hl, wl) != cfg.latent_hw:
        raise DimensionError(
            f"latent {c}x{hl}x{wl} does not match backbone {cfg.latent_channels}x{cfg.latent_hw[0]}x{cfg.latent_hw[1]}"
        )
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(b)
    temb = timestep_embedding(t, cfg.d_model).to(dtype)

    role, pos = params["embed.role"], params["embed.pos"]
    x = torch.cat(
        [
            _linear(params, adapters, "embed.noisy", _tokens(z_t)) + role[ROLE_NOISY] + pos,
            _linear(params, adapters, "embed.cond", _tokens(z0)) + role[ROLE_Z0] + pos,
            _linear(params, adapters, "embed.cond", _tokens(z1)) + role[ROLE_Z1] + pos,
            _linear(params, adapters, "embed.semantic", h),
        ],
        dim=1,
    )
    n = x.shape[1]
    d, nh = cfg.d_model, cfg.n_heads
    hd = d // nh

    for i in range(cfg.n_blocks):
        p = f"block{i}"
        mod = _linear(params, adapters, f"{p}.mod.fc2", F.silu(_linear(params, adapters, f"{p}.mod.fc1", temb)))
        shift1, scale1, gate1, shift2, scale2, gate2 = mod[:, None, :].chunk(6, dim=-1)

        y = F.layer_norm(x, (d,)) * (1 + scale1) + shift1
        q = _linear(params, adapters, f"{p}.attn.q", y).reshape(b, n, nh, hd).transpose(1, 2)
        k = _linear(params, adapters, f"{p}.attn.k", y).reshape(b, n, nh, hd).transpose(1, 2)
        v = _linear(params, adapters, f"{p}.attn.v", y).reshape(b, n, nh, hd).transpose(1, 2)
        if attention_maps is None:
            y = F.scaled_dot_product_attention(q, k, v)
        else:
            attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
            attention_maps.append(attn.detach())
            y = attn @ v
        y = y.transpose(1, 2).reshape(b, n, d)
        x = x + (1 + gate1) * _linear(params, adapters, f"{p}.attn.out", y)

        y = F.layer_norm(x, (d,)) * (1 + scale2) + shift2
        y = _linear(params, adapters, f"{p}.mlp.fc2", F.gelu(_linear(params, adapters, f"{p}.mlp.fc1", y)))
        x = x + (1 + gate2) * y

    out = _linear(params, adapters, "head", F.layer_norm(x[:, : hl * wl], (d,)))
    out = out.transpose(1, 2).reshape(b, c, hl, wl)
    return out[0] if single else out


def null_conditioning(cond: ConditioningSet) -> ConditioningSet:
    """Zeroed tokens and boundary latents, used as the unconditional branch for guidance."""
    zeros = torch.zeros_like if isinstance(cond.z0, torch.Tensor) else np.zeros_like
    return ConditioningSet(h=zeros(cond.h), z0=zeros(cond.z0), z1=zeros(cond.z1))
