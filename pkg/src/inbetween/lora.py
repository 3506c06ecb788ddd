"""Low-rank adapters over named backbone weights.

Adapted output for a frozen weight ``W0``: ``W0 x + (alpha / r) * B (A x)``.
``B`` starts at zero, so a freshly injected model reproduces the frozen one
bit for bit.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass, field

import torch

from . import backbone
from .backbone import BackboneConfig
from .conditioning import ConditioningSet

DEFAULT_TARGETS = (
    "block*.attn.q",
    "block*.attn.k",
    "block*.attn.v",
    "block*.attn.out",
    "block*.mod.fc1",
    "block*.mod.fc2",
)


class LoRAConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float | None = None
    target_patterns: tuple[str, ...] = DEFAULT_TARGETS
    init_seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise LoRAConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha is not None and self.alpha <= 0:
            raise LoRAConfigError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "target_patterns", tuple(self.target_patterns))

    @property
    def scale(self) -> float:
        # alpha defaults to the rank (scale 1), also after dataclasses.replace(rank=...)
        alpha = self.rank if self.alpha is None else self.alpha
        return alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_patterns"] = list(self.target_patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        d = dict(d)
        if "target_patterns" in d:
            d["target_patterns"] = tuple(d["target_patterns"])
        return cls(**d)


@dataclass
class LoRAAdapter:
    A: torch.Tensor  # (r, d_in)
    B: torch.Tensor  # (d_out, r)
    scale: float
    frozen_ref: str

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


def lora_forward(adapter: LoRAAdapter, W0: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if adapter.A.shape[1] != W0.shape[1] or adapter.B.shape[0] != W0.shape[0]:
        raise ValueError(
            f"adapter A{tuple(adapter.A.shape)} B{tuple(adapter.B.shape)} does not fit weight {tuple(W0.shape)}"
        )
    if x.shape[-1] != W0.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {tuple(W0.shape)}")
    return x @ W0.T + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)


@dataclass
class AdaptedModel:
    base: dict[str, torch.Tensor]
    config: BackboneConfig
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)
    lora_config: LoRAConfig | None = None

    def __call__(self, z_t, t, cond: ConditioningSet, attention_maps=None) -> torch.Tensor:
        return backbone.forward(self.base, z_t, t, cond, self.config, self.adapters, attention_maps)

    def to(self, dtype: torch.dtype) -> "AdaptedModel":
        """Copy with every array cast to ``dtype`` (e.g. float64 for gradient checks)."""
        return AdaptedModel(
            base={k: v.to(dtype) for k, v in self.base.items()},
            config=self.config,
            adapters={
                k: LoRAAdapter(
                    a.A.detach().to(dtype).requires_grad_(True),
                    a.B.detach().to(dtype).requires_grad_(True),
                    a.scale,
                    a.frozen_ref,
                )
                for k, a in self.adapters.items()
            },
            lora_config=self.lora_config,
        )


def target_weights(params: dict[str, torch.Tensor], patterns) -> list[str]:
    # role/position tables are lookups, not linear maps
    names = [n for n, v in params.items() if v.ndim == 2 and n not in ("embed.role", "embed.pos")]
    return [n for n in names if any(fnmatch.fnmatchcase(n, pat) for pat in patterns)]


def inject(params: dict[str, torch.Tensor], cfg: BackboneConfig, lora_cfg: LoRAConfig = LoRAConfig()) -> AdaptedModel:
    """Attach fresh adapters to every weight matched by ``lora_cfg.target_patterns``.

    ``A`` ~ N(0, 1/r) from ``lora_cfg.init_seed``, ``B`` = 0. The base dict
    is shared, never copied or written.
    """
    names = target_weights(params, lora_cfg.target_patterns)
    if not names:
        raise LoRAConfigError(f"target patterns {list(lora_cfg.target_patterns)} match no weight")
    gen = torch.Generator().manual_seed(lora_cfg.init_seed)
    r = lora_cfg.rank
    adapters = {}
    for name in names:
        w = params[name]
        d_out, d_in = w.shape
        a = torch.randn(r, d_in, generator=gen, dtype=torch.float64) / math.sqrt(r)
        adapters[name] = LoRAAdapter(
            A=a.to(w.dtype).requires_grad_(True),
            B=torch.zeros(d_out, r, dtype=w.dtype).requires_grad_(True),
            scale=lora_cfg.scale,
            frozen_ref=name,
        )
    for w in params.values():
        w.requires_grad_(False)
    return AdaptedModel(base=params, config=cfg, adapters=adapters, lora_config=lora_cfg)


def merge(model: AdaptedModel) -> dict[str, torch.Tensor]:
    """New params with ``W0 + (alpha/r) B A`` folded in; the base is left untouched."""
    merged = {k: v.clone() for k, v in model.base.items()}
    with torch.no_grad():
        for name, ad in model.adapters.items():
            merged[name] = model.base[name] + ad.delta().to(model.base[name].dtype)
    return merged


def trainable_parameters(model: AdaptedModel) -> list[tuple[str, torch.Tensor]]:
    out = []
    for name, ad in model.adapters.items():
        out.append((f"{name}.lora_A", ad.A))
        out.append((f"{name}.lora_B", ad.B))
    return out


def trainable_count(model: AdaptedModel) -> int:
    return sum(p.numel() for _, p in trainable_parameters(model))


def load_adapter_state(model: AdaptedModel, state: dict[str, torch.Tensor]) -> None:
    """Copy ``<name>.lora_A`` / ``<name>.lora_B`` arrays into the model's adapters in place."""
    expected = dict(trainable_parameters(model))
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise LoRAConfigError(f"adapter state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    with torch.no_grad():
        for key, tensor in state.items():
            dst = expected[key]
            if tuple(dst.shape) != tuple(tensor.shape):
                raise LoRAConfigError(f"{key}: expected shape {tuple(dst.shape)}, got {tuple(tensor.shape)}")
            dst.copy_(torch.as_tensor(tensor, dtype=dst.dtype))
