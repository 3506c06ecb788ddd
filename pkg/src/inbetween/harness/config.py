"""Run configuration: INI sections mirroring the module configs, with CLI overrides.

Example::

    [backbone]
    d_model = 64
    [lora]
    rank = 8
    targets = block*.attn.q, block*.attn.k
    [seeds]
    init = 0
    data = 0
    noise = 0
    train = 0
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from ..backbone import BackboneConfig
from ..conditioning import DEFAULT_PROMPT, CodecConfig
from ..data import GenConfig
from ..flow_matching import SamplerConfig, TrainConfig
from ..lora import LoRAConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 0
    noise: int = 0
    train: int = 0


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: GenConfig = field(default_factory=GenConfig)
    prompt: str = DEFAULT_PROMPT
    seeds: Seeds = field(default_factory=Seeds)

    def resolved(self) -> "RunConfig":
        """Push the explicit seeds into the per-module configs."""
        return replace(
            self,
            backbone=replace(self.backbone, init_seed=self.seeds.init),
            lora=replace(self.lora, init_seed=self.seeds.init),
            train=replace(self.train, grad_seed=self.seeds.train),
            sampler=replace(self.sampler, noise_seed=self.seeds.noise),
            data=replace(self.data, seed=self.seeds.data),
        )


# ini key -> (dataclass field, parser)
def _floats(s):
    return tuple(float(x) for x in s.split(","))


def _ints(s):
    return tuple(int(x) for x in s.split(","))


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SECTIONS = {
    "codec": ("codec", {"patch_factor": ("patch_factor", int), "mix_seed": ("mix_seed", int)}),
    "backbone": (
        "backbone",
        {
            "d_model": ("d_model", int),
            "n_blocks": ("n_blocks", int),
            "n_heads": ("n_heads", int),
            "mlp_ratio": ("mlp_ratio", int),
            "k_semantic": ("k_semantic", int),
            "locality_gain": ("locality_gain", float),
        },
    ),
    "lora": ("lora", {"rank": ("rank", int), "alpha": ("alpha", float), "targets": ("target_patterns", _strs)}),
    "train": (
        "train",
        {
            "learning_rate": ("learning_rate", float),
            "epochs": ("epochs", int),
            "batch_size": ("batch_size", int),
            "betas": ("betas", _floats),
            "weight_decay": ("weight_decay", float),
            "eps": ("eps", float),
            "timestep_dist": ("timestep_dist", str),
        },
    ),
    "sampler": ("sampler", {"steps": ("steps", int), "guidance_scale": ("guidance_scale", float)}),
    "data": (
        "data",
        {
            "image_size": ("image_size", int),
            "n_triplets": ("n_triplets", int),
            "min_shapes": ("min_shapes", int),
            "max_shapes": ("max_shapes", int),
            "shape_kinds": ("shape_kinds", _strs),
            "velocity_range": ("velocity_range", _floats),
            "pan_mode": ("pan_mode", _bool),
        },
    ),
    "seeds": ("seeds", {k: (k, int) for k in ("init", "data", "noise", "train")}),
}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            for key, value in parser.items(section):
                if key != "prompt":
                    raise ConfigError(f"unknown key [run] {key}")
                cfg.prompt = value
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, keys = _SECTIONS[section]
        updates = {}
        for key, value in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key [{section}] {key}; expected one of {sorted(keys)}")
            name, conv = keys[key]
            try:
                updates[name] = conv(value.strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        try:
            setattr(cfg, attr, replace(getattr(cfg, attr), **updates))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def override(obj, **updates):
    """``dataclasses.replace`` that ignores ``None`` values (unset CLI flags)."""
    updates = {k: v for k, v in updates.items() if v is not None}
    known = {f.name for f in fields(obj)}
    bad = set(updates) - known
    if bad:
        raise ConfigError(f"unknown fields {sorted(bad)} for {type(obj).__name__}")
    return replace(obj, **updates) if updates else obj
