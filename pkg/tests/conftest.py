import numpy as np
import pytest
import torch

from inbetween.backbone import BackboneConfig, init_backbone
from inbetween.conditioning import ConditioningSet


TINY = BackboneConfig(d_model=16, n_blocks=2, n_heads=4, mlp_ratio=2, latent_channels=12, latent_hw=(4, 4), k_semantic=4)
SMALL = BackboneConfig(d_model=32, n_blocks=2, n_heads=4, mlp_ratio=2, latent_channels=12, latent_hw=(4, 4), k_semantic=4)


def random_cond(cfg: BackboneConfig, seed: int, batch: int | None = None, dtype=torch.float32) -> ConditioningSet:
    g = torch.Generator().manual_seed(seed)
    lead = () if batch is None else (batch,)
    c, (h, w) = cfg.latent_channels, cfg.latent_hw
    return ConditioningSet(
        h=torch.randn(*lead, cfg.k_semantic, cfg.d_model, generator=g, dtype=torch.float64).to(dtype),
        z0=torch.randn(*lead, c, h, w, generator=g, dtype=torch.float64).to(dtype),
        z1=torch.randn(*lead, c, h, w, generator=g, dtype=torch.float64).to(dtype),
    )


def random_latent(cfg: BackboneConfig, seed: int, batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(10_000 + seed)
    lead = () if batch is None else (batch,)
    return torch.randn(*lead, cfg.latent_channels, *cfg.latent_hw, generator=g, dtype=torch.float64).to(dtype)


def random_image(seed: int, h: int = 16, w: int = 16) -> np.ndarray:
    return np.random.default_rng(seed).random((h, w, 3))


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def small_params():
    return init_backbone(SMALL)


# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
