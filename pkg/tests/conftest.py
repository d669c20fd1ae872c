import dataclasses
import os

import numpy as np
import pytest

from fedlscl.autodiff import Tensor, backward
from fedlscl.backbone import BackboneConfig, build_frozen_backbone
from fedlscl.config import reference_config


def pytest_configure(config):
    # keep warm-up checkpoints out of the user's cache unless asked otherwise
    if "FEDLSCL_CACHE" not in os.environ:
        os.environ["FEDLSCL_CACHE"] = str(config.rootpath / ".pytest_cache" / "backbones")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, where=None) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (modified in place, then restored).

    ``where`` optionally restricts the probe to a list of multi-indices.
    """
    g = np.zeros_like(x)
    for i in (np.ndindex(x.shape) if where is None else where):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(loss_fn, leaves: list[Tensor], h: float = 1e-5, max_probes: int = 200) -> float:
    """Worst relative error between autodiff and finite-difference gradients.

    Leaves larger than ``max_probes`` entries are compared on a fixed random subset.
    """
    for t in leaves:
        t.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]
    worst = 0.0
    rng = np.random.default_rng(0)
    for t, g in zip(leaves, analytic):
        if t.size <= max_probes:
            fd = numeric_grad(lambda: loss_fn().item(), t.data, h)
            worst = max(worst, rel_err(g, fd))
            continue
        flat = rng.choice(t.size, size=max_probes, replace=False)
        where = [np.unravel_index(k, t.shape) for k in flat]
        fd = numeric_grad(lambda: loss_fn().item(), t.data, h, where)
        picked = tuple(np.array(where).T)
        worst = max(worst, rel_err(g[picked], fd[picked]))
    return worst


MICRO = BackboneConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_blocks=2, num_heads=2,
                       mlp_ratio=2, adapted_block=1, lora_rank=2, lora_alpha=4.0)


@pytest.fixture(scope="session")
def micro_cfg():
    return MICRO


@pytest.fixture(scope="session")
def micro_bb():
    return build_frozen_backbone(MICRO, seed=0)


@pytest.fixture(scope="session")
def toy_bb():
    """Default-size backbone without warm-up: cheap, and fine for structural checks."""
    return build_frozen_backbone(BackboneConfig(), seed=0)


def small_config(**overrides):
    """A seconds-long federation: 2 clients, 2 tasks of 2 classes, short warm-up."""
    cfg = reference_config(num_clients=2, num_tasks=2, rounds_per_task=2, seeds=(42,))
    cfg = cfg.replace(
        data=dataclasses.replace(cfg.data, train_per_class=12, test_per_class=6, pretrain_steps=20,
                                 pretrain_per_class=8),
        hyper=dataclasses.replace(cfg.hyper, stage1_epochs=1, stage2_epochs=1, buffer_per_class=5),
    )
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def small_cfg():
    return small_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
