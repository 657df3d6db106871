from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from metarf.data import DescriptorTable

REPO = Path(__file__).resolve().parents[1]


def make_table(n_groups: int = 4, rows: int = 6, p: int = 3, seed: int = 0) -> DescriptorTable:
    rng = np.random.default_rng(seed)
    n = n_groups * rows
    X = rng.normal(size=(n, p))
    y = np.clip(50 + 10 * X[:, 0] + rng.normal(size=n), 0, 100)
    groups = np.repeat([f"G{g}" for g in range(n_groups)], rows)
    return DescriptorTable(np.array([f"id{i}" for i in range(n)]), groups, X, y, tuple(f"f{j}" for j in range(p)))


@pytest.fixture
def small_table() -> DescriptorTable:
    return make_table()


def write_csv(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def fast_config(**overrides):
    """A pipeline configuration small enough for unit tests."""
    from dataclasses import replace

    from metarf.forest import ForestParams
    from metarf.head import MetaConfig
    from metarf.pipeline import PipelineConfig
    from metarf.tsne import TsneConfig

    cfg = PipelineConfig(
        n_train_groups=4,
        n_val_groups=1,
        train_fraction=0.5,
        finetune_count=3,
        forest=ForestParams(n_trees=12),
        meta=MetaConfig(inner_lr=0.002, support_size=4, meta_iterations=20, hidden=(16, 16)),
        tsne=TsneConfig(iterations=150),
        seed=1,
    )
    return replace(cfg, **overrides)


def small_synth(seed: int = 0, **kw):
    from metarf.synth import SynthSpec, make_synthetic_table

    spec = SynthSpec(**{"n_groups": 8, "rows_per_group": 15, "n_features": 6, "levels": (4, 3), **kw})
    return make_synthetic_table(spec, seed)[0]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
