"""Synthetic grouped regression family used at desk scale.

The yield of a row in group ``g`` is::

    y = clip(base(x) + a_g * x[0] + b_g + noise, 0, 100)
    base(x) = 20 + 2 * (10 sin(pi x0 x1) + 20 (x2 - 0.5)^2 + 10 x3 + 5 x4)

Rows are concatenations of component descriptors, as in a reaction
encoding. With ``levels = (L_1, ..., L_c)`` feature ``j`` belongs to
component ``j % c``, which has ``L_b`` fixed random descriptor vectors
drawn from ``U(0, 1)``; every row picks one vector per component. The
default ``(15, 4, 3)`` mirrors an HTE plate seen from one additive (aryl
halides x catalysts x bases). ``levels = ()`` draws ``x ~ U(0, 1)^p``
instead.

``base`` is Friedman's first function rescaled to [20, 80]; columns past
``p`` read as 0.5. With ``E = group_effect`` the offset has a random sign and
magnitude uniform on ``[E/2, E]``, and the slope ``a_g`` is uniform on
``[-E/2, E/2]``. Every group therefore sits at least ``E/4`` away from the
pooled mean on average, and none of it is visible in the features: a new
group can only be learned from a few of its own rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metarf.data import DescriptorTable
from metarf.seeding import make_rng


@dataclass(frozen=True)
class SynthSpec:
    n_groups: int = 30
    rows_per_group: int = 50
    n_features: int = 20
    group_effect: float = 10.0
    noise: float = 2.0
    levels: tuple[int, ...] = (15, 4, 3)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if any(v < 1 for v in self.levels):
            raise ValueError("every component needs >= 1 level")
        if self.n_groups < 1 or self.rows_per_group < 1 or self.n_features < 1:
            raise ValueError("n_groups, rows_per_group and n_features must be >= 1")
        if self.group_effect < 0 or self.noise < 0:
            raise ValueError("group_effect and noise must be >= 0")


def base_function(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    cols = [X[:, j] if j < X.shape[1] else np.full(X.shape[0], 0.5) for j in range(5)]
    x0, x1, x2, x3, x4 = cols
    return 20.0 + 2.0 * (10.0 * np.sin(np.pi * x0 * x1) + 20.0 * (x2 - 0.5) ** 2 + 10.0 * x3 + 5.0 * x4)


def make_synthetic_table(spec: SynthSpec, seed: int) -> tuple[DescriptorTable, dict[str, tuple[float, float]]]:
    """Generate the table and the per-group ``(slope, offset)`` used."""
    rng = make_rng(seed)
    n = spec.n_groups * spec.rows_per_group
    width = max(2, len(str(spec.n_groups - 1)))
    names = [f"g{g:0{width}d}" for g in range(spec.n_groups)]
    e = spec.group_effect
    slopes = rng.uniform(-e / 2, e / 2, spec.n_groups)
    offsets = rng.choice([-1.0, 1.0], spec.n_groups) * rng.uniform(e / 2, e, spec.n_groups)
    if spec.levels:
        # feature j describes component j % c; component b has levels[b]
        # descriptor vectors and each row draws one of them per component
        c = len(spec.levels)
        block = np.arange(spec.n_features) % c
        X = np.empty((n, spec.n_features))
        for b, n_levels in enumerate(spec.levels):
            cols = np.flatnonzero(block == b)
            vectors = rng.uniform(0.0, 1.0, size=(n_levels, cols.size))
            X[:, cols] = vectors[rng.integers(0, n_levels, size=n)]
    else:
        X = rng.uniform(0.0, 1.0, size=(n, spec.n_features))
    gi = np.repeat(np.arange(spec.n_groups), spec.rows_per_group)
    eps = rng.normal(0.0, spec.noise, n) if spec.noise > 0 else np.zeros(n)
    y = np.clip(base_function(X) + slopes[gi] * X[:, 0] + offsets[gi] + eps, 0.0, 100.0)
    table = DescriptorTable(
        np.array([f"r{i:05d}" for i in range(n)]),
        np.array([names[g] for g in gi]),
        X,
        y,
        tuple(f"x{j}" for j in range(spec.n_features)),
    )
    effects = {names[g]: (float(slopes[g]), float(offsets[g])) for g in range(spec.n_groups)}
    return table, effects
