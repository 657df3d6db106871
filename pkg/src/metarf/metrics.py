"""Regression metrics and the top-k yield comparison."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_true, dtype=np.float64).ravel()
    b = np.asarray(y_pred, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} true vs {b.size} predicted")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def r2(y_true, y_pred) -> float:
    """``1 - SS_res / SS_tot``; undefined (ValueError) for constant ``y_true``."""
    a, b = _pair(y_true, y_pred)
    if a.size < 2:
        raise ValueError("R^2 needs at least 2 values")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: float
    n: int

    @classmethod
    def of(cls, y_true, y_pred) -> Metrics:
        a, b = _pair(y_true, y_pred)
        defined = a.size >= 2 and np.sum((a - a.mean()) ** 2) > 0.0
        return cls(rmse(a, b), r2(a, b) if defined else float("nan"), int(a.size))


@dataclass(frozen=True)
class TopKReport:
    k: int
    selected_ids: tuple[str, ...]
    method_mean: float
    method_std: float
    ideal_mean: float
    ideal_std: float
    random_mean: float
    random_std: float
    n_random_draws: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_ids"] = list(self.selected_ids)
        return d


def top_k_report(
    y_pred,
    y_true,
    k: int,
    rng: np.random.Generator,
    row_ids=None,
    n_random: int = 100,
) -> TopKReport:
    """True-yield statistics of the ``k`` highest-predicted candidates.

    Ties in the prediction go to the earlier candidate. The ideal comparator
    takes the ``k`` highest true yields; the random comparator pools the true
    yields of ``n_random`` uniform draws of ``k`` candidates. Standard
    deviations are population (ddof=0).
    """
    t, p = _pair(y_true, y_pred)
    n = t.size
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    ids = np.arange(n).astype(str) if row_ids is None else np.asarray(row_ids, dtype=str)
    pos = np.arange(n)
    pick = np.lexsort((pos, -p))[:k]
    best = np.sort(t)[::-1][:k]
    draws = np.concatenate([t[rng.choice(n, size=k, replace=False)] for _ in range(n_random)])
    return TopKReport(
        k,
        tuple(ids[pick].tolist()),
        float(t[pick].mean()),
        float(t[pick].std()),
        float(best.mean()),
        float(best.std()),
        float(draws.mean()),
        float(draws.std()),
        n_random,
    )
