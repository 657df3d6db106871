"""Experiment drivers: fine-tune-count sweep, ablation grid and permutation importance.

Relative margins are defined so that positive means the method beats the
reference::

    rmse_margin = (rmse_ref - rmse_method) / rmse_ref
    r2_margin   = (r2_method - r2_ref) / r2_ref
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from metarf.data import DataError, DescriptorTable, SplitSpec, make_group_split
from metarf.metrics import Metrics
from metarf.pipeline import (
    Evaluation,
    FittedPipeline,
    PipelineConfig,
    evaluate,
    fit_pipeline,
    resolve_seeds,
)
from metarf.seeding import derive_seed, make_rng

log = logging.getLogger(__name__)


def relative_margins(method: Metrics, reference: Metrics) -> tuple[float, float]:
    """``(rmse_margin, r2_margin)`` of ``method`` against ``reference``."""
    return (
        (reference.rmse - method.rmse) / reference.rmse,
        (method.r2 - reference.r2) / reference.r2,
    )


def _shared_fit(table: DescriptorTable, config: PipelineConfig, split: SplitSpec | None):
    config = resolve_seeds(config)
    split = split or make_group_split(table, config.n_train_groups, config.n_val_groups, config.split_seed)
    return config, split


# ---------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepRow:
    count: int
    method: Metrics
    reference: Metrics
    rmse_margin: float
    r2_margin: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "method_rmse": self.method.rmse,
            "method_r2": self.method.r2,
            "reference_rmse": self.reference.rmse,
            "reference_r2": self.reference.r2,
            "rmse_margin": self.rmse_margin,
            "r2_margin": self.r2_margin,
            "n": self.method.n,
        }


def finetune_sweep(
    table: DescriptorTable,
    config: PipelineConfig,
    counts: Sequence[int],
    split: SplitSpec | None = None,
    reference_mode: str = "baseline",
) -> list[SweepRow]:
    """Method (``config.mode``) against ``reference_mode`` for each fine-tune count.

    Both sides are fitted once on the same split and reduced training rows.
    For every count the method picks its fine-tune rows (``config.sampling``)
    and the reference reuses exactly those rows; for the baseline forest
    that means appending them to its training set. Each row reports test
    metrics, so the query sets of the two sides match.
    """
    config, split = _shared_fit(table, config, split)
    method = fit_pipeline(table, config, split)
    if reference_mode == config.mode:
        reference = method
    else:
        reference = fit_pipeline(table, replace(config, mode=reference_mode), split, method.train_rows)
    out = []
    for count in counts:
        seed = derive_seed(config.seed, f"finetune/{count}")
        m_eval = evaluate(method, count, seed=seed)
        r_eval = m_eval if reference is method else evaluate(reference, count, finetune_rows=m_eval.finetune_rows)
        m, r = m_eval.metrics(), r_eval.metrics()
        out.append(SweepRow(int(count), m, r, *relative_margins(m, r)))
        log.info("F=%d  method R2 %.4f  reference R2 %.4f", count, m.r2, r.r2)
    return out


# ---------------------------------------------------------------- ablation

ABLATION_ROWS: tuple[tuple[str, str, str], ...] = (
    ("Baseline", "baseline", "random"),
    ("MetaRF + Dimension-reduction", "metarf", "dimension-reduction"),
    ("MetaRF + Random", "metarf", "random"),
    ("MAML + Dimension-reduction", "maml-only", "dimension-reduction"),
    ("MAML + Random", "maml-only", "random"),
    ("Transfer learning + Dimension-reduction", "transfer", "dimension-reduction"),
    ("Transfer learning + Random", "transfer", "random"),
)


@dataclass(frozen=True)
class AblationRow:
    label: str
    mode: str
    sampling: str
    rmse: float
    r2: float
    rmse_std: float
    r2_std: float
    repeats: int

    def to_dict(self) -> dict:
        return asdict(self)


def _run_cell(
    table: DescriptorTable,
    config: PipelineConfig,
    split: SplitSpec,
    train_rows: np.ndarray | None,
    seed: int,
) -> tuple[Evaluation, FittedPipeline]:
    fitted = fit_pipeline(table, config, split, train_rows)
    return evaluate(fitted, seed=seed), fitted


def ablation_grid(
    table: DescriptorTable,
    config: PipelineConfig,
    split: SplitSpec | None = None,
    repeats: int = 10,
) -> list[AblationRow]:
    """The seven rows of the ablation table, in its order.

    ``sampling`` covers both the training-set reduction and the fine-tune
    choice. Random cells are repeated ``repeats`` times with fresh draws for
    both and report the mean (std over repeats). The dimension-reduction
    training rows are selected once and shared by the three modes that use
    them. The baseline row appends randomly chosen fine-tune rows to the
    forest's training set and is averaged like the other random cells.
    """
    config, split = _shared_fit(table, config, split)
    dr_rows = None
    out = []
    for label, mode, sampling in ABLATION_ROWS:
        cell = replace(config, mode=mode, sampling=sampling)
        n = 1 if sampling == "dimension-reduction" else repeats
        scores = []
        for r in range(n):
            rep = cell if n == 1 else replace(cell, seed=derive_seed(config.seed, f"repeat/{r}"))
            rows = dr_rows if sampling == "dimension-reduction" else None
            ev, fitted = _run_cell(table, rep, split, rows, derive_seed(rep.seed, "finetune"))
            if sampling == "dimension-reduction" and dr_rows is None:
                dr_rows = fitted.train_rows
            m = ev.metrics()
            scores.append((m.rmse, m.r2))
        s = np.asarray(scores)
        out.append(AblationRow(label, mode, sampling, *s.mean(axis=0), *s.std(axis=0), n))
        log.info("%-42s RMSE %.4f  R2 %.4f", label, s[:, 0].mean(), s[:, 1].mean())
    return out


# ---------------------------------------------------------------- importance

IMPORTANCE_MODES = ("retrain", "shuffle-only")


@dataclass(frozen=True)
class ImportanceReport:
    """Scores are ``R2(unperturbed) - R2(shuffled)``, sorted descending."""

    mode: str
    baseline_r2: float
    names: tuple[str, ...]
    scores: tuple[float, ...]
    repeats: int

    def ranking(self) -> list[tuple[str, float]]:
        return list(zip(self.names, self.scores))

    def score_of(self, name: str) -> float:
        return self.scores[self.names.index(name)]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "baseline_r2": self.baseline_r2,
            "repeats": self.repeats,
            "scores": [{"name": n, "score": s} for n, s in self.ranking()],
        }


def _resolve_feature_groups(
    table: DescriptorTable,
    features: Sequence[str] | None,
    groups: Mapping[str, Sequence[str]] | None,
) -> dict[str, list[int]]:
    index = {n: j for j, n in enumerate(table.feature_names)}

    def cols(names: Sequence[str]) -> list[int]:
        unknown = [n for n in names if n not in index]
        if unknown:
            raise DataError(f"unknown feature name(s): {', '.join(map(repr, unknown))}")
        return [index[n] for n in names]

    if groups is not None:
        return {g: cols(list(names)) for g, names in groups.items()}
    names = list(table.feature_names) if features is None else list(features)
    return {n: cols([n]) for n in names}


def permutation_importance(
    fitted: FittedPipeline,
    mode: str = "retrain",
    seed: int = 0,
    *,
    features: Sequence[str] | None = None,
    groups: Mapping[str, Sequence[str]] | None = None,
    repeats: int = 1,
    role: str = "test",
) -> ImportanceReport:
    """Drop in ``role`` R2 when a feature (or a group of columns) is shuffled.

    Each column is permuted across all rows of the table; a group's columns
    share one permutation so the descriptor block stays intact. ``retrain``
    refits the whole pipeline on the shuffled table (same split and seeds)
    before evaluating. ``shuffle-only`` keeps the fitted models, the
    fine-tune rows and, for the baseline, the enlarged forest, and only
    re-evaluates; a feature no tree splits on then scores exactly 0.
    """
    if mode not in IMPORTANCE_MODES:
        raise ValueError(f"mode must be one of {IMPORTANCE_MODES}, got {mode!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    table = fitted.table
    targets = _resolve_feature_groups(table, features, groups)
    base_eval = evaluate(fitted)
    base_r2 = base_eval.metrics(role).r2
    scores = {}
    for name, cols in targets.items():
        drops = []
        for r in range(repeats):
            rng = make_rng(derive_seed(seed, f"importance/{name}/{r}"))
            X = table.features.copy()
            X[:, cols] = X[rng.permutation(table.n_rows)][:, cols]
            shuffled = table.with_features(X)
            if mode == "retrain":
                refit = fit_pipeline(shuffled, fitted.config, fitted.split)
                ev = evaluate(refit)
            else:
                ev = evaluate(
                    fitted,
                    table=shuffled,
                    finetune_rows=base_eval.finetune_rows,
                    forest=base_eval.forest,
                )
            drops.append(base_r2 - ev.metrics(role).r2)
        scores[name] = float(np.mean(drops))
        log.debug("importance %s: %.5f", name, scores[name])
    order = sorted(scores, key=lambda n: (-scores[n], n))
    return ImportanceReport(mode, base_r2, tuple(order), tuple(scores[n] for n in order), repeats)
