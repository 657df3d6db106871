"""End-to-end training and group-wise evaluation.

Fit: split groups, shrink the training rows to ``train_fraction`` of the
table by representative (or random) sampling, grow the forest on the reduced
rows, map every row to its tree-output vector and meta-train the head on
tasks drawn from all rows of the training groups. Tasks are not limited to
the reduced rows: a group must hold more than ``support_size`` rows, and
rows the forest never saw give tree outputs that behave like those of a new
group.

Evaluate: for every validation/test group pick ``F`` fine-tune rows
(Kennard-Stone on one shared t-SNE embedding of all evaluated rows, or
uniformly at random), adapt the head with one gradient step on them and
predict the group's remaining rows. The baseline instead refits the forest
with every group's fine-tune rows appended to its training rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from metarf.data import DataError, DescriptorTable, SplitSpec, iter_tasks, make_group_split
from metarf.forest import Forest, ForestParams, fit_forest
from metarf.head import (
    HeadParams,
    MetaConfig,
    Standardizer,
    finetune,
    meta_train,
    predict,
    train_transfer,
)
from metarf.metrics import Metrics
from metarf.sampling import kennard_stone, select_representative, standardize_columns
from metarf.seeding import derive_seed, make_rng
from metarf.tsne import TsneConfig, tsne_embed

log = logging.getLogger(__name__)

MODES = ("metarf", "baseline", "maml-only", "transfer")
SAMPLINGS = ("dimension-reduction", "random")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "metarf"
    n_train_groups: int = 4
    n_val_groups: int = 1
    split_seed: int | None = None
    train_fraction: float = 0.2
    sampling: str = "dimension-reduction"
    finetune_count: int = 5
    forest: ForestParams = field(default_factory=ForestParams)
    meta: MetaConfig = field(default_factory=MetaConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}, got {self.sampling!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.finetune_count < 0:
            raise ValueError("finetune_count must be >= 0")


def resolve_seeds(config: PipelineConfig) -> PipelineConfig:
    """Derive every component seed from ``config.seed`` unless set explicitly.

    A component seed counts as explicit when it differs from the dataclass
    default of 0; the split seed when it is not ``None``.
    """
    s = config.seed
    return replace(
        config,
        split_seed=derive_seed(s, "split") if config.split_seed is None else config.split_seed,
        forest=config.forest if config.forest.seed else replace(config.forest, seed=derive_seed(s, "forest")),
        meta=config.meta if config.meta.seed else replace(config.meta, seed=derive_seed(s, "meta")),
        tsne=config.tsne if config.tsne.seed else replace(config.tsne, seed=derive_seed(s, "tsne")),
    )


@dataclass(eq=False)
class FittedPipeline:
    config: PipelineConfig
    table: DescriptorTable
    split: SplitSpec
    train_rows: np.ndarray
    forest: Forest
    head: HeadParams | None = None
    x_scaler: Standardizer | None = None
    y_scaler: Standardizer | None = None
    meta_history: list[float] = field(default_factory=list)
    support_size: int = 0
    _embedding: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def uses_head(self) -> bool:
        return self.config.mode != "baseline"

    def head_inputs(self, X: np.ndarray) -> np.ndarray:
        if self.config.mode == "maml-only":
            return X
        return self.forest.tree_outputs(X)

    def eval_rows(self) -> np.ndarray:
        return self.table.rows_in(self.split.val_groups | self.split.test_groups)

    def embedding(self, table: DescriptorTable | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Shared t-SNE coordinates of all evaluated rows.

        Computed once for the fitted table; a substitute ``table`` is embedded
        afresh every call.
        """
        if table is not None and table is not self.table:
            return self._embed(table)
        if self._embedding is None:
            self._embedding = self._embed(self.table)
        return self._embedding

    def _embed(self, table: DescriptorTable) -> tuple[np.ndarray, np.ndarray]:
        rows = self.eval_rows()
        X = standardize_columns(table.features[rows])
        if rows.size < 3:
            return rows, X
        return rows, tsne_embed(X, replace(self.config.tsne, trace_kl=False)).coords


def _reduce_training_rows(table: DescriptorTable, pool: np.ndarray, config: PipelineConfig, seed: int) -> np.ndarray:
    n_keep = min(pool.size, max(1, int(round(config.train_fraction * table.n_rows))))
    if n_keep >= pool.size:
        return pool
    if config.sampling == "random":
        picked = make_rng(seed).choice(pool.size, size=n_keep, replace=False)
    else:
        picked = np.asarray(select_representative(
            table.features[pool], n_keep, replace(config.tsne, seed=seed, trace_kl=False)
        ))
    return np.sort(pool[picked])


def _task_support_size(table: DescriptorTable, groups, rows: np.ndarray, k: int) -> tuple[int, list[str]]:
    counts = {g: int(np.sum(table.groups[rows] == g)) for g in groups}
    eligible = [g for g, c in counts.items() if c > k]
    if eligible:
        return k, sorted(eligible)
    largest = max(counts.values(), default=0)
    if largest < 2:
        raise DataError("no training group has the 2 rows a support/query task needs")
    log.warning("support size %d exceeds every training group; using %d", k, largest - 1)
    return largest - 1, sorted(g for g, c in counts.items() if c == largest)


def fit_pipeline(
    table: DescriptorTable,
    config: PipelineConfig,
    split: SplitSpec | None = None,
    train_rows: np.ndarray | None = None,
) -> FittedPipeline:
    """Fit the forest and, except in baseline mode, the head.

    ``train_rows`` skips the training-set reduction and uses those rows for
    the forest, so several modes can share one (costly) selection.
    """
    config = resolve_seeds(config)
    split = split or make_group_split(table, config.n_train_groups, config.n_val_groups, config.split_seed)
    pool = table.rows_in(split.train_groups)
    if pool.size == 0:
        raise DataError("the training groups hold no rows")
    if train_rows is None:
        train_rows = _reduce_training_rows(table, pool, config, derive_seed(config.seed, "reduce"))
    else:
        train_rows = np.sort(np.asarray(train_rows, dtype=np.intp))
        if not np.all(np.isin(train_rows, pool)):
            raise DataError("train_rows must come from the training groups")
    forest = fit_forest(table.features[train_rows], table.yields[train_rows], config.forest)
    fitted = FittedPipeline(config, table, split, train_rows, forest)
    if not fitted.uses_head:
        return fitted
    A = fitted.head_inputs(table.features)
    fitted.x_scaler = Standardizer.fit(A[pool])
    fitted.y_scaler = Standardizer.fit(table.yields[pool])
    inputs = fitted.x_scaler.transform(A)
    targets = fitted.y_scaler.transform(table.yields)
    if config.mode == "transfer":
        fitted.head = train_transfer(
            inputs[pool],
            targets[pool],
            config.meta,
            make_rng(derive_seed(config.seed, "transfer-batches")),
            fitted.meta_history,
        )
        fitted.support_size = config.meta.support_size
    else:
        k, groups = _task_support_size(table, split.train_groups, pool, config.meta.support_size)
        fitted.support_size = k
        tasks = iter_tasks(table, groups, k, make_rng(derive_seed(config.seed, "tasks")), pool)
        fitted.head = meta_train(tasks, inputs, targets, config.meta, history=fitted.meta_history)
    return fitted


@dataclass(eq=False)
class Evaluation:
    """Per-row predictions for the evaluated groups plus the fine-tune choice."""

    rows: np.ndarray
    groups: np.ndarray
    roles: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    y_pred_unadapted: np.ndarray
    finetune_rows: dict[str, np.ndarray]
    forest: Forest
    finetune_pred: dict[str, np.ndarray] = field(default_factory=dict)

    def query_mask(self, role: str = "test") -> np.ndarray:
        return self.roles == role

    def metrics(self, role: str = "test") -> Metrics:
        m = self.query_mask(role)
        return Metrics.of(self.y_true[m], self.y_pred[m])

    def unadapted_metrics(self, role: str = "test") -> Metrics:
        m = self.query_mask(role)
        return Metrics.of(self.y_true[m], self.y_pred_unadapted[m])

    def group_metrics(self, role: str = "test") -> dict[str, tuple[Metrics, Metrics]]:
        """Per group: (adapted, unadapted) metrics over its query rows."""
        out = {}
        m = self.query_mask(role)
        for g in sorted(set(self.groups[m].tolist())):
            sel = m & (self.groups == g)
            out[g] = (
                Metrics.of(self.y_true[sel], self.y_pred[sel]),
                Metrics.of(self.y_true[sel], self.y_pred_unadapted[sel]),
            )
        return out


def choose_finetune_rows(
    fitted: FittedPipeline,
    count: int,
    sampling: str,
    rng: np.random.Generator,
    table: DescriptorTable | None = None,
) -> dict[str, np.ndarray]:
    """Fine-tune rows per evaluated group, in selection order."""
    table = table or fitted.table
    groups = sorted(fitted.split.val_groups | fitted.split.test_groups)
    out = {}
    if count == 0:
        return {g: np.array([], dtype=np.intp) for g in groups}
    if sampling == "dimension-reduction":
        rows, coords = fitted.embedding(table)
        where = {int(r): i for i, r in enumerate(rows)}
    for g in groups:
        idx = table.indices_of(g)
        if idx.size <= count:
            raise DataError(f"group {g!r} has {idx.size} rows; {count} fine-tune rows leave no query row")
        if sampling == "random":
            out[g] = idx[rng.choice(idx.size, size=count, replace=False)]
        else:
            local = coords[[where[int(r)] for r in idx]]
            out[g] = idx[kennard_stone(local, count)]
    return out


def evaluate(
    fitted: FittedPipeline,
    finetune_count: int | None = None,
    sampling: str | None = None,
    seed: int | None = None,
    *,
    table: DescriptorTable | None = None,
    finetune_rows: dict[str, np.ndarray] | None = None,
    forest: Forest | None = None,
) -> Evaluation:
    """Adapt to and predict every validation and test group.

    ``table`` substitutes the feature matrix (same rows) without refitting;
    ``finetune_rows`` fixes the fine-tune choice and ``forest`` the baseline's
    enlarged forest, which is how shuffle-only importance re-evaluates a run.
    """
    cfg = fitted.config
    table = table or fitted.table
    count = cfg.finetune_count if finetune_count is None else finetune_count
    sampling = sampling or cfg.sampling
    seed = derive_seed(cfg.seed, "finetune") if seed is None else seed
    if finetune_rows is None:
        finetune_rows = choose_finetune_rows(fitted, count, sampling, make_rng(seed), table)
    roles_of = {g: fitted.split.role_of(g) for g in finetune_rows}
    query = {g: np.setdiff1d(table.indices_of(g), ft) for g, ft in finetune_rows.items()}

    if not fitted.uses_head:
        if forest is None:
            extra = np.concatenate([ft for ft in finetune_rows.values()]) if finetune_rows else np.array([], int)
            fit_rows = np.concatenate([fitted.train_rows, extra.astype(np.intp)])
            forest = (
                fit_forest(table.features[fit_rows], table.yields[fit_rows], cfg.forest) if extra.size else fitted.forest
            )
        base = fitted.forest
    else:
        forest = fitted.forest

    rows, groups, roles, y_true, y_pred, y_un = [], [], [], [], [], []
    ft_pred = {}
    for g in sorted(finetune_rows):
        ft, q = finetune_rows[g], query[g]
        Xq = table.features[q]
        if fitted.uses_head:
            inputs_q = fitted.x_scaler.transform(fitted.head_inputs(Xq))
            unadapted = fitted.y_scaler.inverse(predict(fitted.head, inputs_q))
            if ft.size:
                inputs_s = fitted.x_scaler.transform(fitted.head_inputs(table.features[ft]))
                adapted = finetune(fitted.head, inputs_s, fitted.y_scaler.transform(table.yields[ft]), cfg.meta.inner_lr)
                pred = fitted.y_scaler.inverse(predict(adapted, inputs_q))
                ft_pred[g] = fitted.y_scaler.inverse(predict(adapted, inputs_s))
            else:
                pred = unadapted
                ft_pred[g] = np.zeros(0)
        else:
            pred = forest.predict(Xq)
            unadapted = base.predict(Xq)
            ft_pred[g] = forest.predict(table.features[ft]) if ft.size else np.zeros(0)
        rows.append(q)
        groups.append(np.full(q.size, g))
        roles.append(np.full(q.size, roles_of[g]))
        y_true.append(table.yields[q])
        y_pred.append(pred)
        y_un.append(unadapted)
    return Evaluation(
        np.concatenate(rows),
        np.concatenate(groups),
        np.concatenate(roles),
        np.concatenate(y_true),
        np.concatenate(y_pred),
        np.concatenate(y_un),
        finetune_rows,
        forest,
        ft_pred,
    )


def predict_rows(fitted: FittedPipeline, rows: np.ndarray, table: DescriptorTable | None = None) -> np.ndarray:
    """Unadapted predictions (forest mean, or the meta-trained head) for ``rows``."""
    table = table or fitted.table
    X = table.features[np.asarray(rows, dtype=np.intp)]
    if not fitted.uses_head:
        return fitted.forest.predict(X)
    return fitted.y_scaler.inverse(predict(fitted.head, fitted.x_scaler.transform(fitted.head_inputs(X))))


def run_pipeline(table: DescriptorTable, config: PipelineConfig, split: SplitSpec | None = None) -> tuple[FittedPipeline, Evaluation]:
    fitted = fit_pipeline(table, config, split)
    return fitted, evaluate(fitted)
