import numpy as np
import pytest

from conftest import fast_config, small_synth
from metarf.data import DataError, DescriptorTable
from metarf.evaluation import (
    ABLATION_ROWS,
    ablation_grid,
    finetune_sweep,
    permutation_importance,
    relative_margins,
)
from metarf.forest import ForestParams, fit_forest
from metarf.metrics import Metrics
from metarf.tsne import TsneConfig
from metarf.pipeline import PipelineConfig, evaluate, fit_pipeline, predict_rows, resolve_seeds, run_pipeline


@pytest.fixture(scope="module")
def table():
    return small_synth(0)


@pytest.fixture(scope="module")
def fitted(table):
    return fit_pipeline(table, fast_config())


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(mode="nope")
    with pytest.raises(ValueError):
        PipelineConfig(train_fraction=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(finetune_count=-1)


def test_seed_derivation():
    a = resolve_seeds(PipelineConfig(seed=3))
    assert a.split_seed is not None and a.forest.seed and a.meta.seed and a.tsne.seed
    assert a == resolve_seeds(PipelineConfig(seed=3))
    assert a.forest.seed != resolve_seeds(PipelineConfig(seed=4)).forest.seed
    b = resolve_seeds(PipelineConfig(seed=3, forest=ForestParams(seed=99)))
    assert b.forest.seed == 99


def test_training_reduction_and_split(table, fitted):
    pool = table.rows_in(fitted.split.train_groups)
    assert fitted.train_rows.size == round(0.5 * table.n_rows)
    assert np.all(np.isin(fitted.train_rows, pool))
    assert len(fitted.split.train_groups) == 4 and len(fitted.split.val_groups) == 1
    assert fitted.head is not None and len(fitted.meta_history) == 20


def test_evaluation_roles_and_query_sets(table, fitted):
    ev = evaluate(fitted)
    assert set(ev.roles.tolist()) == {"val", "test"}
    for g, ft in ev.finetune_rows.items():
        assert ft.size == 3 and np.all(table.groups[ft] == g)
        q = ev.rows[ev.groups == g]
        assert not set(ft.tolist()) & set(q.tolist())
        assert q.size + ft.size == table.indices_of(g).size
    assert not set(ev.rows.tolist()) & set(fitted.train_rows.tolist())


def test_deterministic(table, fitted):
    again = fit_pipeline(table, fast_config())
    assert np.array_equal(fitted.head.ravel(), again.head.ravel())
    assert np.array_equal(evaluate(fitted).y_pred, evaluate(again).y_pred)


def test_zero_finetune_is_unadapted(fitted):
    ev = evaluate(fitted, 0)
    assert np.array_equal(ev.y_pred, ev.y_pred_unadapted)
    assert np.array_equal(ev.y_pred, predict_rows(fitted, ev.rows))


def test_adaptation_changes_predictions(fitted):
    ev = evaluate(fitted)
    assert not np.array_equal(ev.y_pred, ev.y_pred_unadapted)


def test_baseline_appends_finetune_rows(table):
    cfg = fast_config(mode="baseline")
    fitted, ev = run_pipeline(table, cfg)
    assert fitted.head is None
    extra = np.concatenate([ev.finetune_rows[g] for g in sorted(ev.finetune_rows)])
    rows = np.concatenate([fitted.train_rows, extra])
    forest = fit_forest(table.features[rows], table.yields[rows], fitted.config.forest)
    assert np.array_equal(ev.y_pred, forest.predict(table.features[ev.rows]))
    assert np.array_equal(ev.y_pred_unadapted, fitted.forest.predict(table.features[ev.rows]))


@pytest.mark.parametrize("mode", ["maml-only", "transfer"])
def test_other_modes(table, mode):
    fitted, ev = run_pipeline(table, fast_config(mode=mode))
    assert np.all(np.isfinite(ev.y_pred))
    if mode == "maml-only":
        assert fitted.head.d_in == table.n_features
    else:
        assert fitted.head.d_in == fitted.forest.n_trees


def test_random_sampling(table):
    fitted, ev = run_pipeline(table, fast_config(sampling="random"))
    assert all(ft.size == 3 for ft in ev.finetune_rows.values())


def test_train_rows_outside_pool_rejected(table, fitted):
    outside = table.rows_in(fitted.split.test_groups)[:3]
    with pytest.raises(DataError):
        fit_pipeline(table, fast_config(), fitted.split, outside)


def test_finetune_count_too_large(fitted):
    with pytest.raises(DataError, match="no query row"):
        evaluate(fitted, 15)


# ---------------------------------------------------------------- evaluation drivers


def test_relative_margins():
    m, r = Metrics(8.0, 0.6, 10), Metrics(10.0, 0.5, 10)
    assert relative_margins(m, r) == pytest.approx((0.2, 0.2))
    assert relative_margins(r, r) == (0.0, 0.0)


def test_sweep_self_comparison_is_zero(table):
    rows = finetune_sweep(table, fast_config(), [2, 3], reference_mode="metarf")
    assert [r.count for r in rows] == [2, 3]
    assert all(r.rmse_margin == 0.0 and r.r2_margin == 0.0 for r in rows)


def test_sweep_against_baseline(table):
    rows = finetune_sweep(table, fast_config(), [2])
    assert rows[0].method.n == rows[0].reference.n
    d = rows[0].to_dict()
    assert set(d) >= {"count", "rmse_margin", "r2_margin", "method_r2", "reference_r2"}


def test_ablation_grid_shape(table):
    cfg = fast_config(forest=ForestParams(n_trees=5), tsne=TsneConfig(iterations=60))
    grid = ablation_grid(table, cfg, repeats=2)
    assert [r.label for r in grid] == [label for label, _, _ in ABLATION_ROWS]
    assert [r.repeats for r in grid] == [2, 1, 2, 1, 2, 1, 2]
    assert all(np.isfinite(r.rmse) and np.isfinite(r.r2) for r in grid)


# ---------------------------------------------------------------- importance


def _with_constant_column(table: DescriptorTable) -> DescriptorTable:
    X = np.column_stack([table.features, np.full(table.n_rows, 3.0)])
    return DescriptorTable(table.row_ids, table.groups, X, table.yields, (*table.feature_names, "const"))


def test_shuffle_only_constant_feature_scores_zero(table):
    t = _with_constant_column(table)
    fitted = fit_pipeline(t, fast_config())
    rep = permutation_importance(fitted, "shuffle-only", seed=1, features=["const", "x0"])
    assert rep.score_of("const") == 0.0
    assert set(rep.names) == {"const", "x0"}


@pytest.mark.parametrize("mode", ["metarf", "baseline"])
def test_shuffle_only_unused_features_score_zero(table, mode):
    cfg = fast_config(mode=mode, forest=ForestParams(n_trees=3, max_depth=1))
    fitted = fit_pipeline(table, cfg)
    rep = permutation_importance(fitted, "shuffle-only", seed=2)
    # the baseline predicts with its enlarged forest, the head with the fitted one
    used = {table.feature_names[j] for j in evaluate(fitted).forest.used_features()}
    unused = set(table.feature_names) - used
    assert unused, "the shallow forest should leave some feature unused"
    assert all(rep.score_of(n) == 0.0 for n in unused)
    assert list(rep.scores) == sorted(rep.scores, reverse=True)


def _one_feature_table(seed: int = 0) -> DescriptorTable:
    rng = np.random.default_rng(seed)
    n_groups, per = 8, 20
    X = rng.uniform(size=(n_groups * per, 4))
    y = 10.0 + 80.0 * X[:, 1] + rng.normal(0, 1, n_groups * per)
    groups = np.repeat([f"g{i}" for i in range(n_groups)], per)
    return DescriptorTable(np.arange(len(y)).astype(str), groups, X, y, ("a", "b", "c", "d"))


@pytest.mark.parametrize("mode", ["retrain", "shuffle-only"])
def test_known_feature_ranks_first(mode):
    t = _one_feature_table()
    fitted = fit_pipeline(t, fast_config(mode="baseline", forest=ForestParams(n_trees=20)))
    rep = permutation_importance(fitted, mode, seed=0)
    assert rep.names[0] == "b" and rep.scores[0] > 0.5


def test_feature_groups_and_errors(table, fitted):
    rep = permutation_importance(fitted, "shuffle-only", groups={"first": ["x0", "x1"], "rest": ["x2"]})
    assert set(rep.names) == {"first", "rest"}
    with pytest.raises(DataError, match="unknown feature"):
        permutation_importance(fitted, "shuffle-only", features=["nope"])
    with pytest.raises(ValueError):
        permutation_importance(fitted, "bogus")
