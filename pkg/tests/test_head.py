import numpy as np
import pytest

from metarf.data import Task
from metarf.head import (
    AdamState,
    DivergenceError,
    HeadParams,
    MetaConfig,
    Standardizer,
    finetune,
    head_forward,
    init_params,
    inner_adapt,
    load_checkpoint,
    loss_and_grad,
    meta_gradient,
    meta_train,
    predict,
    save_checkpoint,
    task_loss,
    train_transfer,
)
from oracles import central_difference, forward_loops, relative_error, summed_squared_error


def _micro(seed: int, d_in: int = 1, hidden=(3,)) -> HeadParams:
    # random biases too, so no ReLU sits exactly at a kink
    p = init_params(d_in, seed, hidden)
    rng = np.random.default_rng(seed + 1000)
    return HeadParams(p.weights, tuple(rng.normal(0, 0.3, size=b.shape) for b in p.biases))


def test_shapes_and_zero_biases():
    p = init_params(5, 0)
    assert [W.shape for W in p.weights] == [(5, 40), (40, 40), (40, 1)]
    assert all(np.all(b == 0) for b in p.biases)
    assert p.dims == (5, 40, 40, 1)
    with pytest.raises(ValueError):
        init_params(0, 0)


def test_init_is_deterministic_and_bounded():
    a, b = init_params(7, 3), init_params(7, 3)
    assert np.array_equal(a.ravel(), b.ravel())
    assert not np.array_equal(a.ravel(), init_params(7, 4).ravel())
    bound = np.sqrt(6 / (7 + 40))
    assert np.abs(a.weights[0]).max() <= bound


def test_forward_trivial_cases():
    zero = HeadParams.from_vector(np.zeros(init_params(4, 0).size), (4, 40, 40, 1))
    assert head_forward(zero, [1.0, -2.0, 3.0, 4.0]) == 0.0
    one = HeadParams((np.ones((1, 1)),) * 3, (np.zeros(1),) * 3)
    assert head_forward(one, [2.0]) == 2.0
    with pytest.raises(ValueError):
        head_forward(one, [1.0, 2.0])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p = init_params(6, seed)
    p = HeadParams(p.weights, tuple(rng.normal(size=b.shape) for b in p.biases))
    X = rng.normal(size=(8, 6))
    got = predict(p, X)
    want = [forward_loops(p.weights, p.biases, x) for x in X]
    assert np.max(np.abs(got - want)) < 1e-12


def test_loss_cases():
    one = HeadParams((np.ones((1, 1)),) * 3, (np.zeros(1),) * 3)
    assert task_loss(one, [[1.0], [2.0]], [1.0, 2.0]) == 0.0
    assert task_loss(one, [[3.0]], [1.0]) == 4.0
    rng = np.random.default_rng(0)
    p = _micro(0, 4, (5, 5))
    X, y = rng.normal(size=(12, 4)), rng.normal(size=12)
    assert abs(task_loss(p, X, y) - summed_squared_error(p.weights, p.biases, X, y)) < 1e-10
    with pytest.raises(ValueError):
        task_loss(one, np.zeros((0, 1)), [])
    with pytest.raises(ValueError):
        task_loss(one, [[1.0]], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _micro(seed)  # 1 -> 3 -> 1: ten parameters
    assert p.size == 10
    X, y = rng.normal(size=(6, 1)), rng.normal(size=6)
    _, g = loss_and_grad(p, X, y)

    def f(theta):
        q = HeadParams.from_vector(theta, p.dims)
        return summed_squared_error(q.weights, q.biases, X, y)

    assert relative_error(g, central_difference(f, p.ravel())).max() < 1e-4


def test_inner_adapt_identities():
    p = _micro(1, 2, (4,))
    X, y = np.random.default_rng(1).normal(size=(5, 2)), np.ones(5)
    assert np.array_equal(inner_adapt(p, X, y, 0.0).ravel(), p.ravel())
    assert np.array_equal(finetune(p, X, y, 0.0).ravel(), p.ravel())
    zero = HeadParams.from_vector(np.zeros(p.size), p.dims)
    assert np.array_equal(inner_adapt(zero, X, np.zeros(5), 0.1).ravel(), zero.ravel())
    _, g = loss_and_grad(p, X, y)
    assert np.array_equal(finetune(p, X, y, 0.01).ravel(), p.ravel() - 0.01 * g)
    with pytest.raises(ValueError):
        inner_adapt(p, X, y, -1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_inner_adapt_reports_divergence():
    p = _micro(1, 2, (4,))
    with pytest.raises(DivergenceError):
        inner_adapt(p, np.full((2, 2), 1e300), np.zeros(2), 0.1)


def _task_arrays(rng, d_in, n_s=4, n_q=5):
    return rng.normal(size=(n_s, d_in)), rng.normal(size=n_s), rng.normal(size=(n_q, d_in)), rng.normal(size=n_q)


def _as_tasks(parts):
    X = np.concatenate([np.concatenate([a, c]) for a, _, c, _ in parts])
    y = np.concatenate([np.concatenate([b, d]) for _, b, _, d in parts])
    tasks, at = [], 0
    for i, (a, _, c, _) in enumerate(parts):
        s, q = list(range(at, at + len(a))), list(range(at + len(a), at + len(a) + len(c)))
        tasks.append(Task(f"g{i}", s, q))
        at += len(a) + len(c)
    return X, y, tasks


@pytest.mark.parametrize("seed", range(5))
def test_second_order_meta_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _micro(seed, 2, (3,))
    alpha = 0.05
    X, y, tasks = _as_tasks([_task_arrays(rng, 2) for _ in range(2)])
    _, g = meta_gradient(p, X, y, tasks, alpha, second_order=True)

    def objective(theta):
        q = HeadParams.from_vector(theta, p.dims)
        total = 0.0
        for t in tasks:
            phi = inner_adapt(q, X[t.support_indices], y[t.support_indices], alpha)
            total += summed_squared_error(phi.weights, phi.biases, X[t.query_indices], y[t.query_indices])
        return total

    fd = central_difference(objective, p.ravel())
    assert relative_error(g, fd).max() < 1e-3
    # the first-order approximation is measurably different, so the check has teeth
    _, g1 = meta_gradient(p, X, y, tasks, alpha, second_order=False)
    assert relative_error(g1, fd).max() > 1e-3


def test_alpha_zero_meta_gradient_is_query_gradient():
    rng = np.random.default_rng(7)
    p = _micro(7, 3, (6, 6))
    X, y, tasks = _as_tasks([_task_arrays(rng, 3) for _ in range(3)])
    _, g = meta_gradient(p, X, y, tasks, 0.0)
    direct = sum(loss_and_grad(p, X[t.query_indices], y[t.query_indices])[1] for t in tasks)
    assert np.max(np.abs(g - direct)) < 1e-10


def test_identical_tasks_scale_the_gradient():
    rng = np.random.default_rng(8)
    p = _micro(8, 3, (5,))
    X, y, (task,) = _as_tasks([_task_arrays(rng, 3)])
    l1, g1 = meta_gradient(p, X, y, [task], 0.01)
    l4, g4 = meta_gradient(p, X, y, [task] * 4, 0.01)
    assert np.allclose(g4, 4 * g1, rtol=1e-12, atol=0)
    assert l4 == pytest.approx(4 * l1, rel=1e-12)


def test_adam_first_step_is_lr_times_sign():
    adam = AdamState.zeros(3, lr=0.1)
    out = adam.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert np.allclose(out, [-0.1, 0.1, 0.0], atol=1e-7)
    assert adam.t == 1


def _stream(tasks):
    while True:
        yield from tasks


def test_meta_train_reduces_query_loss_and_is_deterministic():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(60, 3))
    y = X @ np.array([1.0, -2.0, 0.5])
    tasks = [Task("g", list(range(i, i + 5)), list(range(i + 5, i + 10))) for i in range(0, 60, 10)]
    cfg = MetaConfig(inner_lr=1e-3, support_size=5, meta_iterations=150, tasks_per_meta_update=2, outer_lr=1e-2, seed=3, hidden=(8, 8))
    hist_a, hist_b = [], []
    a = meta_train(_stream(tasks), X, y, cfg, history=hist_a)
    b = meta_train(_stream(tasks), X, y, cfg, history=hist_b)
    assert np.array_equal(a.ravel(), b.ravel())
    assert hist_a == hist_b and len(hist_a) == 150
    assert np.mean(hist_a[-10:]) < 0.2 * np.mean(hist_a[:10])


def test_meta_train_empty_stream():
    cfg = MetaConfig(meta_iterations=1, hidden=(2,))
    with pytest.raises(ValueError, match="exhausted"):
        meta_train(iter([]), np.zeros((2, 1)), np.zeros(2), cfg)


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(inner_lr=0.0)
    with pytest.raises(ValueError):
        MetaConfig(tasks_per_meta_update=0)


def test_transfer_overfits_one_example_and_is_deterministic():
    cfg = MetaConfig(meta_iterations=500, outer_lr=1e-2, seed=1, hidden=(4,))
    X, y = np.array([[0.5, -1.0]]), np.array([3.0])
    hist = []
    p = train_transfer(X, y, cfg, history=hist)
    assert task_loss(p, X, y) < 1e-8
    assert np.array_equal(p.ravel(), train_transfer(X, y, cfg).ravel())
    with pytest.raises(ValueError):
        train_transfer(np.zeros((0, 2)), np.zeros(0), cfg)


def test_standardizer():
    A = np.array([[1.0, 5.0], [3.0, 5.0]])
    s = Standardizer.fit(A)
    assert np.array_equal(s.transform(A), [[-1.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(s.inverse(s.transform(A)), A)


def test_checkpoint_round_trip(tmp_path):
    p = _micro(2, 4, (6, 6))
    xs, ys = Standardizer.fit(np.random.default_rng(0).normal(size=(5, 4))), Standardizer.fit(np.arange(5.0)[:, None])
    cfg = MetaConfig(hidden=(6, 6), seed=11)
    path = tmp_path / "head.json"
    save_checkpoint(path, p, "trees", xs, ys, cfg)
    q, mode, xs2, ys2, cfg2 = load_checkpoint(path)
    assert np.array_equal(q.ravel(), p.ravel()) and q.dims == p.dims
    assert mode == "trees" and cfg2 == cfg
    assert np.array_equal(xs2.mean, xs.mean) and np.array_equal(ys2.scale, ys.scale)
