"""Differentiable regression head and its meta-training.

The head is a ReLU MLP, ``[d_in -> 40 -> 40 -> 1]`` by default, fed with the
per-tree output vector of the forest (or raw features in the forest-free
mode). Its first-layer weights play the role of per-tree attention weights;
there is no separate attention mechanism.

Losses use the summed squared error over a set, not the mean, so the inner
step size interacts with the support size. Gradients are written out by hand;
the second-order meta-gradient uses an exact Hessian-vector product computed
with Pearlmutter's R-operator (ReLU has zero curvature almost everywhere, so
the only second-order terms come from the products between layers).
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from metarf.data import Task
from metarf.seeding import make_rng

HIDDEN = (40, 40)


class DivergenceError(FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Weights ``W_l`` of shape ``(fan_in, fan_out)`` and biases ``b_l``.

    Values are treated as immutable; every update builds a new instance.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input {W.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("the output layer must have width 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(W.shape[1] for W in self.weights))

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    @classmethod
    def from_vector(cls, vec: np.ndarray, dims: Sequence[int]) -> HeadParams:
        vec = np.asarray(vec, dtype=np.float64)
        Ws, bs, at = [], [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            Ws.append(vec[at : at + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            at += fan_in * fan_out
            bs.append(vec[at : at + fan_out].copy())
            at += fan_out
        if at != vec.size:
            raise ValueError(f"vector of length {vec.size} does not match dims {tuple(dims)}")
        return cls(tuple(Ws), tuple(bs))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "vector": self.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> HeadParams:
        return cls.from_vector(np.array(d["vector"], dtype=np.float64), d["dims"])


def init_params(d_in: int, seed: int, hidden: Sequence[int] = HIDDEN) -> HeadParams:
    """Scaled-uniform weights, bound ``sqrt(6 / (fan_in + fan_out))``; zero biases."""
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    rng = make_rng(seed)
    dims = (d_in, *hidden, 1)
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return HeadParams(tuple(Ws), tuple(bs))


def _as_batch(params: HeadParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise ValueError(f"head expects inputs of length {params.d_in}, got shape {X.shape}")
    return X


def _forward(params: HeadParams, X: np.ndarray):
    acts = [X]
    masks = []
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        if i < last:
            m = z > 0.0
            h = np.where(m, z, 0.0)
            masks.append(m)
            acts.append(h)
        else:
            h = z
    return h[:, 0], acts, masks


def predict(params: HeadParams, X) -> np.ndarray:
    """Head outputs for each row of ``X``."""
    return _forward(params, _as_batch(params, X))[0]


def head_forward(params: HeadParams, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ValueError(f"head expects a vector of length {params.d_in}, got shape {x.shape}")
    return float(predict(params, x[None, :])[0])


def _check_set(params: HeadParams, X, y) -> tuple[np.ndarray, np.ndarray]:
    X = _as_batch(params, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty example set")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return X, y


def task_loss(params: HeadParams, inputs, targets) -> float:
    """Summed squared error of the head over a set."""
    X, y = _check_set(params, inputs, targets)
    r = predict(params, X) - y
    return float(r @ r)


def loss_and_grad(params: HeadParams, inputs, targets) -> tuple[float, np.ndarray]:
    """Summed squared error and its gradient as a flat vector (``ravel`` order)."""
    X, y = _check_set(params, inputs, targets)
    out, acts, masks = _forward(params, X)
    r = out - y
    d = (2.0 * r)[:, None]
    grads = []
    for i in range(len(params.weights) - 1, -1, -1):
        grads.append((acts[i].T @ d, d.sum(axis=0)))
        if i:
            d = (d @ params.weights[i].T) * masks[i - 1]
    grads.reverse()
    return float(r @ r), np.concatenate([a.ravel() for gW, gb in grads for a in (gW, gb)])


def hessian_vector(params: HeadParams, inputs, targets, v: np.ndarray) -> np.ndarray:
    """Exact ``H @ v`` for the summed squared error, with ``v`` in ``ravel`` order."""
    X, y = _check_set(params, inputs, targets)
    V = HeadParams.from_vector(v, params.dims)
    out, acts, masks = _forward(params, X)
    # forward directional derivatives of each layer's activations
    r_acts = [np.zeros_like(X)]
    rh = r_acts[0]
    last = len(params.weights) - 1
    for i, (W, VW, Vb) in enumerate(zip(params.weights, V.weights, V.biases)):
        rz = rh @ W + acts[i] @ VW + Vb
        if i < last:
            rh = rz * masks[i]
            r_acts.append(rh)
        else:
            r_out = rz
    d = (2.0 * (out - y))[:, None]
    rd = 2.0 * r_out
    parts = []
    for i in range(last, -1, -1):
        parts.append((r_acts[i].T @ d + acts[i].T @ rd, rd.sum(axis=0)))
        if i:
            W, VW = params.weights[i], V.weights[i]
            rd = (rd @ W.T + d @ VW.T) * masks[i - 1]
            d = (d @ W.T) * masks[i - 1]
    parts.reverse()
    return np.concatenate([a.ravel() for hW, hb in parts for a in (hW, hb)])


def _finite_or_raise(what: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite {what}; the head parameters are exploding (lower the step size)")


def inner_adapt(params: HeadParams, inputs, targets, alpha: float) -> HeadParams:
    """One plain gradient step ``theta - alpha * grad`` on the support set."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    loss, g = loss_and_grad(params, inputs, targets)
    _finite_or_raise("support loss or gradient", np.array(loss), g)
    if alpha == 0.0:
        return params
    return HeadParams.from_vector(params.ravel() - alpha * g, params.dims)


def finetune(params: HeadParams, inputs, targets, alpha: float) -> HeadParams:
    """Deployment-time adaptation to a new group: the same single gradient step."""
    return inner_adapt(params, inputs, targets, alpha)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the updated parameter vector; moments are advanced in place."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-4
    support_size: int = 40
    meta_iterations: int = 80
    tasks_per_meta_update: int = 4
    outer_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    second_order: bool = True
    seed: int = 0
    hidden: tuple[int, ...] = field(default=HIDDEN)

    def __post_init__(self):
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be > 0")
        if self.support_size < 1:
            raise ValueError("support_size must be >= 1")
        if self.meta_iterations < 1:
            raise ValueError("meta_iterations must be >= 1")
        if self.tasks_per_meta_update < 1:
            raise ValueError("tasks_per_meta_update must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def task_meta_gradient(
    params: HeadParams, Xs, ys, Xq, yq, alpha: float, second_order: bool = True
) -> tuple[float, np.ndarray]:
    """Query loss after one inner step, and its gradient w.r.t. the pre-step parameters.

    Second order: ``(I - alpha * H_support(theta)) @ grad_query(phi)``.
    First order drops the Hessian term.
    """
    adapted = inner_adapt(params, Xs, ys, alpha)
    q_loss, g_q = loss_and_grad(adapted, Xq, yq)
    if second_order and alpha != 0.0:
        g_q = g_q - alpha * hessian_vector(params, Xs, ys, g_q)
    return q_loss, g_q


def meta_gradient(
    params: HeadParams, inputs: np.ndarray, targets: np.ndarray, tasks: Sequence[Task], alpha: float, second_order: bool = True
) -> tuple[float, np.ndarray]:
    """Summed post-adaptation query loss over ``tasks`` and its gradient."""
    total = 0.0
    grad = np.zeros(params.size)
    for task in tasks:
        s = np.asarray(task.support_indices)
        q = np.asarray(task.query_indices)
        if s.size == 0 or q.size == 0:
            raise ValueError(f"task for group {task.group!r} needs support and query rows")
        loss, g = task_meta_gradient(params, inputs[s], targets[s], inputs[q], targets[q], alpha, second_order)
        total += loss
        grad += g
    return total, grad


def meta_train(
    task_stream: Iterator[Task],
    inputs: np.ndarray,
    targets: np.ndarray,
    config: MetaConfig,
    init: HeadParams | None = None,
    history: list[float] | None = None,
) -> HeadParams:
    """Meta-train the head initialisation with one-step inner adaptation and Adam.

    Each iteration draws ``tasks_per_meta_update`` tasks from ``task_stream``,
    whose indices address rows of ``inputs``/``targets``. The summed query
    loss per iteration is appended to ``history`` when given.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    params = init if init is not None else init_params(inputs.shape[1], config.seed, config.hidden)
    adam = AdamState.zeros(params.size, config.outer_lr, config.beta1, config.beta2, config.eps)
    theta = params.ravel()
    for it in range(config.meta_iterations):
        batch = []
        for _ in range(config.tasks_per_meta_update):
            try:
                batch.append(next(task_stream))
            except StopIteration:
                raise ValueError(f"task stream exhausted at meta-iteration {it}") from None
        loss, grad = meta_gradient(params, inputs, targets, batch, config.inner_lr, config.second_order)
        _finite_or_raise(f"meta-loss at iteration {it}", np.array(loss), grad)
        if history is not None:
            history.append(loss)
        theta = adam.step(theta, grad)
        params = HeadParams.from_vector(theta, params.dims)
    return params


def train_transfer(
    inputs: np.ndarray,
    targets: np.ndarray,
    config: MetaConfig,
    rng: np.random.Generator | None = None,
    history: list[float] | None = None,
) -> HeadParams:
    """Pretrain the head on pooled rows with Adam; no inner loop.

    Each of ``meta_iterations`` steps uses a minibatch of
    ``tasks_per_meta_update * support_size`` pooled rows (all rows if fewer),
    so the per-step loss scale matches meta-training.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("no pooled training rows")
    rng = rng if rng is not None else make_rng(config.seed, 1)
    params = init_params(inputs.shape[1], config.seed, config.hidden)
    adam = AdamState.zeros(params.size, config.outer_lr, config.beta1, config.beta2, config.eps)
    theta = params.ravel()
    batch = min(inputs.shape[0], config.tasks_per_meta_update * config.support_size)
    for it in range(config.meta_iterations):
        rows = rng.choice(inputs.shape[0], size=batch, replace=False)
        loss, grad = loss_and_grad(params, inputs[rows], targets[rows])
        _finite_or_raise(f"training loss at iteration {it}", np.array(loss), grad)
        if history is not None:
            history.append(loss)
        theta = adam.step(theta, grad)
        params = HeadParams.from_vector(theta, params.dims)
    return params


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-dimension z-score; zero-spread dimensions are only centred."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, A: np.ndarray) -> Standardizer:
        A = np.asarray(A, dtype=np.float64)
        mean = A.mean(axis=0)
        scale = A.std(axis=0)
        scale = np.where(scale > 0.0, scale, 1.0)
        return cls(np.atleast_1d(mean), np.atleast_1d(scale))

    def transform(self, A) -> np.ndarray:
        return (np.asarray(A, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, A) -> np.ndarray:
        return np.asarray(A, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64))


CHECKPOINT_FORMAT = "metarf-head"


def save_checkpoint(
    path: str | Path,
    params: HeadParams,
    input_mode: str,
    x_scaler: Standardizer,
    y_scaler: Standardizer,
    config: MetaConfig,
) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "input_mode": input_mode,
        "params": params.to_dict(),
        "input_standardizer": x_scaler.to_dict(),
        "target_standardizer": y_scaler.to_dict(),
        "config": asdict(config),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[HeadParams, str, Standardizer, Standardizer, MetaConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a head checkpoint")
    cfg = dict(doc["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    return (
        HeadParams.from_dict(doc["params"]),
        doc["input_mode"],
        Standardizer.from_dict(doc["input_standardizer"]),
        Standardizer.from_dict(doc["target_standardizer"]),
        MetaConfig(**cfg),
    )
