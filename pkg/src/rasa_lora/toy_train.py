"""Teacher-student training of LoRA/RaSA adapters on a stack of square linear layers.

The student and the teacher share frozen base weights ``W_i``; the teacher
adds a rank-``R`` update ``Delta*_i`` to every layer. The student only trains
its adapter, so the task measures how much of ``Delta*`` an adapter family can
absorb. Gradients are hand-written reverse mode.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    AdapterShape,
    BaseStack,
    LoRAAdapter,
    RaSAAdapter,
    forward as layer_forward,
    init_lora,
    init_rasa,
)
from .errors import NumericalError, ShapeError
from .matrix import child_seed, make_rng
from .reconstruction import synthetic_targets

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "tanh")
DIVERGENCE_FACTOR = 1e6


@dataclass
class ToyModel:
    base: BaseStack
    adapter: LoRAAdapter | RaSAAdapter
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        b, a = self.base.shape
        if a != b:
            raise ShapeError(f"chained layers must be square, got {b}x{a}")
        s = self.adapter.shape
        if (s.L, s.b, s.a) != (self.base.L, b, a):
            raise ShapeError("adapter shape does not match the base stack")


@dataclass
class TeacherTask:
    base: BaseStack
    teacher: BaseStack
    X: np.ndarray
    Y: np.ndarray
    activation: str = "identity"

    @property
    def d(self) -> int:
        return self.X.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 0
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 0:
            raise ValueError("learning_rate, epochs and batch_size must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    diverged: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


# --- parameters --------------------------------------------------------------


def parameters(adapter) -> list[tuple[str, np.ndarray]]:
    """Trainable arrays by name, in a fixed order; the arrays are the live storage."""
    L = adapter.shape.L
    if isinstance(adapter, LoRAAdapter):
        return ([(f"B[{i}]", adapter.B[i]) for i in range(L)]
                + [(f"A[{i}]", adapter.A[i]) for i in range(L)])
    out = [(f"B_tilde[{i}]", adapter.B_tilde[i]) for i in range(L)]
    out += [(f"A_tilde[{i}]", adapter.A_tilde[i]) for i in range(L)]
    out += [("B_S", adapter.B_S), ("A_S", adapter.A_S)]
    out += [(f"D[{i}]", adapter.D[i]) for i in range(L)]
    return [(name, arr) for name, arr in out if arr.size]


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def predict(model: ToyModel, X) -> np.ndarray:
    h = np.asarray(X, dtype=np.float64)
    L = model.base.L
    for i in range(L):
        z = layer_forward(model.adapter, model.base, i, h)
        h = _act(model.activation, z) if i < L - 1 else z
    return h


def stack_predict(stack: BaseStack, X, activation="identity") -> np.ndarray:
    h = np.asarray(X, dtype=np.float64)
    for i, w in enumerate(stack.weights):
        z = w @ h
        h = _act(activation, z) if i < stack.L - 1 else z
    return h


def mse(pred, Y) -> float:
    """Mean over examples (columns) of the squared error summed over outputs."""
    diff = pred - Y
    return float(np.sum(diff * diff) / Y.shape[1])


def loss_and_grads(model: ToyModel, X, Y, shared_from=None):
    """Loss and gradients for every array in :func:`parameters` (same order).

    Inputs and targets are ``d x n`` with one example per column. Shared-pool
    gradients sum the contributions of all layers; pass ``shared_from=j`` to keep
    only layer ``j``'s contribution.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0 or X.shape != Y.shape:
        raise ShapeError(f"need non-empty d x n inputs and targets, got {X.shape} and {Y.shape}")
    ad, base = model.adapter, model.base
    L = base.L
    lora = isinstance(ad, LoRAAdapter)

    inputs, pre = [], []
    h = X
    for i in range(L):
        inputs.append(h)
        z = layer_forward(ad, base, i, h)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite activations in layer {i}", layer=i)
        pre.append(z)
        h = _act(model.activation, z) if i < L - 1 else z
    n = X.shape[1]
    diff = h - Y
    loss = float(np.sum(diff * diff) / n)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss", layer=L - 1)

    grads = {name: np.zeros_like(arr) for name, arr in parameters(ad)}
    g = 2.0 * diff / n
    for i in reversed(range(L)):
        if i < L - 1 and model.activation == "tanh":
            g = g * (1.0 - np.tanh(pre[i]) ** 2)
        x = inputs[i]
        dx = base.weights[i].T @ g
        if lora:
            s = ad.scale
            u = ad.A[i] @ x
            gb = ad.B[i].T @ g
            grads[f"B[{i}]"] += s * (g @ u.T)
            grads[f"A[{i}]"] += s * (gb @ x.T)
            dx += s * (ad.A[i].T @ gb)
        else:
            p = ad.shape.private_rank
            d = ad.D[i][:, None]
            d_p, d_s = d[:p], d[p:]
            if p:
                u_p = ad.A_tilde[i] @ x
                g_p = ad.B_tilde[i].T @ g
                grads[f"B_tilde[{i}]"] += g @ (d_p * u_p).T
                grads[f"A_tilde[{i}]"] += (d_p * g_p) @ x.T
                grads[f"D[{i}]"][:p] += np.sum(g_p * u_p, axis=1)
                dx += ad.A_tilde[i].T @ (d_p * g_p)
            if ad.shape.pool_width:
                u_s = ad.A_S @ x
                g_s = ad.B_S.T @ g
                if shared_from is None or shared_from == i:
                    grads["B_S"] += g @ (d_s * u_s).T
                    grads["A_S"] += (d_s * g_s) @ x.T
                grads[f"D[{i}]"][p:] += np.sum(g_s * u_s, axis=1)
                dx += ad.A_S.T @ (d_s * g_s)
        g = dx
    return loss, [grads[name] for name, _ in parameters(ad)]


# --- task construction -------------------------------------------------------


def random_orthogonal(rng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def make_teacher_task(d=64, L=8, R=32, n=512, seed=0, activation="identity",
                      delta_scale=0.5, decay="power", coupling=0.5) -> TeacherTask:
    """Orthogonal base layers plus a rank-``R`` teacher update per layer.

    The teacher updates come from :func:`synthetic_targets` with the same decay
    and cross-layer coupling as the reconstruction experiments, scaled by
    ``delta_scale``. Inputs are standard Gaussian.
    """
    rng = make_rng(child_seed(seed, 0))
    base = BaseStack(tuple(random_orthogonal(rng, d) for _ in range(L)))
    deltas = synthetic_targets(L, d, d, R, decay=decay, seed=child_seed(seed, 1),
                               coupling=coupling)
    teacher = BaseStack(tuple(w + delta_scale * deltas.matrix(i)
                              for i, w in enumerate(base.weights)))
    X = make_rng(child_seed(seed, 2)).standard_normal((d, n))
    return TeacherTask(base, teacher, X, stack_predict(teacher, X, activation), activation)


def build_model(task: TeacherTask, method: str, r: int, k: int = 0, alpha: float = 8.0,
                seed: int = 0) -> ToyModel:
    d = task.d
    rng = make_rng(seed)
    if method == "lora":
        adapter = init_lora(AdapterShape(task.base.L, d, d, r, 0, alpha), rng)
    elif method == "rasa":
        adapter = init_rasa(AdapterShape(task.base.L, d, d, r, k, alpha), rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ToyModel(task.base, adapter, task.activation)


# --- optimization ------------------------------------------------------------


def train(model: ToyModel, task: TeacherTask, config: TrainConfig) -> TrainResult:
    """Minibatch gradient descent with heavy-ball momentum; updates the adapter in place.

    The curve holds the full-dataset loss before training (epoch 0) and after
    every epoch. Training stops early, flagged ``diverged``, if the loss exceeds
    ``1e6`` times its initial value.
    """
    X, Y = task.X, task.Y
    n = X.shape[1]
    bs = n if config.batch_size in (0, None) or config.batch_size > n else config.batch_size
    rng = make_rng(config.seed)
    params = [arr for _, arr in parameters(model.adapter)]
    velocity = [np.zeros_like(p) for p in params]
    result = TrainResult()
    initial = mse(predict(model, X), Y)
    result.epochs.append(0)
    result.losses.append(initial)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, grads = loss_and_grads(model, X[:, idx], Y[:, idx])
            for p, v, g in zip(params, velocity, grads):
                v *= config.momentum
                v += g
                p -= config.learning_rate * v
        loss = mse(predict(model, X), Y)
        result.epochs.append(epoch)
        result.losses.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(initial, 1e-300):
            log.warning("training diverged at epoch %d (loss %g)", epoch, loss)
            result.diverged = True
            break
    return result


@dataclass(frozen=True)
class CompareRow:
    method: str
    r: int
    k: int
    seed: int
    final_loss: float


def compare(task: TeacherTask, shapes, seeds, config: TrainConfig, alpha: float = 8.0):
    """Train every ``(method, r, k)`` in ``shapes`` once per seed.

    Returns ``(rows, means)`` where ``means`` maps ``(method, r, k)`` to the mean
    final loss over seeds. The seed drives both adapter init and batch order.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for method, r, k in shapes:
        for seed in seeds:
            model = build_model(task, method, r, k, alpha, seed=seed)
            cfg = TrainConfig(config.learning_rate, config.epochs, config.batch_size,
                              seed, config.momentum)
            res = train(model, task, cfg)
            rows.append(CompareRow(method, r, k, seed, res.final_loss))
    means = {}
    for key in dict.fromkeys((m, r, k) for m, r, k in shapes):
        vals = [row.final_loss for row in rows if (row.method, row.r, row.k) == key]
        means[key] = float(np.mean(vals))
    return rows, means
