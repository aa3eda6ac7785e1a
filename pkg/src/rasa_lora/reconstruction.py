"""How well LoRA and RaSA factorizations can reproduce a set of high-rank matrices.

The RaSA objective used here attaches the per-layer diagonal to the shared pool
only::

    E = sum_i || M_i - (B~_i A~_i + B_S diag(d_i) A_S) ||_F^2

``coordinate_descent`` minimizes ``E`` by cycling four exact block updates:
a truncated SVD for each layer's private part, two linear least-squares solves
for the pool factors, and a small Hadamard-Gram solve for each diagonal.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterShape, initial_diagonal
from .errors import NumericalError, ShapeError
from .matrix import (
    as_matrix,
    child_seed,
    frob_sq,
    make_rng,
    rand_matrix,
    split_factors,
    svd,
    tail_energy,
)

RIDGE_FACTOR = 1e-10
DEFAULT_TOL = 1e-8
DEFAULT_MAX_SWEEPS = 200


@dataclass
class TargetSet:
    """``L`` equally shaped targets, stored densely or as ``M_i = P_i @ Q_i``."""

    dense: list | None = None
    P: list | None = None
    Q: list | None = None

    def __post_init__(self):
        if self.dense is not None:
            self.dense = [as_matrix(m, f"M[{i}]") for i, m in enumerate(self.dense)]
            shapes = {m.shape for m in self.dense}
        else:
            if self.P is None or self.Q is None or len(self.P) != len(self.Q):
                raise ShapeError("factored targets need matching P and Q lists")
            self.P = [as_matrix(m, f"P[{i}]") for i, m in enumerate(self.P)]
            self.Q = [as_matrix(m, f"Q[{i}]") for i, m in enumerate(self.Q)]
            for i, (p, q) in enumerate(zip(self.P, self.Q)):
                if p.shape[1] != q.shape[0]:
                    raise ShapeError(f"layer {i}: P is {p.shape} but Q is {q.shape}")
            shapes = {(p.shape[0], q.shape[1]) for p, q in zip(self.P, self.Q)}
        if not shapes:
            raise ShapeError("a target set needs at least one layer")
        if len(shapes) != 1:
            raise ShapeError(f"targets disagree on shape: {sorted(shapes)}")

    @classmethod
    def from_dense(cls, matrices) -> TargetSet:
        return cls(dense=list(matrices))

    @classmethod
    def from_factors(cls, P, Q) -> TargetSet:
        return cls(P=list(P), Q=list(Q))

    @property
    def factored(self) -> bool:
        return self.dense is None

    @property
    def L(self) -> int:
        return len(self.dense) if self.dense is not None else len(self.P)

    @property
    def shape(self) -> tuple[int, int]:
        if self.dense is not None:
            return self.dense[0].shape
        return self.P[0].shape[0], self.Q[0].shape[1]

    @property
    def R(self) -> int:
        """Nominal rank: factor width when factored, otherwise ``min(b, a)``."""
        if self.factored:
            return max(p.shape[1] for p in self.P)
        return min(self.shape)

    def matrix(self, i: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[i]
        return self.P[i] @ self.Q[i]

    def times(self, i: int, right) -> np.ndarray:
        """``M_i @ right`` without forming ``M_i`` when factored."""
        if self.dense is not None:
            return self.dense[i] @ right
        return self.P[i] @ (self.Q[i] @ right)

    def t_times(self, i: int, left) -> np.ndarray:
        """``M_i.T @ left`` without forming ``M_i`` when factored."""
        if self.dense is not None:
            return self.dense[i].T @ left
        return self.Q[i].T @ (self.P[i].T @ left)

    def total_energy(self) -> float:
        return sum(frob_sq(self.matrix(i)) for i in range(self.L))


@dataclass
class RasaFactors:
    """Reconstruction-form RaSA factors; each ``D[i]`` covers the ``L*k`` pool ranks only."""

    B_tilde: list
    A_tilde: list
    B_S: np.ndarray
    A_S: np.ndarray
    D: list

    @property
    def L(self) -> int:
        return len(self.B_tilde)

    @property
    def private_rank(self) -> int:
        return self.B_tilde[0].shape[1]

    @property
    def pool_width(self) -> int:
        return self.B_S.shape[1]

    def shared_term(self, i: int) -> np.ndarray:
        return (self.B_S * self.D[i]) @ self.A_S

    def layer_approx(self, i: int) -> np.ndarray:
        return self.B_tilde[i] @ self.A_tilde[i] + self.shared_term(i)

    def copy(self) -> RasaFactors:
        return RasaFactors(
            [m.copy() for m in self.B_tilde],
            [m.copy() for m in self.A_tilde],
            self.B_S.copy(),
            self.A_S.copy(),
            [d.copy() for d in self.D],
        )


@dataclass
class ReconstructionTrace:
    """Objective history of a coordinate-descent run.

    ``objective_per_sweep[j]`` is the objective after ``sweep_index[j]`` sweeps;
    index 0 (the starting point) is recorded whenever the run has a pool.
    """

    objective_per_sweep: list = field(default_factory=list)
    sweep_index: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False
    final: RasaFactors | None = None
    e_lora_baseline: float = float("nan")

    @property
    def final_objective(self) -> float:
        return self.objective_per_sweep[-1]


def _check_rank(targets: TargetSet, r: int):
    p = min(targets.shape)
    if not 1 <= r <= p:
        raise ShapeError(f"r must lie in [1, {p}], got {r}")


def _check_factors(targets: TargetSet, f: RasaFactors):
    b, a = targets.shape
    if f.L != targets.L:
        raise ShapeError(f"factors have {f.L} layers, targets have {targets.L}")
    w = f.pool_width
    if f.B_S.shape[0] != b or f.A_S.shape != (w, a):
        raise ShapeError("shared factors do not match target dimensions")
    for i in range(f.L):
        p = f.B_tilde[i].shape[1]
        if f.B_tilde[i].shape[0] != b or f.A_tilde[i].shape != (p, a) or f.D[i].shape != (w,):
            raise ShapeError(f"layer {i} factors do not match target dimensions")


# --- closed-form LoRA baseline -----------------------------------------------


def lora_mre_per_layer(targets: TargetSet, r: int) -> list[float]:
    _check_rank(targets, r)
    return [tail_energy(svd(targets.matrix(i)).singular_values, r) for i in range(targets.L)]


def lora_mre(targets: TargetSet, r: int) -> float:
    """Smallest total error of rank-``r`` per-layer factors: the discarded singular energy."""
    return float(sum(lora_mre_per_layer(targets, r)))


def rasa_objective(targets: TargetSet, factors: RasaFactors) -> float:
    _check_factors(targets, factors)
    return float(sum(frob_sq(targets.matrix(i) - factors.layer_approx(i))
                     for i in range(targets.L)))


def theorem1_solution(targets: TargetSet, r: int, k: int) -> RasaFactors:
    """Factors whose objective equals the LoRA minimum.

    Layer ``i`` keeps singular components ``1..r-k`` privately and donates
    components ``r-k+1..r`` to the pool; ``D_i`` switches on only its own block,
    weighted by those singular values.
    """
    _check_rank(targets, r)
    if not 1 <= k <= r:
        raise ShapeError(f"k must lie in [1, r={r}], got {k}")
    L = targets.L
    p = r - k
    B_tilde, A_tilde, U_blocks, V_blocks, D = [], [], [], [], []
    for i in range(L):
        res = svd(targets.matrix(i))
        b_i, a_i = split_factors(res, p)
        B_tilde.append(b_i)
        A_tilde.append(a_i)
        U_blocks.append(res.U[:, p:r])
        V_blocks.append(res.V[:, p:r].T)
        d = np.zeros(L * k)
        d[i * k:(i + 1) * k] = res.singular_values[p:r]
        D.append(d)
    return RasaFactors(B_tilde, A_tilde, np.hstack(U_blocks), np.vstack(V_blocks), D)


# --- coordinate-descent block updates ----------------------------------------


def default_ridge(gram: np.ndarray) -> float:
    return RIDGE_FACTOR * float(np.trace(gram)) / gram.shape[0]


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, ridge=None, what="system"):
    """Solve ``(gram + eps I) X = rhs``; ``None`` when the Gram is identically zero.

    A zero Gram means the block being updated has no influence on the objective,
    so callers keep the current value.
    """
    n = gram.shape[0]
    eps = default_ridge(gram) if ridge is None else ridge
    if ridge is None and eps == 0.0:
        return None
    if eps == 0.0 and np.linalg.matrix_rank(gram) < n:
        raise NumericalError(f"singular {n}x{n} Gram matrix in {what} update", shape=gram.shape)
    try:
        return np.linalg.solve(gram + eps * np.eye(n), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} solve failed", shape=gram.shape) from exc


def private_residual(targets: TargetSet, f: RasaFactors, i: int) -> np.ndarray:
    return targets.matrix(i) - f.shared_term(i)


def cd_update_layer(targets: TargetSet, f: RasaFactors, i: int):
    """Best private factors for layer ``i`` given the pool: truncated SVD of the residual."""
    p = f.private_rank
    b, a = targets.shape
    if p == 0:
        return np.zeros((b, 0)), np.zeros((0, a))
    return split_factors(svd(private_residual(targets, f, i)), p)


def _pool_residual_right(targets, f, i, right):
    """``(M_i - B~_i A~_i) @ right`` computed factor-wise."""
    return targets.times(i, right) - f.B_tilde[i] @ (f.A_tilde[i] @ right)


def _pool_residual_left(targets, f, i, left):
    """``left.T @ (M_i - B~_i A~_i)`` computed factor-wise."""
    return targets.t_times(i, left).T - (left.T @ f.B_tilde[i]) @ f.A_tilde[i]


def shared_B_system(targets: TargetSet, f: RasaFactors):
    """Normal equations ``B_S G = C`` for the pool's left factor."""
    dd = sum(np.outer(d, d) for d in f.D)
    gram = (f.A_S @ f.A_S.T) * dd
    rhs = sum(_pool_residual_right(targets, f, i, f.A_S.T) * f.D[i] for i in range(f.L))
    return gram, rhs


def shared_A_system(targets: TargetSet, f: RasaFactors):
    """Normal equations ``G A_S = C`` for the pool's right factor."""
    dd = sum(np.outer(d, d) for d in f.D)
    gram = (f.B_S.T @ f.B_S) * dd
    rhs = sum(f.D[i][:, None] * _pool_residual_left(targets, f, i, f.B_S) for i in range(f.L))
    return gram, rhs


def diagonal_system(targets: TargetSet, f: RasaFactors, i: int):
    """Normal equations ``G d_i = c`` for layer ``i``'s pool weights."""
    gram = (f.B_S.T @ f.B_S) * (f.A_S @ f.A_S.T)
    rhs = np.sum(_pool_residual_left(targets, f, i, f.B_S) * f.A_S, axis=1)
    return gram, rhs


def cd_update_shared_B(targets: TargetSet, f: RasaFactors, ridge=None) -> np.ndarray:
    if f.pool_width == 0:
        return f.B_S
    gram, rhs = shared_B_system(targets, f)
    sol = _ridge_solve(gram, rhs.T, ridge, "B_S")
    return f.B_S if sol is None else sol.T


def cd_update_shared_A(targets: TargetSet, f: RasaFactors, ridge=None) -> np.ndarray:
    if f.pool_width == 0:
        return f.A_S
    gram, rhs = shared_A_system(targets, f)
    sol = _ridge_solve(gram, rhs, ridge, "A_S")
    return f.A_S if sol is None else sol


def cd_update_D(targets: TargetSet, f: RasaFactors, i: int, ridge=None) -> np.ndarray:
    if f.pool_width == 0:
        return f.D[i]
    gram, rhs = diagonal_system(targets, f, i)
    sol = _ridge_solve(gram, rhs, ridge, f"D[{i}]")
    return f.D[i] if sol is None else sol


# --- drivers -----------------------------------------------------------------


def random_factors(targets: TargetSet, r: int, k: int, seed: int, alpha: float = 8.0) -> RasaFactors:
    """Kaiming-uniform factors everywhere (including B) and the pool part of the usual D init."""
    b, a = targets.shape
    L = targets.L
    p, w = r - k, L * k
    rng = make_rng(seed)
    B_tilde, A_tilde = [], []
    for _ in range(L):
        B_tilde.append(rand_matrix(rng, b, p, "kaiming") if p else np.zeros((b, 0)))
        A_tilde.append(rand_matrix(rng, p, a, "kaiming") if p else np.zeros((0, a)))
    B_S = rand_matrix(rng, b, w, "kaiming") if w else np.zeros((b, 0))
    A_S = rand_matrix(rng, w, a, "kaiming") if w else np.zeros((0, a))
    if w:
        pool_d = initial_diagonal(AdapterShape(L, b, a, r, k, alpha))[p:]
    else:
        pool_d = np.zeros(0)
    return RasaFactors(B_tilde, A_tilde, B_S, A_S, [pool_d.copy() for _ in range(L)])


def _map_layers(fn, L, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(L)))
    return [fn(i) for i in range(L)]


def run_sweep(targets: TargetSet, f: RasaFactors, ridge=None, workers=1) -> None:
    """One sweep in place: private parts, then B_S, then A_S, then every D_i."""
    layer_parts = _map_layers(lambda i: cd_update_layer(targets, f, i), f.L, workers)
    for i, (b_i, a_i) in enumerate(layer_parts):
        f.B_tilde[i], f.A_tilde[i] = b_i, a_i
    if f.pool_width == 0:
        return
    f.B_S = cd_update_shared_B(targets, f, ridge)
    f.A_S = cd_update_shared_A(targets, f, ridge)
    f.D = _map_layers(lambda i: cd_update_D(targets, f, i, ridge), f.L, workers)


def coordinate_descent(
    targets: TargetSet,
    r: int,
    k: int,
    init="random",
    seed: int = 0,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    tol: float = DEFAULT_TOL,
    ridge=None,
    workers: int = 1,
) -> ReconstructionTrace:
    """Minimize the RaSA objective by block coordinate descent.

    ``init`` is ``"random"`` (seeded) or ``"theorem1"``. Stops once the relative
    drop of the objective over one sweep falls below ``tol``. With ``k = 0`` the
    single private-part update is already optimal, so exactly one sweep runs.
    A :class:`NumericalError` raised mid-run carries the partial trace as
    ``exc.trace``.
    """
    _check_rank(targets, r)
    if not 0 <= k <= r:
        raise ShapeError(f"k must lie in [0, r={r}], got {k}")
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be at least 1")
    trace = ReconstructionTrace(e_lora_baseline=lora_mre(targets, r))
    if init == "theorem1" and k > 0:
        f = theorem1_solution(targets, r, k)
    elif init in ("random", "theorem1"):
        f = random_factors(targets, r, k, seed)
    else:
        raise ValueError(f"unknown init {init!r}")

    start = time.perf_counter()

    def record(n):
        trace.objective_per_sweep.append(rasa_objective(targets, f))
        trace.sweep_index.append(n)
        trace.elapsed_ms.append((time.perf_counter() - start) * 1e3)

    try:
        if k == 0:
            run_sweep(targets, f, ridge, workers)
            trace.sweeps = 1
            trace.converged = True
            record(1)
        else:
            record(0)
            for n in range(1, max_sweeps + 1):
                run_sweep(targets, f, ridge, workers)
                trace.sweeps = n
                record(n)
                prev, cur = trace.objective_per_sweep[-2:]
                if cur == 0.0 or abs(prev - cur) <= tol * max(abs(prev), np.finfo(float).tiny):
                    trace.converged = True
                    break
    except NumericalError as exc:
        trace.final = f
        exc.trace = trace
        raise
    trace.final = f
    return trace


@dataclass(frozen=True)
class SweepRow:
    k: int
    final_objective: float
    sweeps: int
    converged: bool


def sweep_k(targets: TargetSet, r: int, k_values, seed: int = 0,
            max_sweeps: int = DEFAULT_MAX_SWEEPS, tol: float = DEFAULT_TOL,
            init="random", workers: int = 1) -> list[SweepRow]:
    """One coordinate-descent run per ``k``; every run starts from the same seed."""
    rows = []
    for k in k_values:
        if not 0 <= k <= r:
            raise ShapeError(f"k = {k} outside [0, r={r}]")
        tr = coordinate_descent(targets, r, k, init=init, seed=seed,
                                max_sweeps=max_sweeps, tol=tol, workers=workers)
        rows.append(SweepRow(k, tr.final_objective, tr.sweeps, tr.converged))
    return rows


# --- synthetic targets -------------------------------------------------------


def synthetic_targets(L: int, b: int, a: int, R: int, decay="power", seed: int = 0,
                      coupling: float = 0.5) -> TargetSet:
    """Factored rank-``R`` targets ``M_i = P_i Q_i`` with Gaussian factors.

    Factor entries have variance ``1/b`` (``P``) and ``1/a`` (``Q``), so every
    component has roughly unit norm. Each layer mixes a factor pair common to all
    layers with its own pair, ``sqrt(c) * common + sqrt(1 - c) * own``, where
    ``c = coupling``; ``coupling=0`` gives independent layers. ``decay="power"``
    scales component ``j`` (1-based) by ``j**-0.5``; ``"flat"`` leaves it alone.
    """
    if not 1 <= R <= min(a, b):
        raise ShapeError(f"R must lie in [1, min(a, b)={min(a, b)}], got {R}")
    if not 0.0 <= coupling <= 1.0:
        raise ValueError(f"coupling must lie in [0, 1], got {coupling}")
    if decay == "power":
        weights = np.arange(1, R + 1, dtype=np.float64) ** -0.5
    elif decay == "flat":
        weights = np.ones(R)
    else:
        raise ValueError(f"unknown decay {decay!r}")
    rng = make_rng(child_seed(seed, 0))
    P_common = rand_matrix(rng, b, R, "gaussian", sigma=b ** -0.5)
    Q_common = rand_matrix(rng, R, a, "gaussian", sigma=a ** -0.5)
    mix_common, mix_own = np.sqrt(coupling), np.sqrt(1.0 - coupling)
    P, Q = [], []
    for i in range(L):
        rng = make_rng(child_seed(seed, i + 1))
        P_own = rand_matrix(rng, b, R, "gaussian", sigma=b ** -0.5)
        Q_own = rand_matrix(rng, R, a, "gaussian", sigma=a ** -0.5)
        P.append((mix_common * P_common + mix_own * P_own) * weights)
        Q.append(mix_common * Q_common + mix_own * Q_own)
    return TargetSet.from_factors(P, Q)


def planted_targets(L: int, b: int, a: int, r: int, k: int, seed: int = 0):
    """Targets produced exactly by random RaSA factors; returns ``(targets, factors)``."""
    rng = make_rng(seed)
    p, w = r - k, L * k
    f = RasaFactors(
        [rand_matrix(rng, b, p, "gaussian") if p else np.zeros((b, 0)) for _ in range(L)],
        [rand_matrix(rng, p, a, "gaussian") if p else np.zeros((0, a)) for _ in range(L)],
        rand_matrix(rng, b, w, "gaussian") if w else np.zeros((b, 0)),
        rand_matrix(rng, w, a, "gaussian") if w else np.zeros((0, a)),
        [rng.uniform(0.5, 1.5, size=w) for _ in range(L)],
    )
    return TargetSet.from_dense([f.layer_approx(i) for i in range(L)]), f
