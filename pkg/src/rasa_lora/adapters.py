"""LoRA and RaSA adapters over a stack of equally sized linear layers.

LoRA layer ``i`` adds ``(alpha / r) * B_i @ A_i``. RaSA keeps ``r - k`` private
ranks per layer and pools the remaining ``k`` ranks of every layer into shared
factors ``B_S`` (b x L*k) and ``A_S`` (L*k x a). Layer ``i`` then adds::

    [B~_i  B_S] @ diag(D_i) @ [A~_i ; A_S]

where ``D_i`` has length ``r - k + L*k`` and scales both parts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .matrix import as_matrix, rand_matrix, read_matrix, write_matrix


@dataclass(frozen=True)
class AdapterShape:
    L: int
    b: int
    a: int
    r: int
    k: int = 0
    alpha: float = 8.0

    def __post_init__(self):
        if self.L < 1 or self.a < 1 or self.b < 1:
            raise ShapeError(f"L, a, b must be positive: {self}")
        if not 1 <= self.r <= min(self.a, self.b):
            raise ShapeError(f"r must lie in [1, min(a, b)={min(self.a, self.b)}], got {self.r}")
        if not 0 <= self.k <= self.r:
            raise ShapeError(f"k must lie in [0, r={self.r}], got {self.k}")
        if not self.alpha > 0:
            raise ShapeError(f"alpha must be positive, got {self.alpha}")

    @property
    def private_rank(self) -> int:
        return self.r - self.k

    @property
    def pool_width(self) -> int:
        return self.L * self.k

    @property
    def bottleneck(self) -> int:
        return self.r - self.k + self.L * self.k


@dataclass
class BaseStack:
    """Frozen base weights ``W_i`` (all ``b x a``)."""

    weights: tuple

    def __post_init__(self):
        ws = tuple(as_matrix(w, f"W[{i}]") for i, w in enumerate(self.weights))
        if not ws:
            raise ShapeError("a base stack needs at least one layer")
        if len({w.shape for w in ws}) != 1:
            raise ShapeError("all base layers must share one shape")
        self.weights = ws

    @property
    def L(self) -> int:
        return len(self.weights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights[0].shape

    def forward(self, i: int, x) -> np.ndarray:
        return self.weights[_check_layer(i, self.L)] @ x


@dataclass
class LoRAAdapter:
    shape: AdapterShape
    B: list = field(default_factory=list)
    A: list = field(default_factory=list)

    method = "lora"

    @property
    def scale(self) -> float:
        return self.shape.alpha / self.shape.r

    def copy(self) -> LoRAAdapter:
        return LoRAAdapter(self.shape, [m.copy() for m in self.B], [m.copy() for m in self.A])


@dataclass
class RaSAAdapter:
    shape: AdapterShape
    B_tilde: list = field(default_factory=list)
    A_tilde: list = field(default_factory=list)
    B_S: np.ndarray = None
    A_S: np.ndarray = None
    D: list = field(default_factory=list)

    method = "rasa"

    def B_cat(self, i: int) -> np.ndarray:
        return np.hstack([self.B_tilde[i], self.B_S])

    def A_cat(self, i: int) -> np.ndarray:
        return np.vstack([self.A_tilde[i], self.A_S])

    def copy(self) -> RaSAAdapter:
        return RaSAAdapter(
            self.shape,
            [m.copy() for m in self.B_tilde],
            [m.copy() for m in self.A_tilde],
            self.B_S.copy(),
            self.A_S.copy(),
            [d.copy() for d in self.D],
        )


def _check_layer(i: int, L: int) -> int:
    if not 0 <= i < L:
        raise ShapeError(f"layer index {i} out of range for {L} layers")
    return i


def init_lora(shape: AdapterShape, rng) -> LoRAAdapter:
    """Kaiming-uniform ``A_i`` and zero ``B_i``, so the initial update is zero."""
    if shape.k != 0:
        raise ShapeError(f"LoRA adapters require k = 0, got k = {shape.k}")
    A = [rand_matrix(rng, shape.r, shape.a, "kaiming", fan_in=shape.a) for _ in range(shape.L)]
    B = [np.zeros((shape.b, shape.r)) for _ in range(shape.L)]
    return LoRAAdapter(shape, B, A)


def initial_diagonal(shape: AdapterShape) -> np.ndarray:
    """Starting ``D_i``: alpha/2 spread over the private ranks and over the pool separately."""
    s = shape
    d = np.empty(s.bottleneck)
    if s.private_rank:
        d[: s.private_rank] = 0.5 * s.alpha / s.private_rank
    if s.pool_width:
        d[s.private_rank :] = 0.5 * s.alpha / s.pool_width
    return d


def init_rasa(shape: AdapterShape, rng) -> RaSAAdapter:
    s = shape
    A_tilde = [rand_matrix(rng, s.private_rank, s.a, "kaiming", fan_in=s.a) if s.private_rank
               else np.zeros((0, s.a)) for _ in range(s.L)]
    A_S = (rand_matrix(rng, s.pool_width, s.a, "kaiming", fan_in=s.a) if s.pool_width
           else np.zeros((0, s.a)))
    B_tilde = [np.zeros((s.b, s.private_rank)) for _ in range(s.L)]
    B_S = np.zeros((s.b, s.pool_width))
    D = [initial_diagonal(s) for _ in range(s.L)]
    return RaSAAdapter(s, B_tilde, A_tilde, B_S, A_S, D)


def lora_as_rasa(adapter: LoRAAdapter) -> RaSAAdapter:
    """The k = 0 RaSA adapter with the same factors and a constant ``alpha/r`` diagonal."""
    s = adapter.shape
    return RaSAAdapter(
        s,
        [m.copy() for m in adapter.B],
        [m.copy() for m in adapter.A],
        np.zeros((s.b, 0)),
        np.zeros((0, s.a)),
        [np.full(s.r, adapter.scale) for _ in range(s.L)],
    )


def assemble_delta(adapter, i: int) -> np.ndarray:
    i = _check_layer(i, adapter.shape.L)
    if isinstance(adapter, LoRAAdapter):
        return adapter.scale * (adapter.B[i] @ adapter.A[i])
    return (adapter.B_cat(i) * adapter.D[i]) @ adapter.A_cat(i)


def forward(adapter, base: BaseStack, i: int, x) -> np.ndarray:
    """``W_i x + Delta_i x`` for a vector or an ``a x n`` batch, without forming ``Delta_i``."""
    x = np.asarray(x, dtype=np.float64)
    i = _check_layer(i, adapter.shape.L)
    if base.L != adapter.shape.L or base.shape != (adapter.shape.b, adapter.shape.a):
        raise ShapeError("adapter and base stack disagree on layer count or dimensions")
    if x.shape[0] != adapter.shape.a:
        raise ShapeError(f"input has {x.shape[0]} rows, expected {adapter.shape.a}")
    out = base.weights[i] @ x
    if isinstance(adapter, LoRAAdapter):
        return out + adapter.scale * (adapter.B[i] @ (adapter.A[i] @ x))
    p = adapter.shape.private_rank
    d = adapter.D[i] if x.ndim == 1 else adapter.D[i][:, None]
    z_private = d[:p] * (adapter.A_tilde[i] @ x)
    z_shared = d[p:] * (adapter.A_S @ x)
    return out + adapter.B_tilde[i] @ z_private + adapter.B_S @ z_shared


def merge(adapter, base: BaseStack) -> BaseStack:
    """New stack with ``W_i + Delta_i``. Not idempotent: merging twice adds ``2 Delta_i``."""
    if base.L != adapter.shape.L or base.shape != (adapter.shape.b, adapter.shape.a):
        raise ShapeError("adapter and base stack disagree on layer count or dimensions")
    return BaseStack(tuple(w + assemble_delta(adapter, i) for i, w in enumerate(base.weights)))


def param_count(shape: AdapterShape, method: str) -> int:
    s = shape
    if method == "lora":
        return s.L * s.r * (s.a + s.b)
    if method == "rasa":
        return (s.L * s.private_rank * (s.a + s.b)
                + s.pool_width * (s.a + s.b)
                + s.L * s.bottleneck)
    raise ValueError(f"unknown method {method!r}")


def delta_rank_bound(shape: AdapterShape) -> int:
    return min(shape.bottleneck, shape.a, shape.b)


# --- checkpoints -------------------------------------------------------------

MANIFEST_NAME = "shape.txt"


def write_manifest(path, fields: dict) -> None:
    text = "".join(f"{key}:{value}\n" for key, value in fields.items())
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path) -> dict:
    fields = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"{path}:{n}: expected key:value, got {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def _write_if_nonempty(path, m):
    if m.size:
        write_matrix(path, m)


def save_adapter(directory, adapter, seed=None) -> None:
    """Write one RSAM file per factor plus a ``shape.txt`` key:value manifest.

    LoRA factors are stored under the private-part names ``B_tilde.i``/``A_tilde.i``.
    Zero-width factors (e.g. the pool when k = 0) are omitted.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    s = adapter.shape
    if isinstance(adapter, LoRAAdapter):
        for i in range(s.L):
            write_matrix(out / f"B_tilde.{i}", adapter.B[i])
            write_matrix(out / f"A_tilde.{i}", adapter.A[i])
    else:
        for i in range(s.L):
            _write_if_nonempty(out / f"B_tilde.{i}", adapter.B_tilde[i])
            _write_if_nonempty(out / f"A_tilde.{i}", adapter.A_tilde[i])
            write_matrix(out / f"D.{i}", adapter.D[i][None, :])
        _write_if_nonempty(out / "B_S", adapter.B_S)
        _write_if_nonempty(out / "A_S", adapter.A_S)
    write_manifest(out / MANIFEST_NAME, {
        "L": s.L, "a": s.a, "b": s.b, "r": s.r, "k": s.k,
        "alpha": repr(float(s.alpha)), "method": adapter.method,
        "seed": "" if seed is None else seed,
    })


def _read_or_empty(path, shape):
    if shape[0] == 0 or shape[1] == 0:
        return np.zeros(shape)
    m = read_matrix(path)
    if m.shape != shape:
        raise FormatError(f"{path}: expected shape {shape}, found {m.shape}")
    return m


def load_adapter(directory):
    src = Path(directory)
    meta = read_manifest(src / MANIFEST_NAME)
    try:
        s = AdapterShape(int(meta["L"]), int(meta["b"]), int(meta["a"]),
                         int(meta["r"]), int(meta["k"]), float(meta["alpha"]))
        method = meta["method"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{src}: bad manifest: {exc}") from exc
    if method == "lora":
        B = [_read_or_empty(src / f"B_tilde.{i}", (s.b, s.r)) for i in range(s.L)]
        A = [_read_or_empty(src / f"A_tilde.{i}", (s.r, s.a)) for i in range(s.L)]
        return LoRAAdapter(s, B, A)
    if method != "rasa":
        raise FormatError(f"{src}: unknown adapter method {method!r}")
    p, w = s.private_rank, s.pool_width
    return RaSAAdapter(
        s,
        [_read_or_empty(src / f"B_tilde.{i}", (s.b, p)) for i in range(s.L)],
        [_read_or_empty(src / f"A_tilde.{i}", (p, s.a)) for i in range(s.L)],
        _read_or_empty(src / "B_S", (s.b, w)),
        _read_or_empty(src / "A_S", (w, s.a)),
        [_read_or_empty(src / f"D.{i}", (1, s.bottleneck))[0] for i in range(s.L)],
    )
