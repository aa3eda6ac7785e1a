"""Dense matrix helpers: validation, SVD, truncation, random draws and RSAM I/O.

Matrices are plain two-dimensional ``float64`` numpy arrays. Functions in this
module never mutate their inputs.

RSAM file layout (little-endian, no padding)::

    b"RSAM" | u32 version=1 | u64 rows | u64 cols | rows*cols binary64, row-major
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionOverflowError,
    FormatError,
    MagicMismatchError,
    NumericalError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"RSAM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
# largest element count whose byte size still fits a signed 64-bit offset
_MAX_ELEMENTS = (2**63 - 1) // 8


def as_matrix(m, name="matrix") -> np.ndarray:
    """Return ``m`` as a 2-D float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} has non-finite entries", shape=arr.shape)
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = U @ diag(singular_values) @ V.T`` with ``p = min(rows, cols)``."""

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank=None) -> np.ndarray:
        q = len(self.singular_values) if rank is None else rank
        return (self.U[:, :q] * self.singular_values[:q]) @ self.V[:, :q].T


def svd(m) -> SvdResult:
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for {m.shape[0]}x{m.shape[1]} matrix", shape=m.shape
        ) from exc
    return SvdResult(U=u, singular_values=s, V=vt.T)


def truncated_approx(m, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``rank`` factors ``(B, A)`` of ``m`` with the singular values split evenly.

    ``B = U[:, :rank] * sqrt(s)`` and ``A = sqrt(s)[:, None] * V[:, :rank].T``, so
    ``||m - B @ A||_F^2`` is the sum of the squared discarded singular values.
    """
    m = as_matrix(m)
    p = min(m.shape)
    if not 1 <= rank <= p:
        raise ShapeError(f"rank must lie in [1, {p}], got {rank}")
    res = svd(m)
    return split_factors(res, rank)


def split_factors(res: SvdResult, rank: int) -> tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(res.singular_values[:rank])
    return res.U[:, :rank] * root, root[:, None] * res.V[:, :rank].T


def frob_sq(m) -> float:
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sum(arr * arr))


def tail_energy(singular_values, rank: int) -> float:
    """Sum of squared singular values past the first ``rank``."""
    tail = np.asarray(singular_values, dtype=np.float64)[rank:]
    return float(np.sum(tail * tail))


# --- random generation -------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is stable across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(parent_seed: int, stream: int) -> int:
    """Derive an independent 64-bit seed for sub-stream ``stream`` of ``parent_seed``."""
    ss = np.random.SeedSequence([parent_seed, stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def kaiming_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def rand_matrix(rng, rows, cols, dist="gaussian", *, sigma=1.0, fan_in=None) -> np.ndarray:
    """Draw a ``rows x cols`` matrix.

    ``dist="gaussian"`` samples N(0, sigma^2); ``dist="kaiming"`` samples
    uniformly from ``[-sqrt(6/fan_in), sqrt(6/fan_in)]`` (``fan_in`` defaults to
    ``cols``).
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"dimensions must be positive, got {rows}x{cols}")
    if dist == "gaussian":
        return rng.standard_normal((rows, cols)) * sigma
    if dist == "kaiming":
        bound = kaiming_bound(cols if fan_in is None else fan_in)
        return rng.uniform(-bound, bound, size=(rows, cols))
    raise ValueError(f"unknown distribution {dist!r}")


# --- RSAM file format --------------------------------------------------------


def encode_matrix(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + m.astype("<f8").tobytes(order="C")


def decode_matrix(buf: bytes, source="<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicMismatchError(f"{source}: not an RSAM file (magic {buf[:4]!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, rows, cols = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported RSAM version {version}")
    if rows == 0 or cols == 0 or rows > _MAX_ELEMENTS // max(cols, 1):
        raise DimensionOverflowError(f"{source}: invalid dimensions {rows}x{cols}")
    expected = rows * cols * 8
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(
            f"{source}: header declares {rows}x{cols} ({expected} bytes) but payload has {payload}"
        )
    if payload > expected:
        raise FormatError(f"{source}: {payload - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    m = data.astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{source}: matrix contains non-finite values")
    return m


def write_matrix(path, m) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_matrix(m))
    os.replace(tmp, path)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    return decode_matrix(path.read_bytes(), source=str(path))
