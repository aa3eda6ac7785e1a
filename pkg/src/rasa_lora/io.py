"""Directory layouts and CSV writers for experiment artifacts."""
from __future__ import annotations

import csv
import os
from pathlib import Path

from .adapters import read_manifest, write_manifest
from .errors import FormatError
from .matrix import read_matrix, write_matrix
from .reconstruction import RasaFactors, TargetSet

TARGETS_MANIFEST = "manifest.txt"


def fmt(x) -> str:
    """Round-trip decimal form (17 significant digits) for floats."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_targets(directory, targets: TargetSet, extra=None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    b, a = targets.shape
    if targets.factored:
        for i in range(targets.L):
            write_matrix(out / f"P.{i}", targets.P[i])
            write_matrix(out / f"Q.{i}", targets.Q[i])
    else:
        for i in range(targets.L):
            write_matrix(out / f"M.{i}", targets.dense[i])
    fields = {"L": targets.L, "b": b, "a": a, "R": targets.R,
              "form": "factored" if targets.factored else "dense"}
    fields.update(extra or {})
    write_manifest(out / TARGETS_MANIFEST, fields)


def read_targets(directory) -> TargetSet:
    src = Path(directory)
    if not (src / TARGETS_MANIFEST).is_file():
        raise FormatError(f"{src}: missing {TARGETS_MANIFEST}")
    meta = read_manifest(src / TARGETS_MANIFEST)
    try:
        L, b, a = int(meta["L"]), int(meta["b"]), int(meta["a"])
        form = meta["form"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{src}: bad manifest: {exc}") from exc
    if form == "factored":
        targets = TargetSet.from_factors([read_matrix(src / f"P.{i}") for i in range(L)],
                                         [read_matrix(src / f"Q.{i}") for i in range(L)])
    elif form == "dense":
        targets = TargetSet.from_dense([read_matrix(src / f"M.{i}") for i in range(L)])
    else:
        raise FormatError(f"{src}: unknown target form {form!r}")
    if targets.shape != (b, a):
        raise FormatError(f"{src}: manifest says {b}x{a}, files hold {targets.shape}")
    return targets


def save_factors(directory, f: RasaFactors, r: int, k: int, seed=None) -> None:
    """Adapter-checkpoint-style layout; ``D.i`` holds the pool weights only."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    b, a = f.B_S.shape[0], f.A_S.shape[1]
    for i in range(f.L):
        if f.private_rank:
            write_matrix(out / f"B_tilde.{i}", f.B_tilde[i])
            write_matrix(out / f"A_tilde.{i}", f.A_tilde[i])
        if f.pool_width:
            write_matrix(out / f"D.{i}", f.D[i][None, :])
    if f.pool_width:
        write_matrix(out / "B_S", f.B_S)
        write_matrix(out / "A_S", f.A_S)
    write_manifest(out / "shape.txt", {
        "L": f.L, "a": a, "b": b, "r": r, "k": k, "alpha": "",
        "method": "rasa_shared_diagonal", "seed": "" if seed is None else seed,
    })
