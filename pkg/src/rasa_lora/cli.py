"""``rasa-lora`` command line: seed-pinned experiments with CSV outputs.

Exit codes: 0 success, 1 theorem check failed, 2 bad arguments, 3 unreadable
or malformed data, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import reconstruction as rec
from .errors import FormatError, NumericalError, RasaError, ShapeError
from .io import fmt, read_csv, read_targets, save_factors, write_csv, write_targets

log = logging.getLogger("rasa_lora")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(RasaError):
    pass


def thread_count() -> int:
    env = os.environ.get("RASA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"RASA_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("RASA_THREADS must be positive")
        return n
    return os.cpu_count() or 1


def write_run_manifest(path, command, argv, seeds, started, artifacts) -> None:
    """Key:value run record, written via rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = {
        "command": command,
        "flags": " ".join(argv),
        "seeds": " ".join(str(s) for s in seeds),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "artifacts": " ".join(str(a) for a in artifacts),
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{k}:{v}\n" for k, v in lines.items()), encoding="utf-8")
    os.replace(tmp, path)


def _manifest_for(out: Path) -> Path:
    # kept beside the artifact so output directories stay byte-reproducible
    return out.with_name(out.name + ".manifest")


# --- commands ----------------------------------------------------------------


def cmd_gen_targets(args, ctx):
    targets = rec.synthetic_targets(args.layers, args.rows, args.cols, args.rank,
                                    decay=args.decay, seed=args.seed, coupling=args.coupling)
    write_targets(args.out, targets, {"decay": args.decay, "coupling": repr(args.coupling),
                                      "seed": args.seed})
    print(f"wrote {args.layers} factored targets ({args.rows}x{args.cols}, rank {args.rank}) "
          f"to {args.out}")
    ctx["seeds"] = [args.seed]
    ctx["artifacts"] = [Path(args.out)]
    return EXIT_OK


def cmd_lora_mre(args, ctx):
    targets = read_targets(args.targets)
    per_layer = rec.lora_mre_per_layer(targets, args.r)
    total = float(sum(per_layer))
    print(f"e_lora {fmt(total)}")
    rows = [(i, e) for i, e in enumerate(per_layer)]
    if args.out:
        write_csv(args.out, ["layer", "error"], rows)
        ctx["artifacts"] = [Path(args.out)]
    else:
        print("layer,error")
        for i, e in rows:
            print(f"{i},{fmt(e)}")
    return EXIT_OK


def cmd_reconstruct(args, ctx):
    targets = read_targets(args.targets)
    try:
        trace = rec.coordinate_descent(targets, args.r, args.k, init=args.init, seed=args.seed,
                                       max_sweeps=args.max_sweeps, tol=args.tol,
                                       workers=ctx["threads"])
    except NumericalError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None and partial.objective_per_sweep:
            _write_trace(args.out, partial)
        raise
    _write_trace(args.out, trace)
    ctx["artifacts"] = [Path(args.out)]
    if args.factors_out:
        save_factors(args.factors_out, trace.final, args.r, args.k, args.seed)
        ctx["artifacts"].append(Path(args.factors_out))
    ctx["seeds"] = [args.seed]
    print(f"e_lora {fmt(trace.e_lora_baseline)}")
    print(f"final {fmt(trace.final_objective)} after {trace.sweeps} sweeps "
          f"({'converged' if trace.converged else 'not converged'})")
    return EXIT_OK


def _write_trace(path, trace):
    rows = zip(trace.sweep_index, trace.objective_per_sweep, trace.elapsed_ms)
    write_csv(path, ["sweep", "objective", "elapsed_ms"], rows)


def cmd_theorem_check(args, ctx):
    targets = read_targets(args.targets)
    e_lora = rec.lora_mre(targets, args.r)
    e_rasa = rec.rasa_objective(targets, rec.theorem1_solution(targets, args.r, args.k))
    if e_lora <= 1e-12 and e_rasa <= 1e-12:
        ok = True
    else:
        ok = abs(e_rasa / e_lora - 1.0) <= args.rtol if e_lora > 0 else False
    print(f"{'PASS' if ok else 'FAIL'} e_lora={fmt(e_lora)} e_rasa={fmt(e_rasa)}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_sweep_k(args, ctx):
    if args.k_min > args.k_max:
        raise UsageError("--k-min must not exceed --k-max")
    targets = read_targets(args.targets)
    rows = rec.sweep_k(targets, args.r, range(args.k_min, args.k_max + 1), seed=args.seed,
                       max_sweeps=args.max_sweeps, tol=args.tol, workers=ctx["threads"])
    write_csv(args.out, ["k", "final_objective", "sweeps", "converged"],
              [(row.k, row.final_objective, row.sweeps, row.converged) for row in rows])
    best = min(rows, key=lambda row: row.final_objective)
    print(f"e_lora {fmt(rec.lora_mre(targets, args.r))}")
    print(f"argmin k={best.k} objective={fmt(best.final_objective)}")
    ctx["seeds"] = [args.seed]
    ctx["artifacts"] = [Path(args.out)]
    return EXIT_OK


def cmd_train_toy(args, ctx):
    from . import toy_train as tt

    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    k = 0 if args.method == "lora" else args.k
    task = tt.make_teacher_task(args.dim, args.layers, args.teacher_rank, args.samples,
                                seed=args.task_seed, activation=args.activation,
                                delta_scale=args.delta_scale, coupling=args.coupling)
    config = tt.TrainConfig(args.lr, args.epochs, args.batch_size, 0, args.momentum)
    curves, finals = [], []
    for seed in range(args.seeds):
        model = tt.build_model(task, args.method, args.r, k, args.alpha, seed=seed)
        cfg = tt.TrainConfig(config.learning_rate, config.epochs, config.batch_size, seed,
                             config.momentum)
        res = tt.train(model, task, cfg)
        if res.diverged:
            print(f"seed {seed}: diverged at epoch {res.epochs[-1]}", file=sys.stderr)
        curves.append(res)
        finals.append((args.method, args.r, k, seed, res.final_loss))
    n_points = min(len(c.losses) for c in curves)
    mean_curve = np.mean([c.losses[:n_points] for c in curves], axis=0)
    out = Path(args.out)
    write_csv(out, ["epoch", "train_loss"],
              [(e, float(v)) for e, v in zip(curves[0].epochs[:n_points], mean_curve)])
    final_path = out.with_name(out.stem + "_final.csv")
    write_csv(final_path, ["method", "r", "k", "seed", "final_loss"], finals)
    print(f"{args.method} r={args.r} k={k}: mean final loss "
          f"{fmt(float(np.mean([f[-1] for f in finals])))} over {args.seeds} seed(s)")
    ctx["seeds"] = list(range(args.seeds))
    ctx["artifacts"] = [out, final_path]
    return EXIT_OK if not any(c.diverged for c in curves) else EXIT_NUMERIC


_Y_COLUMNS = ("objective", "train_loss", "final_objective", "final_loss", "error")


def cmd_report(args, ctx):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.inputs:
        raise UsageError("report needs at least one --in CSV")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    merged = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.inputs:
        header, rows = read_csv(path)
        ycol = next((c for c in _Y_COLUMNS if c in header), None)
        if ycol is None or len(header) < 2:
            raise FormatError(f"{path}: no plottable column in {header}")
        xi, yi = 0, header.index(ycol)
        try:
            xs = [float(r[xi]) for r in rows]
            ys = [float(r[yi]) for r in rows]
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
        ax.plot(xs, ys, marker="." if len(xs) < 50 else None, label=Path(path).stem)
        ax.set_xlabel(header[xi])
        ax.set_ylabel(ycol)
        merged.extend((str(path), x, y) for x, y in zip(xs, ys))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "report.png", dpi=100)
    plt.close(fig)
    write_csv(out / "merged.csv", ["source", "x", "y"], merged)
    print(f"wrote {out / 'report.png'} and {out / 'merged.csv'} ({len(merged)} rows)")
    ctx["artifacts"] = [out / "report.png", out / "merged.csv"]
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rasa-lora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-targets", help="write synthetic factored target matrices")
    g.add_argument("--out", required=True)
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--rank", type=int, required=True)
    g.add_argument("--decay", choices=("flat", "power"), default="power")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coupling", type=float, default=0.5,
                   help="weight of the factor pair shared by all layers (0 = independent)")
    g.set_defaults(func=cmd_gen_targets)

    m = sub.add_parser("lora-mre", help="LoRA minimum reconstruction error")
    m.add_argument("--targets", required=True)
    m.add_argument("--r", type=int, required=True)
    m.add_argument("--out", help="per-layer CSV (default: stdout)")
    m.set_defaults(func=cmd_lora_mre)

    r = sub.add_parser("reconstruct", help="RaSA coordinate descent")
    r.add_argument("--targets", required=True)
    r.add_argument("--r", type=int, required=True)
    r.add_argument("--k", type=int, required=True)
    r.add_argument("--init", choices=("random", "theorem1"), default="random")
    r.add_argument("--max-sweeps", type=int, default=rec.DEFAULT_MAX_SWEEPS)
    r.add_argument("--tol", type=float, default=rec.DEFAULT_TOL)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--factors-out", help="directory for the final factors")
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("theorem-check", help="check the constructive RaSA <= LoRA solution")
    t.add_argument("--targets", required=True)
    t.add_argument("--r", type=int, required=True)
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--rtol", type=float, default=1e-8)
    t.set_defaults(func=cmd_theorem_check)

    s = sub.add_parser("sweep-k", help="converged error as a function of k")
    s.add_argument("--targets", required=True)
    s.add_argument("--r", type=int, required=True)
    s.add_argument("--k-min", type=int, default=0)
    s.add_argument("--k-max", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-sweeps", type=int, default=rec.DEFAULT_MAX_SWEEPS)
    s.add_argument("--tol", type=float, default=rec.DEFAULT_TOL)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_k)

    tr = sub.add_parser("train-toy", help="teacher-student adapter training")
    tr.add_argument("--method", choices=("lora", "rasa"), required=True)
    tr.add_argument("--layers", type=int, default=8)
    tr.add_argument("--dim", type=int, default=64)
    tr.add_argument("--teacher-rank", type=int, default=32)
    tr.add_argument("--r", type=int, default=8)
    tr.add_argument("--k", type=int, default=1)
    tr.add_argument("--epochs", type=int, default=200)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--seeds", type=int, default=1)
    tr.add_argument("--out", required=True)
    tr.add_argument("--activation", choices=("identity", "tanh"), default="identity")
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--batch-size", type=int, default=0, help="0 = full batch")
    tr.add_argument("--samples", type=int, default=512)
    tr.add_argument("--alpha", type=float, default=8.0)
    tr.add_argument("--delta-scale", type=float, default=0.5)
    tr.add_argument("--coupling", type=float, default=0.5)
    tr.add_argument("--task-seed", type=int, default=0)
    tr.set_defaults(func=cmd_train_toy)

    rp = sub.add_parser("report", help="merge CSVs and plot their curves")
    rp.add_argument("--in", dest="inputs", nargs="*", default=[])
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        ctx = {"threads": thread_count(), "seeds": [], "artifacts": []}
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=ctx["threads"]):
            code = args.func(args, ctx)
    except (UsageError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if ctx["artifacts"]:
        write_run_manifest(_manifest_for(Path(ctx["artifacts"][0])), args.command, argv,
                           ctx["seeds"], started, ctx["artifacts"])
    return code


if __name__ == "__main__":
    sys.exit(main())
