"""Command-line front end.

Every command writes CSV (and, for training runs, a manifest and a checkpoint)
into the output directory given by ``--out``, else ``$LPBN_OUT``, else
``./lpbn_out``.  Commands run with single-threaded BLAS unless ``--parallel``
is given, so identical flags reproduce identical bytes.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import os
import sys
import tempfile
from pathlib import Path

from . import quantizers as qz
from . import stats
from .data import CifarSource, Dataset, gen_synthetic, load_cifar
from .netgraph import (
    Graph,
    GraphError,
    build_fc_stack,
    build_small_convnet,
    load_checkpoint,
    memory_report,
    save_checkpoint,
    validate_cromulent,
)
from .tensorcore import sequential
from .trainer import TrainConfig, TrainingDiverged, manifest, quantsweep, retrofit, sweep_to_csv, train


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get("LPBN_OUT") or "lpbn_out")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _scheme_or_fp32(name):
    if name is None or name.lower() in ("fp32", "none"):
        return None
    return qz.get_scheme(name).id


# -- data and config flags ------------------------------------------------------


def add_data_flags(p):
    p.add_argument("--data", choices=["cifar", "synthetic"], default="cifar")
    p.add_argument("--cifar-dir", default=os.environ.get("LPBN_CIFAR_DIR"), help="directory with CIFAR-10 binary batches (default $LPBN_CIFAR_DIR)")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--syn-classes", type=int, default=10)
    p.add_argument("--syn-dim", type=int, default=3072)
    p.add_argument("--syn-separation", type=float, default=10.0)


def load_data(args, flatten: bool = True) -> tuple[Dataset, Dataset]:
    if args.data == "synthetic":
        full = gen_synthetic(args.syn_classes, args.syn_dim, args.n_train + args.n_test, args.data_seed, args.syn_separation)
        tr = Dataset(full.x[: args.n_train], full.y[: args.n_train], full.description + ":train")
        te = Dataset(full.x[args.n_train :], full.y[args.n_train :], full.description + ":test")
        return tr, te
    if not args.cifar_dir:
        raise FileNotFoundError("no CIFAR-10 directory: pass --cifar-dir or set LPBN_CIFAR_DIR")
    src = CifarSource(args.cifar_dir, args.n_train, args.n_test, flatten, args.data_seed)
    return load_cifar(src, "train"), load_cifar(src, "test")


def add_train_flags(p):
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--grad-mode", choices=["float", "quantize_at_input", "quantize_partial_sums"])
    p.add_argument("--seed", type=int)


def train_config(args, **extra) -> TrainConfig:
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    return TrainConfig.from_kv(
        text,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        grad_mode=args.grad_mode,
        seed=args.seed,
        **extra,
    )


# -- commands --------------------------------------------------------------------


def cmd_curve(args):
    pts = stats.transfer_curve(args.scheme, stats.grid(args.min, args.max, args.step))
    path = out_dir(args) / f"curve_{qz.get_scheme(args.scheme).id}.csv"
    write_atomic(path, stats.curve_to_csv(pts, with_logpdf=not args.no_density))
    print(f"wrote {len(pts)} points to {path}")


def cmd_table2(args):
    schemes = _csv_list(args.scheme)
    dists = _csv_list(args.dist)
    seeds = [int(s) for s in _csv_list(args.seed)]
    rows = [stats.table2_row(s, d, args.n, seed) for s in schemes for d in dists for seed in seeds]
    path = out_dir(args) / "table2.csv"
    text = stats.rows_to_csv(rows)
    write_atomic(path, text)
    sys.stdout.write(text)


def cmd_train(args):
    scheme = _scheme_or_fp32(args.scheme)
    cfg = train_config(args, scheme=scheme or "fp32")
    conv = args.model == "convnet"
    data, test = load_data(args, flatten=not conv)
    classes = max(data.num_classes, test.num_classes, 2)
    if conv:
        g = build_small_convnet(args.k, args.blocks, data.x.shape[1:], classes, scheme)
    else:
        g = build_fc_stack(args.width, scheme, int(data.x.shape[1]), classes)
    report = validate_cromulent(g)
    if scheme and not report.ok:
        raise GraphError("; ".join(report.violations))
    g.init_params(cfg.seed)
    hist = train(g, data, cfg, test, on_epoch=None if args.quiet else _echo)
    d = out_dir(args)
    write_atomic(d / "history.csv", hist.to_csv())
    write_atomic(d / "manifest.txt", manifest(cfg, model=args.model, width=args.width, data=data.description, test=test.description))
    save_checkpoint(d / "model.npz", g)
    f = hist.final
    print(f"final train_acc={f.train_accuracy:.4f} test_acc={f.test_accuracy if f.test_accuracy is not None else float('nan'):.4f}; wrote {d}")


def _echo(rec):
    test = "" if rec.test_accuracy is None else f" test_acc={rec.test_accuracy:.4f}"
    print(f"epoch {rec.epoch}: loss={rec.train_loss:.4f} train_acc={rec.train_accuracy:.4f}{test}", flush=True)


def cmd_quantsweep(args):
    cfg = train_config(args)
    data, test = load_data(args)
    widths = [int(w) for w in _csv_list(args.widths)]
    schemes = _csv_list(args.schemes)
    rows = quantsweep(widths, schemes, cfg, data, test)
    d = out_dir(args)
    text = sweep_to_csv(rows)
    write_atomic(d / "quantsweep.csv", text)
    write_atomic(d / "manifest.txt", manifest(cfg, widths=args.widths, schemes=args.schemes, data=data.description))
    sys.stdout.write(text)


def cmd_retrofit(args):
    ft = None
    if args.fine_tune_epochs:
        args.epochs = args.fine_tune_epochs
        ft = train_config(args)
    g = load_checkpoint(args.checkpoint)
    conv = len(g.input_shape) == 3
    data, test = load_data(args, flatten=not conv)
    subset = [int(i) for i in _csv_list(args.subset)] if args.subset else None
    rep = retrofit(g, args.scheme, args.policy, test, ft, data, subset)
    path = out_dir(args) / "retrofit.csv"
    text = rep.to_csv()
    write_atomic(path, text)
    sys.stdout.write(text)


def _graph_from_args(args) -> Graph:
    if args.graph:
        return Graph.from_json(Path(args.graph).read_text())
    if args.model == "convnet":
        return build_small_convnet(args.k, args.blocks)
    return build_fc_stack(args.width)


def cmd_memreport(args):
    g = _graph_from_args(args)
    schemes = _csv_list(args.scheme)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "node", "kind", "count", "bytes_fp32", "bytes_quantized"])
    for s in schemes:
        rep = memory_report(g, args.batch, s)
        for ln in rep.lines:
            w.writerow([s, ln.node, ln.kind, ln.count, ln.bytes_fp32, ln.bytes_quantized])
        nf, nq = rep.norm_subtotals()
        w.writerow([s, "norm_total", "", "", nf, nq])
        w.writerow([s, "total", "", "", rep.bytes_fp32, rep.bytes_quantized])
    path = out_dir(args) / "memreport.csv"
    write_atomic(path, buf.getvalue())
    sys.stdout.write(buf.getvalue())


def cmd_validate(args) -> int:
    g = Graph.from_json(Path(args.graph).read_text())
    rep = validate_cromulent(g)
    if rep.ok:
        print(f"{args.graph}: cromulent")
        return 0
    for v in rep.violations:
        print(f"{args.graph}: {v}", file=sys.stderr)
    return 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lpbn", description="Low-precision batch-normalized activations: experiments and tools.")
    ap.add_argument("--out", help="output directory (default $LPBN_OUT or ./lpbn_out)")
    ap.add_argument("--parallel", action="store_true", help="allow multi-threaded BLAS (outputs may differ in the last bits)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curve", help="quantizer transfer curve as CSV")
    p.add_argument("--scheme", required=True)
    p.add_argument("--min", type=float, default=-6.0)
    p.add_argument("--max", type=float, default=6.0)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--no-density", action="store_true", help="omit the Student-t(3) log density column")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("table2", help="correlation and spread of quantized normalized samples")
    p.add_argument("--scheme", default="L2,L3,L4")
    p.add_argument("--dist", default="gaussian,student_t3")
    p.add_argument("--n", type=int, default=10**6)
    p.add_argument("--seed", default="0")
    p.set_defaults(func=cmd_table2)

    p = sub.add_parser("train", help="train a network and write history, manifest and checkpoint")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--model", choices=["fc", "convnet"], default="fc")
    p.add_argument("--width", type=int, default=7, help="FC width exponent n (2^n units)")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--scheme", default="fp32")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantsweep", help="accuracy deltas of quantized FC stacks against fp32")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--widths", default="5,6,7")
    p.add_argument("--schemes", default="L2,L3,L4")
    p.set_defaults(func=cmd_quantsweep)

    p = sub.add_parser("retrofit", help="quantize the Norm nodes of a trained checkpoint")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", default="L4")
    p.add_argument("--policy", choices=["all", "all_but_first", "subset"], default="all")
    p.add_argument("--subset", help="comma-separated Norm indices for --policy subset")
    p.add_argument("--fine-tune-epochs", type=int, default=0)
    p.set_defaults(func=cmd_retrofit)

    p = sub.add_parser("memreport", help="saved-activation bytes per node, fp32 versus quantized")
    p.add_argument("--graph", help="graph JSON file (default: a built-in model)")
    p.add_argument("--model", choices=["fc", "convnet"], default="fc")
    p.add_argument("--width", type=int, default=7)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--scheme", default="L4")
    p.set_defaults(func=cmd_memreport)

    p = sub.add_parser("validate", help="check that a graph file is cromulent")
    p.add_argument("graph")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ctx = contextlib.nullcontext() if args.parallel else sequential()
    try:
        with ctx:
            code = args.func(args)
    except (ValueError, KeyError, FileNotFoundError, GraphError, TrainingDiverged) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lpbn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
