"""``srukit`` command line: training, benchmarks, gradient checks and probes.

Exit codes: 0 success, 1 suite or run failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from typing import Sequence

from srukit import bench, gradcheck
from srukit.checkpoint import decode_checkpoint, load_checkpoint, read_header, save_checkpoint
from srukit.corpus import load_corpus
from srukit.exceptions import CheckpointError, NonFiniteError, SruError
from srukit.init_calib import PROBE_MODES, variance_ratio_probe
from srukit.tensor_core import SeededRng
from srukit.training.loop import (
    METRIC_COLUMNS,
    TrainConfig,
    synthetic_presence_task,
    train_char_lm,
    train_classifier,
)
from srukit.training.models import ModelSpec, count_params

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LM_HIGHWAY_BIAS = -3.0

log = logging.getLogger("srukit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits 2; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("expected at least one value")
    return out


def _model_flags(p: argparse.ArgumentParser, layers: int, d_model: int) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=layers)
    g.add_argument("--d-model", type=int, default=d_model)
    g.add_argument("--d-proj", type=int, default=None, help="low-rank projection width")
    g.add_argument("--highway-bias", type=float, default=None)
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--no-state-gates", action="store_true", help="drop v*c from the gates")
    g.add_argument("--no-alpha", action="store_true", help="disable the skip scaling correction")
    g.add_argument("--no-highway", action="store_true", help="output h = c")


def _train_flags(p: argparse.ArgumentParser, *, batch: int, max_steps: int,
                 eval_every: int, warmup: int) -> None:
    g = p.add_argument_group("optimization")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=int, default=batch)
    g.add_argument("--max-steps", type=int, default=max_steps)
    g.add_argument("--eval-every", type=int, default=eval_every)
    g.add_argument("--warmup", type=int, default=warmup)
    g.add_argument("--lr-factor", type=float, default=3.0)
    g.add_argument("--lr", type=float, default=None,
                   help="constant learning rate instead of the warmup/decay schedule")
    g.add_argument("--weight-decay", type=float, default=1e-7)
    g.add_argument("--grad-clip", type=float, default=0.3)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint", help="write the final state here")
    p.add_argument("--out", help="metrics CSV path (default: stdout)")
    p.add_argument("--dry-run", action="store_true", help="print the parameter count and exit")
    p.add_argument("--reproducible", action="store_true",
                   help="write wall_ms as 0 so reruns produce identical CSVs")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="srukit", description=__doc__.splitlines()[0])
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-lm", help="character-level language model")
    p.add_argument("corpus", help="text or byte file, split 90/5/5 by position")
    p.add_argument("--arch", choices=("sru", "lstm"), default="sru")
    p.add_argument("--unroll", type=int, default=64)
    _model_flags(p, layers=2, d_model=64)
    _train_flags(p, batch=32, max_steps=2000, eval_every=200, warmup=2000)

    p = sub.add_parser("train-clf", help="sequence classifier on the synthetic marker task")
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--examples", type=int, default=2000)
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=24)
    _model_flags(p, layers=2, d_model=32)
    _train_flags(p, batch=16, max_steps=1000, eval_every=100, warmup=200)

    p = sub.add_parser("bench", help="timing sweep, CSV on stdout")
    p.add_argument("--L", type=_int_list, default=[32, 128], help="comma-separated lengths")
    p.add_argument("--d", type=_int_list, default=[128, 256, 512], help="comma-separated widths")
    p.add_argument("--B", type=int, default=32)
    p.add_argument("--arch", nargs="+", choices=bench.ARCHS, default=list(bench.ARCHS))
    p.add_argument("--pass", dest="passes", nargs="+", choices=bench.PASSES,
                   default=["forward", "forward_backward"])
    p.add_argument("--reps", type=int, default=bench.MIN_REPS)
    p.add_argument("--gnuplot", action="store_true", help="blocked whitespace layout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="randomized finite-difference gradient suite")
    p.add_argument("--preset", choices=tuple(gradcheck.PRESETS), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=tuple(gradcheck.FAULTS), help=argparse.SUPPRESS)

    p = sub.add_parser("probe-variance", help="per-layer variance ratios at initialization")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--mode", choices=PROBE_MODES, default="iid")
    p.add_argument("--highway-bias", type=float, default=0.0)
    p.add_argument("--no-alpha", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("inspect-checkpoint", help="validate a checkpoint and print its header")
    p.add_argument("path")
    return root


@contextlib.contextmanager
def _output(path: str | None):
    if path is None:
        yield sys.stdout
        return
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise SruError(f"cannot write {path!r}: {exc.strerror}") from exc
    with fh:
        yield fh


def _spec_from_args(args, kind: str, vocab_size: int, default_bias: float) -> ModelSpec:
    return ModelSpec(
        kind=kind, layers=args.layers, d_model=args.d_model, vocab_size=vocab_size,
        d_proj=args.d_proj, bidirectional=getattr(args, "bidirectional", False),
        highway_bias=default_bias if args.highway_bias is None else args.highway_bias,
        dropout_p=args.dropout, use_state_in_gates=not args.no_state_gates,
        use_scaling_correction=not args.no_alpha, use_highway=not args.no_highway,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch=args.batch, unroll=getattr(args, "unroll", 64), max_steps=args.max_steps,
        lr_factor=args.lr_factor, warmup_steps=args.warmup, weight_decay=args.weight_decay,
        grad_clip=args.grad_clip, seed=args.seed, eval_every=args.eval_every,
        schedule="noam" if args.lr is None else "constant",
        lr=args.lr if args.lr is not None else 1e-3,
    )


def _resume_state(args, spec: ModelSpec):
    if not args.resume:
        return None
    ckpt = load_checkpoint(args.resume, expected_spec=spec)
    state = ckpt.state
    first = state.carried[0] if state.carried else None
    if first is not None and first.shape[1 if first.ndim == 3 else 0] != args.batch:
        log.warning("carried state batch differs from --batch; starting streams from zero")
        state.carried = None
    return state


def _run_training(args, spec: ModelSpec, with_acc: bool, train) -> int:
    print(f"parameters: {count_params(spec)}", file=sys.stderr if not args.dry_run else sys.stdout)
    if args.dry_run:
        return EXIT_OK
    cfg = _train_config(args)
    state = _resume_state(args, spec)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + (("train_acc",) if with_acc else ()))

        def emit(m):
            w.writerow(m.row(with_acc))
            fh.flush()

        try:
            state = train(spec, cfg, state, emit)
        except NonFiniteError as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_FAIL
    if args.checkpoint:
        save_checkpoint(args.checkpoint, state, args.seed)
    return EXIT_OK


def cmd_train_lm(args) -> int:
    corpus = load_corpus(args.corpus)
    kind = "lstm_char_lm" if args.arch == "lstm" else "char_lm"
    spec = _spec_from_args(args, kind, corpus.vocab_size, LM_HIGHWAY_BIAS)

    def train(spec, cfg, state, emit):
        return train_char_lm(corpus, spec, cfg, state=state, on_metrics=emit,
                             reproducible=args.reproducible)

    return _run_training(args, spec, False, train)


def cmd_train_clf(args) -> int:
    spec = _spec_from_args(args, "classifier", args.vocab, 0.0)
    rng = SeededRng(args.seed)
    if not args.dry_run:
        data = synthetic_presence_task(args.examples, rng, vocab_size=args.vocab,
                                       min_len=args.min_len, max_len=args.max_len)

    def train(spec, cfg, state, emit):
        return train_classifier(data, spec, cfg, state=state, on_metrics=emit,
                                reproducible=args.reproducible)

    return _run_training(args, spec, True, train)


def cmd_bench(args) -> int:
    with _output(args.out) as fh:
        if args.gnuplot:
            records = bench.run_sweep(args.L, args.d, args.B, args.arch, args.passes,
                                      args.reps, seed=args.seed)
            fh.write(bench.records_to_gnuplot(records) + "\n")
            return EXIT_OK
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(bench.CSV_HEADER)

        def emit(rec):
            w.writerow(rec.row())
            fh.flush()

        bench.run_sweep(args.L, args.d, args.B, args.arch, args.passes, args.reps,
                        seed=args.seed, on_record=emit)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(args.preset, args.seed, fault=args.inject_fault)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_probe_variance(args) -> int:
    profile = variance_ratio_probe(args.depth, args.d, args.mode, SeededRng(args.seed),
                                   highway_bias=args.highway_bias,
                                   use_scaling_correction=not args.no_alpha)
    with _output(args.out) as fh:
        fh.write(profile.to_csv())
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    try:
        with open(args.path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {args.path!r}: {exc.strerror}") from exc
    header, _ = read_header(data)
    ckpt = decode_checkpoint(data)
    summary = {
        "step": ckpt.step,
        "rng_seed": ckpt.seed,
        "model_spec": header["model_spec"],
        "parameters": count_params(ckpt.spec),
        "tensors": len(header.get("tensors", [])),
        "bytes": len(data),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train-lm": cmd_train_lm,
    "train-clf": cmd_train_clf,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "probe-variance": cmd_probe_variance,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SruError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
