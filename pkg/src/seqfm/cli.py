"""Command-line entry point: train, evaluate, predict, gradcheck, gridsearch, synth.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck as gc
from . import synth
from .checkpoint import CheckpointError, load_checkpoint
from .evaluation import MetricError, evaluate
from .featurestore import (
    FormatError,
    ParseError,
    SamplingError,
    SplitDataset,
    ingest_events,
    leave_one_out_split,
    make_instance,
)
from .model import HyperConfig, PlainFM, SeqFM
from .numerics import Rng, sigmoid
from .tasks import FULL_GRID, NumericFailure, TrainConfig, TrainingError, grid_search, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("seqfm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# parser


def _data_flags(p):
    p.add_argument("--data", help="tab-separated event file")
    p.add_argument("--user-features", help="optional user side-feature file")
    p.add_argument("--object-features", help="optional object side-feature file")
    p.add_argument("--min-count", type=int, default=10, help="min distinct interactions per user and object")


def _train_flags(p):
    p.add_argument("--task", choices=("ranking", "classification", "regression"))
    _data_flags(p)
    p.add_argument("--model", choices=("seqfm", "plain_fm"), default="seqfm")
    p.add_argument("--d", type=int, default=64, help="embedding dimension")
    p.add_argument("--layers", type=int, default=1, help="residual FFN depth")
    p.add_argument("--seq-len", type=int, default=20, help="max dynamic sequence length")
    p.add_argument("--keep-prob", type=float, default=0.6, help="dropout keep probability")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--negatives", type=int, default=5, help="sampled negatives per positive")
    p.add_argument("--epochs", type=int, default=200, help="max epochs")
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--eval-candidates", type=int, default=100, help="ranking candidates during validation")
    p.add_argument("--workers", type=int, default=1)
    for view in ("static", "dynamic", "cross"):
        p.add_argument(f"--{view}-view", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--residual", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--layernorm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--literal-padding", action="store_true", help="do not mask PAD keys")
    p.add_argument("--out", default="run", help="output directory")


def build_parser():
    parser = _Parser(prog="seqfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON or key=value file; explicit flags win")
        p.add_argument("--seed", type=int, default=0)
        subs[name] = p
        return p

    _train_flags(add("train", "train a model and write checkpoint, report and effective config"))

    p = add("evaluate", "evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=("ranking", "classification", "regression"))
    _data_flags(p)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--J", type=int, default=1000, help="sampled ranking candidates per case")
    p.add_argument("--K", default="5,10,20", help="comma-separated cutoffs")
    p.add_argument("--json", action="store_true", help="emit JSON instead of key=value")
    p.add_argument("--no-timing", action="store_true", help="omit wall time from the report")

    p = add("predict", "score user/object pairs given each user's full history")
    p.add_argument("--checkpoint")
    _data_flags(p)
    p.add_argument("--pairs", help="file of user_id<TAB>object_id lines")
    p.add_argument("--task", choices=("ranking", "classification", "regression"), default="ranking")
    p.add_argument("--out", help="output file (default stdout)")

    p = add("gradcheck", "compare analytic and finite-difference gradients")
    p.add_argument("--seeds", type=int, default=20, help="number of random configurations")
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)

    p = add("gridsearch", "train over a hyperparameter grid and keep the best point")
    _train_flags(p)
    p.add_argument("--grid-d", help="comma-separated values")
    p.add_argument("--grid-layers")
    p.add_argument("--grid-seq-len")
    p.add_argument("--grid-keep-prob")
    p.add_argument("--full-grid", action="store_true", help="the full 5x5x5x5 reference grid")

    p = add("synth", "write a synthetic event file")
    p.add_argument("--generator", choices=synth.GENERATORS)
    p.add_argument("--out", help="output event file")
    p.add_argument("--users", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--events", type=int, help="events per user")
    p.add_argument("--period", type=int, help="markov-last-item class pattern period (0 = independent)")
    return parser, subs


def _read_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError:
        cfg = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                cfg[k] = json.loads(v)
            except json.JSONDecodeError:
                cfg[k] = v
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be an object")
    return {k.lstrip("-").replace("-", "_"): v for k, v in cfg.items() if k != "resolved"}


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a command is required")
    if getattr(args, "config", None):
        sp = subs[args.command]
        try:
            values = _read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        dests = {a.dest for a in sp._actions} - {"help", "config"}
        unknown = sorted(set(values) - dests - {"command", "usage"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.pop("command", None)
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    args.usage = subs[args.command].format_usage()
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required {flags}")


# ---------------------------------------------------------------------------
# helpers


def train_config(args) -> TrainConfig:
    hyper = HyperConfig(
        d=args.d,
        l=args.layers,
        n_dyn_max=args.seq_len,
        keep_prob=args.keep_prob,
        use_static_view=args.static_view,
        use_dynamic_view=args.dynamic_view,
        use_cross_view=args.cross_view,
        use_residual=args.residual,
        use_layernorm=args.layernorm,
        literal_padding=args.literal_padding,
    )
    return TrainConfig(
        task=args.task,
        hyper=hyper,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        negatives_per_positive=args.negatives,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        eval_candidates=args.eval_candidates,
        workers=args.workers,
        model=args.model,
    )


def load_dataset(args) -> SplitDataset:
    space, histories, side = ingest_events(args.data, args.min_count, args.user_features, args.object_features)
    return leave_one_out_split(histories, space, side=side)


def _effective(args, extra: dict) -> dict:
    flat = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "usage")}
    flat["resolved"] = extra
    return flat


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(path):
    params, cfg, space = load_checkpoint(path)
    cls = PlainFM if type(params).__name__ == "PlainFmParams" else SeqFM
    return cls(params, cfg, space)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    _require(args, "task", "data")
    cfg = train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective-config.json", _effective(args, cfg.to_dict()))
    dataset = load_dataset(args)
    _, report = train(dataset, cfg, out / "model.ckpt")
    _write_json(out / "train-report.json", report.to_dict())
    print(f"best_epoch={report.best_epoch}")
    print(f"best_{report.metric_name}={report.best_metric:.6f}")
    print(f"checkpoint={out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "checkpoint", "task", "data")
    try:
        ks = tuple(int(k) for k in args.K.split(","))
    except ValueError:
        raise UsageError(f"--K must be comma-separated integers, got {args.K!r}") from None
    model = _load_model(args.checkpoint)
    dataset = load_dataset(args)
    if dataset.space.to_dict() != model.space.to_dict():
        raise CheckpointError("feature space of the data does not match the checkpoint")
    insts = dataset.test if args.split == "test" else dataset.validation
    report = evaluate(
        model, insts, args.task, dataset.visited, Rng(args.seed).stream("evaluate"),
        J=args.J, ks=ks, side=dataset.side,
    )
    timing = not args.no_timing
    sys.stdout.write((report.to_json(timing) + "\n") if args.json else report.to_text(timing))
    return EXIT_OK


def cmd_predict(args) -> int:
    _require(args, "checkpoint", "data", "pairs")
    model = _load_model(args.checkpoint)
    space, histories, side = ingest_events(args.data, args.min_count, args.user_features, args.object_features)
    if space.to_dict() != model.space.to_dict():
        raise CheckpointError("feature space of the data does not match the checkpoint")
    seqs = {h.user_id: [e[0] for e in h.events] for h in histories}
    keys, insts = [], []
    for n, line in enumerate(Path(args.pairs).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ParseError("expected user_id<TAB>object_id", n)
        u, o = parts
        if u not in space.user_index or o not in space.object_index:
            raise ParseError(f"unknown user or object: {u!r}, {o!r}", n)
        uid, oid = space.user_index[u], space.object_index[o]
        keys.append((u, o))
        insts.append(make_instance(space, uid, oid, seqs.get(uid, ()), 0.0, 0, side))
    scores = model.score(insts) if insts else []
    if args.task == "classification":
        scores = sigmoid(scores)
    lines = [f"{u}\t{o}\t{s:.6f}\n" for (u, o), s in zip(keys, scores)]
    if args.out:
        Path(args.out).write_text("".join(lines), encoding="utf-8")
    else:
        sys.stdout.writelines(lines)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    results = [gc.check_config(args.seed + s, corrupt=args.corrupt_backward) for s in range(args.seeds)]
    worst = max(results, key=lambda r: r.max_rel_err)
    print(f"configurations={len(results)}")
    print(f"max_rel_err={worst.max_rel_err:.3e}")
    if worst.max_rel_err < gc.THRESHOLD:
        print(f"max rel err < {gc.THRESHOLD:g}")
        return EXIT_OK
    print(
        f"FAILED: {worst.worst_tensor} exceeds {gc.THRESHOLD:g} (seed {worst.seed})",
        file=sys.stderr,
    )
    return EXIT_NUMERIC


def _csv(text, cast):
    return [cast(v) for v in text.split(",")] if text else None


def cmd_gridsearch(args) -> int:
    _require(args, "task", "data")
    base = train_config(args)
    if args.full_grid:
        grids = dict(FULL_GRID)
    else:
        try:
            grids = {
                "d": _csv(args.grid_d, int),
                "l": _csv(args.grid_layers, int),
                "n_dyn_max": _csv(args.grid_seq_len, int),
                "keep_prob": _csv(args.grid_keep_prob, float),
            }
        except ValueError as exc:
            raise UsageError(f"bad grid value: {exc}") from None
        grids = {k: v for k, v in grids.items() if v}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args)
    best, rows = grid_search(dataset, base, grids, out)
    _write_json(out / "effective-config.json", _effective(args, {"base": base.to_dict(), "grids": grids}))
    _write_json(
        out / "grid-report.json",
        {
            "best": best.to_dict(),
            "rows": [
                {"point": r.point, "hyper": r.hyper and r.hyper.to_dict(), "metric": r.metric, "error": r.error}
                for r in rows
            ],
        },
    )
    h = best.hyper
    print(f"best d={h.d} layers={h.l} seq_len={h.n_dyn_max} keep_prob={h.keep_prob}")
    return EXIT_OK


def cmd_synth(args) -> int:
    _require(args, "generator", "out")
    kw = {k: getattr(args, k) for k in ("users", "objects", "events") if getattr(args, k) is not None}
    if args.period is not None:
        if args.generator != "markov-last-item":
            raise UsageError("--period applies only to markov-last-item")
        kw["period"] = args.period
    rows = synth.generate(args.generator, seed=args.seed, **kw)
    synth.write_events(rows, args.out)
    print(f"wrote {len(rows)} events to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "gridsearch": cmd_gridsearch,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"seqfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(args.usage)
        print(f"seqfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"seqfm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # data-layer errors subclass ValueError; anything else is a bad flag value
        if isinstance(exc, (ParseError, FormatError, SamplingError, CheckpointError, MetricError)):
            print(f"seqfm: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"seqfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError) as exc:
        print(f"seqfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
