"""
Command line: ``dtn gen|train|eval|ablate|check``.

Options may also come from a ``key = value`` file given with ``--config``;
flags on the command line win over the file, and the seed falls back to the
``DTN_SEED`` environment variable. Every command writes its resolved options
to ``OUT/<command>.config`` so the run can be repeated with
``--config OUT/<command>.config``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed check.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional


from .errors import DimensionError, DTNError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
CHECKPOINT = "model.ckpt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path: Path, command: str, values: Dict[str, object]) -> None:
    lines = [f"# resolved options for 'dtn {command}'"]
    lines += [f"{k} = {v}" for k, v in sorted(values.items()) if v is not None]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="key = value file; command-line flags win")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (default: $DTN_SEED, else 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtn", description="Deep tree network for zero-shot spoof detection")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(g, "data")
    g.add_argument("--types", type=int, default=4, help="number of spoof types")
    g.add_argument("--per-class", type=int, default=200, help="samples per class")
    g.add_argument("--hw", type=int, default=32, help="image extent")
    g.add_argument("--mask-hw", type=int, default=8, help="mask extent")
    g.add_argument("--difficulty", type=float, default=0.5)

    t = sub.add_parser("train", help="train under a leave-one-out protocol")
    _common(t, "run")
    t.add_argument("--data", default="data", help="dataset directory")
    t.add_argument("--holdout", default="type0", help="held-out spoof type")
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--epochs", type=int, default=15)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--tru-lr", type=float, default=0.01)
    t.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    t.add_argument("--routing", default="proposed", choices=("proposed", "mpt"))
    t.add_argument("--tree-data", default="spoof", choices=("spoof", "all"))
    t.add_argument("--no-unique", action="store_true", help="drop the unique loss")
    t.add_argument("--precision", type=int, default=64, choices=(32, 64))
    t.add_argument("--live-fraction", type=float, default=0.8)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _common(e, "run")
    e.add_argument("--data", default="data")
    e.add_argument("--checkpoint", help="checkpoint file (default OUT/model.ckpt)")
    e.add_argument("--holdout", help="held-out type (default: from the checkpoint)")
    e.add_argument("--fusion", default="avg", choices=("map", "score", "max", "avg"))
    e.add_argument("--threshold-mode", default="fixed", choices=("fixed", "eer"))

    a = sub.add_parser("ablate", help="routing and loss ablations")
    _common(a, "run")
    a.add_argument("--data", default="data")
    a.add_argument("--checkpoint", help="checkpoint for routing ablations (default OUT/model.ckpt)")
    a.add_argument("--holdout", help="held-out type (default: from the checkpoint)")
    a.add_argument("--kind", default="routing", choices=("routing", "loss", "all"))
    a.add_argument("--fusion", default="avg", choices=("map", "score", "max", "avg"))
    a.add_argument("--epochs", type=int, default=15, help="training epochs for loss ablations")
    a.add_argument("--budget", type=float, help="seconds allowed for loss-ablation training")

    c = sub.add_parser("check", help="gradient, eigen-oracle and partition self-checks")
    _common(c, "run")
    c.add_argument("--precision", type=int, default=64, choices=(32, 64))
    c.add_argument("--quick", action="store_true", help="fewer seeds and matrices")
    return parser


def _flag(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def resolve(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    """Parse ``argv``, then fill anything not given on the command line from the config file."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: gen, train, eval, ablate or check")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    # a second parse with every default suppressed tells which flags were typed
    saved = {a.dest: a.default for a in actions.values()}
    try:
        for a in actions.values():
            a.default = argparse.SUPPRESS
        given = set(vars(sub.parse_args(argv[1:] if argv and argv[0] == args.command else argv)))
    finally:
        for a in actions.values():
            a.default = saved[a.dest]
    if args.config:
        for key, raw in read_config(args.config).items():
            if key == "command":
                continue
            if key not in actions:
                raise UsageError(f"unknown option {key!r} in {args.config}")
            if key in given:
                continue
            act = actions[key]
            convert = _flag if isinstance(act, argparse._StoreTrueAction) else act.type
            try:
                value = convert(raw) if convert is not None else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"bad value for {key}: {e}") from None
            if act.choices is not None and value not in act.choices:
                raise UsageError(f"{key} must be one of {list(act.choices)}")
            setattr(args, key, value)
    if args.seed is None:
        env = os.environ.get("DTN_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"DTN_SEED must be an integer, got {env!r}") from None
    return args


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from None
    return out


def _snapshot(args, out: Path) -> None:
    values = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    write_config(out / f"{args.command}.config", args.command, values)


def _load_data(path):
    from .datagen import load
    return load(path)


def cmd_gen(args) -> int:
    from .datagen import GenConfig, generate, save

    cfg = GenConfig(hw=args.hw, n_types=args.types, per_class=args.per_class, seed=args.seed,
                    mask_hw=args.mask_hw, difficulty=args.difficulty)
    out = _out(args)
    data = generate(cfg)
    try:
        save(data, out)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {out}: {e}") from None
    _snapshot(args, out)
    for name, count in data.counts().items():
        print(f"{name}\t{count}")
    return EXIT_OK


def _tree_config(args, data):
    from .tree import TreeConfig
    return TreeConfig(depth=args.depth, input_hw=data.hw, mask_hw=data.mask_hw,
                      routing_kind=args.routing, dtype=f"float{args.precision}")


def _train_config(args):
    from .trainer import TrainConfig
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       seed=args.seed, optimizer=args.optimizer, tru_learning_rate=args.tru_lr,
                       tree_data=args.tree_data, unique_loss=not args.no_unique)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .datagen import build_protocol
    from .trainer import fit

    data = _load_data(args.data)
    protocol = build_protocol(data, args.holdout, args.live_fraction, args.seed)
    tree_config = _tree_config(args, data)
    train_config = _train_config(args)
    out = _out(args)
    _snapshot(args, out)
    t0 = time.perf_counter()
    with open(out / "train.log", "w", encoding="utf-8") as log:
        res = fit(data, protocol, train_config, tree_config, log=log)
    extra = {"holdout": args.holdout, "live_fraction": args.live_fraction, "protocol_seed": args.seed}
    path = save_checkpoint(out / CHECKPOINT, res.tree, train_config.to_dict(), res.trainer, extra)
    print(f"trained {len(res.records)} steps in {time.perf_counter() - t0:.1f}s -> {path}")
    return EXIT_OK


def _restore(args):
    from .checkpoint import load_checkpoint
    from .datagen import build_protocol

    ckpt = load_checkpoint(args.checkpoint or Path(args.out) / CHECKPOINT)
    data = _load_data(args.data)
    cfg = ckpt.tree.config
    if data.hw != cfg.input_hw or data.mask_hw != cfg.mask_hw:
        raise DimensionError(f"checkpoint expects {cfg.input_hw}px images with {cfg.mask_hw}px masks, "
                             f"data has {data.hw}/{data.mask_hw}")
    holdout = args.holdout or ckpt.extra.get("holdout")
    if holdout is None:
        raise UsageError("no held-out type given and none recorded in the checkpoint")
    protocol = build_protocol(data, holdout, ckpt.extra.get("live_fraction", 0.8),
                              ckpt.extra.get("protocol_seed", args.seed))
    return ckpt, data, protocol


def cmd_eval(args) -> int:
    from .evalkit import (fixed_threshold_from_train, occupancy_by_type, build_report,
                          score_tree)
    from .datagen import LIVE

    ckpt, data, protocol = _restore(args)
    tree = ckpt.tree
    train_samples = None
    if args.threshold_mode == "eer":
        train_samples = score_tree(tree, data.subset(protocol.train_ids)).samples(args.fusion)
    threshold = fixed_threshold_from_train(train_samples, args.threshold_mode)
    test = data.subset(protocol.test_ids)
    scores = score_tree(tree, test)
    routing = occupancy_by_type(scores.leaf_of, scores.types, [LIVE] + list(test.type_names),
                                tree.config.n_leaves)
    report = build_report(scores, threshold, args.fusion, args.threshold_mode, routing,
                          f"held out {protocol.held_out_type}")
    out = _out(args)
    _snapshot(args, out)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.kv").write_text(report.to_kv(), encoding="utf-8")
    (out / "routing.tsv").write_text(routing.to_tsv(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .ablation import loss_ablation, routing_ablation

    ckpt, data, protocol = _restore(args)
    out = _out(args)
    _snapshot(args, out)
    texts, tsvs = [], []
    if args.kind in ("routing", "all"):
        t = routing_ablation(ckpt.tree, data.subset(protocol.test_ids), strategy=args.fusion,
                             seed=args.seed, label=f"(held out {protocol.held_out_type})")
        texts.append(t.to_text())
        tsvs.append(t.to_tsv())
    if args.kind in ("loss", "all"):
        from .trainer import TrainConfig
        tc = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig()
        tc = replace(tc, epochs=args.epochs)
        with open(out / "ablate.log", "w", encoding="utf-8") as log:
            t, _ = loss_ablation(data, protocol, tc, ckpt.tree.config, strategy=args.fusion,
                                 budget_s=args.budget, log=log)
        texts.append(t.to_text())
        tsvs.append(t.to_tsv())
        for note in t.notes:
            print(f"warning: {note}", file=sys.stderr)
    (out / "ablation.txt").write_text("\n".join(texts), encoding="utf-8")
    (out / "ablation.tsv").write_text("\n".join(tsvs), encoding="utf-8")
    sys.stdout.write("\n".join(texts))
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_all

    out = _out(args)
    _snapshot(args, out)
    results = run_all(args.precision, args.quick)
    lines = [r.to_line() for r in results]
    (out / "check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "check": cmd_check}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = resolve(parser, argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"dtn: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DTNError, OSError) as e:
        print(f"dtn: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
