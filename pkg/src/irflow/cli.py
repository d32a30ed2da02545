"""Command-line entry point: ``irflow <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("irflow")

DEFAULT_SEED = 0


def _read_graphs(paths, limit_bb: int, limit_var: int):
    from .graph import FlowGraph, graph_from_ir

    graphs = []
    for p in paths:
        p = Path(p)
        if p.suffix == ".json":
            graphs.append(FlowGraph.load(p))
        else:
            graphs.append(graph_from_ir(p.read_text(), limit_bb, limit_var))
    return graphs


def _read_labels(path, n: int) -> list[str]:
    labels = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if len(labels) != n:
        raise ValueError(f"{path}: {len(labels)} labels for {n} programs")
    return labels


def _write_json(obj, out) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_build_graph(args) -> int:
    from .graph import graph_from_ir, to_dot

    g = graph_from_ir(Path(args.input).read_text(), args.limit_bb, args.limit_var)
    if args.out:
        g.save(args.out)
    else:
        print(g.to_json())
    if args.dot:
        Path(args.dot).write_text(to_dot(g))
    return 0


def cmd_emit_dot(args) -> int:
    from .graph import FlowGraph, to_dot

    dot = to_dot(FlowGraph.load(args.input))
    if args.out:
        Path(args.out).write_text(dot)
    else:
        print(dot, end="")
    return 0


def cmd_train_tokenizer(args) -> int:
    from .tokenizer import train_bpe

    graphs = _read_graphs(args.inputs, args.limit_bb, args.limit_var)
    tok = train_bpe([n.text for g in graphs for n in g.bb_nodes], args.vocab_size)
    tok.save(args.out)
    log.info("tokenizer with %d entries written to %s", tok.vocab_size, args.out)
    return 0


def _train_config(args):
    from .pretrain import TrainConfig, parse_kv

    overrides = parse_kv("\n".join(args.set or []))
    overrides.setdefault("seed", str(args.seed))
    overrides.setdefault("threads", str(args.threads))
    overrides.setdefault("max_bb", str(args.limit_bb))
    overrides.setdefault("max_var", str(args.limit_var))
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig().updated(overrides)


def cmd_pretrain(args) -> int:
    from .pretrain import load_checkpoint, pretrain_loop, save_checkpoint
    from .tokenizer import Tokenizer

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume)
        tc, tok = state.train_config, state.tokenizer
    else:
        state, tc = None, _train_config(args)
        tok = Tokenizer.load(args.tokenizer)
    log.info("effective config: %s", " ".join(tc.to_text().split()))
    graphs = _read_graphs(args.inputs, tc.max_bb, tc.max_var)
    state = pretrain_loop(graphs, tok, tc, state=state, metrics_path=out / "metrics.jsonl",
                          checkpoint_dir=out)
    save_checkpoint(out / "final.ckpt", state)
    log.info("finished at step %d", state.step)
    return 0


def cmd_embed(args) -> int:
    from .pretrain import load_checkpoint
    from .tasks import embed_corpus

    state = load_checkpoint(args.checkpoint)
    cfg = state.model_config
    graphs = _read_graphs(args.inputs, cfg.max_bb, cfg.max_var)
    labels = _read_labels(args.labels, len(graphs)) if args.labels else None
    ids = [Path(p).stem for p in args.inputs]
    corpus = embed_corpus(graphs, state, ids, labels)
    if not args.out:
        raise ValueError("embed needs --out")
    corpus.to_jsonl(args.out)
    log.info("%d embeddings written to %s", len(corpus), args.out)
    return 0


def cmd_retrieve(args) -> int:
    from .tasks import EmbeddingCorpus, map_at_r

    corpus = EmbeddingCorpus.from_jsonl(args.input)
    score = map_at_r(corpus, None, args.R)
    _write_json({"map_at_r": score, "R": args.R}, args.out)
    return 0


def cmd_classify(args) -> int:
    from .pretrain import load_checkpoint
    from .tasks import finetune_classifier

    state = load_checkpoint(args.checkpoint)
    cfg = state.model_config
    train = _read_graphs(args.train, cfg.max_bb, cfg.max_var)
    y_train = _read_labels(args.train_labels, len(train))
    valid = _read_graphs(args.valid, cfg.max_bb, cfg.max_var) if args.valid else None
    y_valid = _read_labels(args.valid_labels, len(valid)) if args.valid else None
    classes = sorted(set(y_train) | set(y_valid or []), key=lambda s: (len(s), s))
    num_classes = args.num_classes or len(classes)
    try:
        to_idx = [int(s) for s in classes]
        index = dict(zip(classes, to_idx))
    except ValueError:
        index = {c: i for i, c in enumerate(classes)}
    res = finetune_classifier(
        train, [index[s] for s in y_train], state, num_classes,
        valid_graphs=valid, valid_labels=None if valid is None else [index[s] for s in y_valid],
        steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
    )
    _write_json({"error_rate": res.error_rate}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, eps=args.eps)
    worst = max(report.errors, key=report.errors.get)
    print(f"max relative error {report.max_error:.3e} ({worst}) over {report.n_entries} "
          f"entries in {report.seconds:.1f}s")
    return 0 if report.passed(args.tol) else 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value training config file")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--limit-bb", type=int, default=64, help="max basic blocks per program")
    common.add_argument("--limit-var", type=int, default=256, help="max variables per program")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="irflow", description="Flow-typed IR program encoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", parents=[common], help="IR file to graph JSON")
    p.add_argument("input")
    p.add_argument("--dot", help="also write a DOT rendering")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("emit-dot", parents=[common], help="graph JSON to DOT")
    p.add_argument("input")
    p.set_defaults(func=cmd_emit_dot)

    p = sub.add_parser("train-tokenizer", parents=[common], help="train BPE on IR/graph files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--vocab-size", type=int, default=2048)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--tokenizer")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", parents=[common], help="program vectors as JSON lines")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", help="file with one label per input")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("retrieve", parents=[common], help="MAP@R of an embeddings file")
    p.add_argument("input")
    p.add_argument("-R", "--R", type=int, default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("classify", parents=[common], help="fine-tune and report error rate")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--valid", nargs="+")
    p.add_argument("--valid-labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "classify" and bool(args.valid) != bool(args.valid_labels):
        parser.error("--valid and --valid-labels go together")
    log.info("%s seed=%d threads=%d", args.command, args.seed, args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"irflow: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
