"""Command-line entry points for the experiment pipeline."""

from __future__ import annotations

import os

# single-threaded BLAS keeps end-to-end runs bit-reproducible; must be set
# before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys

from . import harness, planner, splits as sp, world


def _parse_set(expr):
    key, _, raw = expr.partition("=")
    if not _:
        raise argparse.ArgumentTypeError(f"--set needs key=value, got {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides=()):
    data = {}
    if path:
        with open(path) as f:
            data = json.load(f)
    for key, value in overrides:
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return harness.config_from_dict(data)


def _add_common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--set", dest="sets", action="append", type=_parse_set,
                   default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted keys for nesting)")


def _vocab_for(config, items, split):
    train = set(split.train)
    tokens = [r.tokens for item in items if item.scene.id in train
              for r in item.references]
    return planner.build_vocabulary(tokens, harness.enabled_tagsets(config))


def cmd_gen_data(args):
    config = load_config(args.config, args.sets)
    items = world.make_corpus(config.n_scenes, config.world_seed,
                              config.world, n_refs=config.n_refs)
    world.write_corpus(items, args.out)
    print(f"wrote {len(items)} scenes to {args.out}")


def cmd_build_splits(args):
    config = load_config(args.config, args.sets)
    items = world.read_corpus(args.corpus)
    spec = sp.SplitSpec(active_set=args.set_idx)
    split = sp.build_splits(items, spec, config.ratios, config.split_seed)
    sp.write_split(split, args.out)
    print(f"train/val/test = {len(split.train)}/{len(split.val)}/"
          f"{len(split.test)}; warnings: {len(split.warnings)}")


def _cell(args):
    return harness.Cell(args.set_idx, args.approach, args.tagset, args.seed)


def cmd_train(args):
    config = load_config(args.config, args.sets)
    items = world.read_corpus(args.corpus)
    split = sp.read_split(args.splits)
    vocab = _vocab_for(config, items, split)
    cell = _cell(args)
    model, ranker, result = harness.train_cell(config, items, split, vocab,
                                               cell, log=print)
    harness.save_cell_checkpoint(args.out, model, ranker, result, config)
    print(f"saved {args.out} (best epoch {result.best_epoch}, "
          f"val BLEU {result.best_bleu:.2f})")


def cmd_decode(args):
    config = load_config(args.config, args.sets)
    items = world.read_corpus(args.corpus)
    split = sp.read_split(args.splits)
    vocab = _vocab_for(config, items, split)
    cell = _cell(args)
    model, ranker, _ = harness.load_cell_checkpoint(
        args.ckpt, config, vocab, items[0].features.dim, cell.seed)
    records = harness.decode_cell(config, items, split, vocab, cell, model,
                                  ranker)
    harness.write_decodes(records, args.out)
    print(f"wrote {len(records)} decode records to {args.out}")


def cmd_evaluate(args):
    config = load_config(args.config, args.sets)
    items = world.read_corpus(args.corpus)
    split = sp.read_split(args.splits)
    vocab = _vocab_for(config, items, split)
    cell = _cell(args)
    records = harness.read_decodes(args.decodes)
    model = ranker = None
    if args.ckpt:
        model, ranker, _ = harness.load_cell_checkpoint(
            args.ckpt, config, vocab, items[0].features.dim, cell.seed)
    report = harness.evaluate_cell(config, items, split, vocab, cell, records,
                                   model, ranker)
    with open(args.out, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    recall = "-" if report.mean_recall is None else f"{report.mean_recall:.4f}"
    print(f"mean R@{config.top_k} {recall}, BLEU {report.bleu:.2f}")


def cmd_experiment(args):
    config = load_config(args.config, args.sets)
    manifest = harness.run_experiment(config, args.out)
    failures = manifest.data.get("failures", 0)
    if failures:
        failed = [name for name, info in manifest.data["cells"].items()
                  if info["status"] == "failed"]
        print(f"stage cell failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"experiment complete: {len(manifest.data['cells'])} cells in "
          f"{args.out}")
    return 0


def cmd_report(args):
    harness.emit_report(args.runs, args.out)
    if args.out:
        print(f"report written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="captionplan",
        description="synthetic compositional captioning testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scene corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("build-splits", help="build a gap partition")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--set-idx", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_splits)

    def cell_parser(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--splits", required=True)
        p.add_argument("--set-idx", type=int, default=0)
        p.add_argument("--approach", default="standard")
        p.add_argument("--tagset", default="none")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)
        return p

    cell_parser("train", cmd_train, "train one cell, early stopped")
    p = cell_parser("decode", cmd_decode, "beam-decode the evaluation split")
    p.add_argument("--ckpt", required=True)
    p = cell_parser("evaluate", cmd_evaluate, "score a decode file")
    p.add_argument("--decodes", required=True)
    p.add_argument("--ckpt", help="checkpoint, enables retrieval metrics")

    p = sub.add_parser("experiment", help="run the full cell matrix")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="aggregate runs into tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"stage {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
