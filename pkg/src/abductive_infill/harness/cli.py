"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import config as cfgmod
from ..data import load_jsonl, load_vocab
from ..errors import AbductiveError
from ..metrics import evaluate_corpus
from . import pipeline
from .audit import oracle_audit
from .reporting import failure_report, markdown_table, merge_reports, write_report
from .runs import run_experiment

log = logging.getLogger("abductive_infill")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (flat key = value; defaults always apply first)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> Parser:
    parser = Parser(prog="abductive", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fine-tune a model variant")
    _common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl / dev.jsonl")
    p.add_argument("--variant", choices=("base", "knowledge_text", "knowledge_emb", "story"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="generate hypotheses")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL file of instances")
    p.add_argument("--strategy", choices=("greedy", "beam", "top_p", "delorean", "cold"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.add_argument("--trace", help="write per-iteration decoder traces here (JSONL)")
    p.add_argument("--limit", type=int, default=0)

    p = sub.add_parser("eval", help="score predictions")
    _common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True, help="JSONL file of instances with gold hypotheses")
    p.add_argument("--vocab", help="vocab.json for the embedding encoder (default: next to --data)")
    p.add_argument("--name", help="row name in the report")
    p.add_argument("--out", required=True, help="directory for report.json / report.md")

    p = sub.add_parser("report", help="merge run reports into one table")
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--out", help="write the markdown table here instead of stdout")

    p = sub.add_parser("failures", help="dump the lowest-scoring cases")
    _common(p)
    p.add_argument("--predictions", required=True, nargs="+", help="one or more predictions JSONL files")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--metric", choices=("bleu4", "meteor", "rouge_l", "cider", "embed_score"))
    p.add_argument("--out")

    p = sub.add_parser("oracle-check", help="audit unsupervised decoders against brute force")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--subset-size", type=int, default=12)
    p.add_argument("--max-len", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("run", help="run a full experiment from a config file")
    _common(p)
    p.add_argument("--out", required=True)
    return parser


def _cfg(args) -> dict:
    return cfgmod.resolve(args.config, cfgmod.parse_overrides(args.set))


def _group_predictions(rows: list[dict]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for r in rows:
        out.setdefault(r.get("strategy", "?"), {})[r["id"]] = r["hypothesis"]
    return out


def cmd_synth(args) -> None:
    cfg = _cfg(args)
    seed = args.seed if args.seed is not None else cfg["synth.seed"]
    size = args.size if args.size is not None else cfg["synth.size"]
    paths = pipeline.synth_to_dir(seed, size, args.out, pipeline.provider_from_config(cfg))
    for p in paths.values():
        print(p)


def cmd_train(args) -> None:
    cfg = _cfg(args)
    res = pipeline.train_from_config(cfg, args.data, args.out, args.variant)
    epoch, split, loss = res.curve[-1]
    print(f"{Path(args.out) / 'model.npz'} (epoch {epoch}, {split} loss {loss:.4f})")


def cmd_decode(args) -> None:
    cfg = _cfg(args)
    model = pipeline.LoadedModel(args.checkpoint, cfg)
    dcfg = pipeline.decode_config(cfg, strategy=args.strategy, seed=args.seed)
    instances = load_jsonl(args.data)
    if args.limit:
        instances = instances[: args.limit]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_fh = open(args.trace, "w", encoding="utf-8", newline="\n") if args.trace else None
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for inst in instances:
                res = model.decode(inst, dcfg)
                fh.write(json.dumps(pipeline.prediction_record(inst.id, res, dcfg.strategy, model.variant)) + "\n")
                if trace_fh:
                    for rec in res.trace:
                        trace_fh.write(json.dumps({"id": inst.id, **rec}) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()
    print(out)


def cmd_eval(args) -> None:
    cfg = _cfg(args)
    instances = load_jsonl(args.data)
    preds = pipeline.read_predictions(args.predictions)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.data).parent / "vocab.json"
    vocab = load_vocab(vocab_path) if vocab_path.exists() else None
    encoder = pipeline.eval_encoder(cfg, vocab)
    rows = []
    for label, by_id in _group_predictions(preds).items():
        hyps = [by_id.get(inst.id, "") for inst in instances]
        rep = evaluate_corpus(hyps, instances, encoder)
        name = args.name or label
        rows.append({"name": name, "strategy": label, **rep.as_dict()})
    js, md = write_report(rows, args.out)
    print(md.read_text(encoding="utf-8"), end="")


def cmd_report(args) -> None:
    table = markdown_table(merge_reports(args.runs))
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")


def cmd_failures(args) -> None:
    cfg = _cfg(args)
    instances = load_jsonl(args.data)
    preds: dict[str, list[str]] = {}
    for path in args.predictions:
        for label, by_id in _group_predictions(pipeline.read_predictions(path)).items():
            name = label if label not in preds else f"{Path(path).stem}:{label}"
            preds[name] = [by_id.get(inst.id, "") for inst in instances]
    md = failure_report(preds, instances, args.n or cfg["failures.n"], args.metric or cfg["failures.metric"])
    if args.out:
        Path(args.out).write_text(md, encoding="utf-8")
    print(md, end="")


def cmd_oracle_check(args) -> None:
    cfg = _cfg(args)
    model = pipeline.LoadedModel(args.checkpoint, cfg)
    instances = load_jsonl(args.data)[: args.n]
    result = oracle_audit(model.params, model.vocab, instances, pipeline.decode_config(cfg),
                          args.subset_size, args.max_len, args.seed)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(json.dumps(result["summary"], indent=2, sort_keys=True))


def cmd_run(args) -> None:
    out = run_experiment(args.config, args.out, cfgmod.parse_overrides(args.set))
    print((out / "report.md").read_text(encoding="utf-8"), end="")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
    "report": cmd_report, "failures": cmd_failures, "oracle-check": cmd_oracle_check, "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (AbductiveError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
