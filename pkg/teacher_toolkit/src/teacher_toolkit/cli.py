"""CLI: finetune / export / paraphrase."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .formats import FormatError, read_dataset, read_queries, write_logits, write_queries
from .paraphrase import load_synonyms, pseudo_paraphrase
from .teacher import Teacher, TeacherConfig, exact_match, export_logits, finetune_teacher


def cmd_finetune(args) -> int:
    config = TeacherConfig(
        pretrained=args.pretrained,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    teacher = finetune_teacher(args.data, args.schema, config, dev_path=args.dev)
    teacher.save(args.out_dir)
    summary = {"command": "finetune", "out_dir": args.out_dir}
    summary["train_exact_match"] = exact_match(teacher, read_dataset(args.data))
    if args.dev:
        summary["dev_exact_match"] = exact_match(teacher, read_dataset(args.dev))
    print(json.dumps(summary))
    return 0


def cmd_export(args) -> int:
    teacher = Teacher.load(args.teacher)
    queries = []
    for path in args.data:
        queries.extend(read_dataset(path) if not args.unlabeled else read_queries(path))
    records = export_logits(teacher, queries)
    write_logits(records, args.out)
    print(json.dumps({"command": "export", "records": len(records), "out": args.out}))
    return 0


def cmd_paraphrase(args) -> int:
    queries = read_queries(args.data)
    synonyms = load_synonyms(args.vocab) if args.vocab else {}
    out = pseudo_paraphrase(queries, seed=args.seed, factor=args.factor, synonyms=synonyms)
    write_queries(out, args.out)
    print(json.dumps({"command": "paraphrase", "queries": len(out), "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teacher-toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="fine-tune the joint teacher on a labeled TSV")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--dev")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--pretrained", default="scratch-small")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=32)
    p.add_argument("--max-seq-len", type=int, dest="max_seq_len", default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("export", help="write teacher logits JSONL for queries")
    p.add_argument("--teacher", required=True, help="directory written by finetune")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--unlabeled", action="store_true", help="inputs are 2-column or plain-text query files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("paraphrase", help="deterministic lexical perturbation of queries")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", help="grammar vocab JSON holding the synonym table")
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_paraphrase)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
