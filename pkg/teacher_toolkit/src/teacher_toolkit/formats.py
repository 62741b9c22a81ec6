"""The file formats shared with the student pipeline.

- dataset TSV: ``id TAB tokens TAB intent TAB BIO-tags`` (space-separated
  tokens/tags, equal counts)
- unlabeled query TSV: ``id TAB tokens``
- schema JSON: ``{"intents": [...], "slot_types": [...]}``, file order =
  index order, BIO labels derived as O, B-t1, I-t1, B-t2, ...
- teacher logits JSONL: one object per example with ``id``, ``tokens``,
  ``intent_logits`` ([I] floats) and ``slot_logits`` ([T x A] floats)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


class FormatError(ValueError):
    """A shared-format file does not parse or validate."""


@dataclass
class Query:
    id: str
    tokens: list
    intent: str | None = None
    slots: list | None = None


@dataclass
class Schema:
    intents: list
    slot_types: list

    @property
    def arg_labels(self) -> list:
        labels = ["O"]
        for t in self.slot_types:
            labels += [f"B-{t}", f"I-{t}"]
        return labels

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    @property
    def num_args(self) -> int:
        return 2 * len(self.slot_types) + 1

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(intents=list(obj["intents"]), slot_types=list(obj["slot_types"]))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read schema {path}: {exc}") from exc

    def save(self, path) -> None:
        obj = {"intents": self.intents, "slot_types": self.slot_types}
        Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def read_dataset(path) -> list:
    """Parse a labeled 4-column TSV into Query records."""
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        cols = line.split("\t")
        if len(cols) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
        qid, token_text, intent, slot_text = cols
        tokens, slots = token_text.split(), slot_text.split()
        if not tokens or len(tokens) != len(slots):
            raise FormatError(f"{path}:{lineno}: token/slot mismatch")
        queries.append(Query(id=qid, tokens=tokens, intent=intent, slots=slots))
    return queries


def read_queries(path) -> list:
    """Parse unlabeled queries: 2-column TSV, or plain text (one per line)."""
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) == 2:
            qid, token_text = cols
        elif len(cols) == 4:
            qid, token_text = cols[0], cols[1]
        elif len(cols) == 1:
            qid, token_text = f"q{lineno}", cols[0]
        else:
            raise FormatError(f"{path}:{lineno}: expected 1, 2, or 4 columns, got {len(cols)}")
        tokens = token_text.split()
        if not tokens:
            raise FormatError(f"{path}:{lineno}: empty query")
        queries.append(Query(id=qid, tokens=tokens))
    return queries


def write_queries(queries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(f"{q.id}\t{' '.join(q.tokens)}\n")


def write_logits(records, path) -> None:
    """records: iterable of (id, tokens, intent_logits, slot_logits)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, tokens, intent_logits, slot_logits in records:
            obj = {
                "id": qid,
                "tokens": list(tokens),
                "intent_logits": [float(v) for v in intent_logits],
                "slot_logits": [[float(v) for v in row] for row in slot_logits],
            }
            fh.write(json.dumps(obj) + "\n")


def read_logits(path) -> dict:
    records = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records[obj["id"]] = obj
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad record: {exc}") from exc
    return records
