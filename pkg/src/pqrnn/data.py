"""Dataset ingestion, batching, teacher-logit alignment, and metrics.

The on-disk formats are deliberately small:

- dataset TSV, UTF-8, one example per line:
  ``id <TAB> space-separated tokens <TAB> intent <TAB> space-separated BIO tags``
- augmented-pool TSV: ``id <TAB> tokens`` (no labels; targets come from
  teacher logits)
- teacher logits JSONL, one object per example:
  ``{"id", "tokens", "intent_logits": [I floats], "slot_logits": [T x A floats]}``
- schema JSON: ``{"intents": [...], "slot_types": [...]}``, index = file order.

Tokenization is whitespace splitting only; text in languages that are not
space-delimited must arrive pre-segmented.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, DataError, InputError
from .projection import ProjectionConfig, fnv1a64, project_token


@dataclass
class Example:
    id: str
    tokens: list
    intent: str | None
    slots: list | None
    origin: str = "supervised"
    language: str = "en"

    def __post_init__(self):
        if self.slots is not None and len(self.slots) != len(self.tokens):
            raise DataError(
                f"example {self.id}: {len(self.slots)} slot tags for {len(self.tokens)} tokens"
            )


@dataclass
class LabelSchema:
    intents: list
    slot_types: list
    _intent_index: dict = field(init=False, repr=False)
    _arg_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.intents)) != len(self.intents) or len(set(self.slot_types)) != len(self.slot_types):
            raise DataError("schema labels must be unique")
        self._intent_index = {label: i for i, label in enumerate(self.intents)}
        self._arg_index = {label: i for i, label in enumerate(self.arg_labels)}

    @property
    def arg_labels(self) -> list:
        labels = ["O"]
        for slot_type in self.slot_types:
            labels += [f"B-{slot_type}", f"I-{slot_type}"]
        return labels

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    @property
    def num_args(self) -> int:
        return 2 * len(self.slot_types) + 1

    def intent_index(self, label: str) -> int:
        try:
            return self._intent_index[label]
        except KeyError:
            raise DataError(f"unknown intent label {label!r}") from None

    def arg_index(self, label: str) -> int:
        try:
            return self._arg_index[label]
        except KeyError:
            raise DataError(f"unknown slot label {label!r}") from None

    def to_json(self) -> dict:
        return {"intents": list(self.intents), "slot_types": list(self.slot_types)}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSchema":
        return cls(intents=list(obj["intents"]), slot_types=list(obj["slot_types"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelSchema":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read schema {path}: {exc}") from exc


@dataclass
class TeacherRecord:
    id: str
    tokens: list
    intent_logits: np.ndarray
    slot_logits: np.ndarray


def tokenize(query: str) -> list:
    """Whitespace tokenization; runs of whitespace collapse."""
    tokens = query.split()
    if not tokens:
        raise InputError(f"query {query!r} has no tokens")
    return tokens


def _validate_bio(tag: str, schema: LabelSchema | None, path, lineno: int) -> None:
    if tag == "O":
        return
    if len(tag) < 3 or tag[0] not in "BI" or tag[1] != "-":
        raise DataError(f"{path}:{lineno}: malformed BIO tag {tag!r}")
    if schema is not None and tag[2:] not in schema.slot_types:
        raise DataError(f"{path}:{lineno}: unknown slot type {tag[2:]!r}")


def load_dataset(path, schema: LabelSchema | None = None):
    """Parse a 4-column dataset TSV into (examples, schema).

    The schema is inferred in first-appearance order when not supplied,
    and validated against the data when it is.
    """
    examples = []
    seen_intents: dict = {}
    seen_types: dict = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        cols = line.split("\t")
        if len(cols) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
        ex_id, token_text, intent, slot_text = cols
        tokens = token_text.split()
        slots = slot_text.split()
        if not tokens:
            raise DataError(f"{path}:{lineno}: empty token column")
        if len(tokens) != len(slots):
            raise DataError(
                f"{path}:{lineno}: {len(slots)} slot tags for {len(tokens)} tokens"
            )
        for tag in slots:
            _validate_bio(tag, schema, path, lineno)
            if tag != "O":
                seen_types.setdefault(tag[2:], None)
        if schema is not None and intent not in schema._intent_index:
            raise DataError(f"{path}:{lineno}: unknown intent {intent!r}")
        seen_intents.setdefault(intent, None)
        examples.append(Example(id=ex_id, tokens=tokens, intent=intent, slots=slots))
    if schema is None:
        schema = LabelSchema(intents=list(seen_intents), slot_types=list(seen_types))
    return examples, schema


def write_dataset(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.id}\t{' '.join(ex.tokens)}\t{ex.intent}\t{' '.join(ex.slots)}\n")


def load_augmented(path):
    """Parse a 2-column (id, tokens) TSV of unlabeled augmented queries."""
    examples = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read augmented pool {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        cols = line.split("\t")
        if len(cols) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        ex_id, token_text = cols
        tokens = token_text.split()
        if not tokens:
            raise DataError(f"{path}:{lineno}: empty token column")
        examples.append(Example(id=ex_id, tokens=tokens, intent=None, slots=None, origin="augmented"))
    return examples


def write_augmented(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.id}\t{' '.join(ex.tokens)}\n")


ALLOWED_RATIOS = (1, 4, 8)


def merge_augmented(supervised, augmented, ratio: int, seed: int = 0, allow_any_ratio: bool = False):
    """Supervised examples plus ratio * |supervised| augmented ones.

    The augmented pool is shuffled under the seed before taking the prefix;
    a short pool is used whole with a warning.
    """
    if ratio not in ALLOWED_RATIOS and not allow_any_ratio:
        raise ConfigError(f"augment ratio must be one of {ALLOWED_RATIOS}, got {ratio}")
    if ratio < 0:
        raise ConfigError(f"augment ratio must be >= 0, got {ratio}")
    want = ratio * len(supervised)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(augmented))
    if len(augmented) < want:
        warnings.warn(
            f"augmented pool has {len(augmented)} examples, wanted {want}; using all of them"
        )
        want = len(augmented)
    return list(supervised) + [augmented[i] for i in order[:want]]


# ---------------------------------------------------------------------------
# teacher logits


def write_teacher_logits(records, path) -> None:
    """One JSON object per record; floats keep full round-trip precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            obj = {
                "id": rec.id,
                "tokens": list(rec.tokens),
                "intent_logits": [float(v) for v in rec.intent_logits],
                "slot_logits": [[float(v) for v in row] for row in rec.slot_logits],
            }
            fh.write(json.dumps(obj) + "\n")


def load_teacher_logits(path) -> dict:
    records = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read teacher logits {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = TeacherRecord(
                id=obj["id"],
                tokens=list(obj["tokens"]),
                intent_logits=np.asarray(obj["intent_logits"], dtype=np.float32),
                slot_logits=np.asarray(obj["slot_logits"], dtype=np.float32),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad teacher record: {exc}") from exc
        records[rec.id] = rec
    return records


def align_teacher(examples, records: dict):
    """Pair every example with its teacher record, verifying token counts."""
    missing = [ex.id for ex in examples if ex.id not in records]
    if missing:
        raise AlignmentError(f"missing teacher records for ids: {', '.join(missing[:20])}")
    mismatched = [
        ex.id
        for ex in examples
        if records[ex.id].slot_logits.shape[0] != len(ex.tokens)
    ]
    if mismatched:
        raise AlignmentError(
            f"teacher slot logits do not match token counts for ids: {', '.join(mismatched[:20])}"
        )
    return [(ex, records[ex.id]) for ex in examples]


# ---------------------------------------------------------------------------
# batching


@dataclass
class LabeledBatch:
    """Padded projected features and targets for one step.

    ``mask`` marks exactly the unpadded positions. Gold intent/slot ids are
    -1 where an example carries no gold labels; teacher targets are None
    unless teacher records were attached.
    """

    examples: list
    features: np.ndarray  # [batch, T, N] float
    mask: np.ndarray  # [batch, T]
    intent_ids: np.ndarray  # [batch]
    slot_ids: np.ndarray  # [batch, T]
    has_gold: np.ndarray  # [batch] bool
    teacher_intent_logits: np.ndarray | None = None
    teacher_slot_logits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)


def make_batch(examples, schema: LabelSchema, proj: ProjectionConfig, records: dict | None = None, dtype=np.float32) -> LabeledBatch:
    """Project, pad, and index a list of examples (teacher targets optional)."""
    if not examples:
        raise InputError("make_batch: empty example list")
    batch = len(examples)
    T = max(len(ex.tokens) for ex in examples)
    features = np.zeros((batch, T, proj.feature_dim), dtype=dtype)
    mask = np.zeros((batch, T), dtype=dtype)
    intent_ids = np.full(batch, -1, dtype=np.int64)
    slot_ids = np.full((batch, T), -1, dtype=np.int64)
    has_gold = np.zeros(batch, dtype=bool)
    t_int = t_slot = None
    if records is not None:
        t_int = np.zeros((batch, schema.num_intents), dtype=np.float32)
        t_slot = np.zeros((batch, T, schema.num_args), dtype=np.float32)
    for b, ex in enumerate(examples):
        n = len(ex.tokens)
        for t, token in enumerate(ex.tokens):
            features[b, t] = project_token(token, proj)
        mask[b, :n] = 1.0
        if ex.intent is not None and ex.slots is not None:
            intent_ids[b] = schema.intent_index(ex.intent)
            slot_ids[b, :n] = [schema.arg_index(tag) for tag in ex.slots]
            has_gold[b] = True
        if records is not None:
            rec = records.get(ex.id)
            if rec is None:
                raise AlignmentError(f"missing teacher record for id {ex.id}")
            if rec.slot_logits.shape != (n, schema.num_args) or rec.intent_logits.shape != (schema.num_intents,):
                raise AlignmentError(f"teacher record {ex.id} has wrong shape")
            t_int[b] = rec.intent_logits
            t_slot[b, :n] = rec.slot_logits
    return LabeledBatch(
        examples=list(examples),
        features=features,
        mask=mask,
        intent_ids=intent_ids,
        slot_ids=slot_ids,
        has_gold=has_gold,
        teacher_intent_logits=t_int,
        teacher_slot_logits=t_slot,
    )


# ---------------------------------------------------------------------------
# metrics


def normalize_bio(labels) -> list:
    """Rewrite I-x tags that do not continue a B-x/I-x span to B-x (idempotent)."""
    fixed = []
    prev = "O"
    for tag in labels:
        if tag.startswith("I-") and prev not in (f"B-{tag[2:]}", f"I-{tag[2:]}"):
            tag = "B-" + tag[2:]
        fixed.append(tag)
        prev = tag
    return fixed


def bio_spans(labels) -> set:
    """Decode (type, start, end_exclusive) spans from BIO tags."""
    spans = set()
    start = None
    current = None
    for i, tag in enumerate(normalize_bio(labels)):
        if tag == "O":
            if start is not None:
                spans.add((current, start, i))
                start = None
            continue
        prefix, slot_type = tag.split("-", 1)
        if prefix == "B" or slot_type != current:
            if start is not None:
                spans.add((current, start, i))
            start, current = i, slot_type
    if start is not None:
        spans.add((current, start, len(labels)))
    return spans


def metrics(predictions, gold) -> dict:
    """Intent accuracy, span-level micro slot F1, and exact match.

    Both arguments are sequences of (intent_label, slot_labels) pairs.
    A span counts as a true positive only when type, start, and end all
    match. Exact match needs the intent and every token's slot label right.
    """
    predictions, gold = list(predictions), list(gold)
    if len(predictions) != len(gold):
        raise InputError(f"{len(predictions)} predictions for {len(gold)} gold examples")
    if not gold:
        raise InputError("metrics: empty evaluation set")
    intent_hits = 0
    exact_hits = 0
    tp = fp = fn = 0
    for (p_intent, p_slots), (g_intent, g_slots) in zip(predictions, gold):
        if len(p_slots) != len(g_slots):
            raise InputError(f"slot sequences differ in length: {len(p_slots)} vs {len(g_slots)}")
        intent_ok = p_intent == g_intent
        intent_hits += intent_ok
        exact_hits += intent_ok and list(p_slots) == list(g_slots)
        p_spans, g_spans = bio_spans(p_slots), bio_spans(g_slots)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    if fp == 0 and fn == 0:
        f1 = 1.0
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    n = len(gold)
    return {
        "intent_accuracy": intent_hits / n,
        "slot_f1": f1,
        "exact_match": exact_hits / n,
    }


# ---------------------------------------------------------------------------
# synthetic grammar


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def _unique_words(rng: np.random.Generator, count: int, syllables: int, taken: set) -> list:
    words = []
    while len(words) < count:
        word = _make_word(rng, syllables)
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


class SyntheticGrammar:
    """Deterministic template grammar for desk-scale experiments.

    Each intent owns distinctive trigger words and each slot type owns a
    filler vocabulary, so the task is fully learnable; queries mix a
    trigger, function words, and one to three slot spans.
    """

    def __init__(self, seed: int, n_intents: int, n_slot_types: int, vocab_size: int = 120):
        if n_intents < 1 or n_slot_types < 1 or vocab_size < 1:
            raise ConfigError("grammar sizes must be >= 1")
        self.seed = seed
        rng = np.random.default_rng([seed, 0xC0FFEE])
        taken: set = set()
        n_function = max(6, vocab_size // 8)
        fillers_per_type = max(3, (vocab_size - 2 * n_intents - n_function) // max(n_slot_types, 1))
        self.intents = [f"intent_{w}" for w in _unique_words(rng, n_intents, 3, taken)]
        self.triggers = {
            intent: _unique_words(rng, 2, 2, taken) for intent in self.intents
        }
        self.slot_types = _unique_words(rng, n_slot_types, 3, taken)
        self.fillers = {
            slot_type: _unique_words(rng, fillers_per_type, 2, taken)
            for slot_type in self.slot_types
        }
        self.function_words = _unique_words(rng, n_function, 1, taken)
        self.schema = LabelSchema(intents=list(self.intents), slot_types=list(self.slot_types))

    def synonyms(self) -> dict:
        """Same-role substitution table used by paraphrasing tools."""
        table = {}
        for words in self.triggers.values():
            for w in words:
                table[w] = [v for v in words if v != w]
        for words in self.fillers.values():
            for w in words:
                table[w] = [v for v in words if v != w]
        for w in self.function_words:
            table[w] = [v for v in self.function_words if v != w]
        return table

    def vocab_json(self) -> dict:
        return {
            "triggers": self.triggers,
            "fillers": self.fillers,
            "function_words": self.function_words,
            "synonyms": self.synonyms(),
        }

    def sample(self, rng: np.random.Generator, index: int, prefix: str, labeled: bool = True) -> Example:
        intent = self.intents[index % len(self.intents)]
        tokens = []
        tags = []

        def emit(words, word_tags):
            tokens.extend(words)
            tags.extend(word_tags)

        if rng.random() < 0.5:
            emit([self.function_words[rng.integers(len(self.function_words))]], ["O"])
        trigger = self.triggers[intent][rng.integers(2)]
        emit([trigger], ["O"])
        n_spans = int(rng.integers(1, min(3, len(self.slot_types)) + 1))
        type_choices = rng.choice(len(self.slot_types), size=n_spans, replace=False)
        for slot_i in type_choices:
            slot_type = self.slot_types[slot_i]
            if rng.random() < 0.6:
                emit([self.function_words[rng.integers(len(self.function_words))]], ["O"])
            span_len = int(rng.integers(1, 3))
            pool = self.fillers[slot_type]
            words = [pool[rng.integers(len(pool))] for _ in range(span_len)]
            emit(words, [f"B-{slot_type}"] + [f"I-{slot_type}"] * (span_len - 1))
        if rng.random() < 0.3:
            emit([self.function_words[rng.integers(len(self.function_words))]], ["O"])
        return Example(
            id=f"{prefix}-{index:05d}",
            tokens=tokens,
            intent=intent if labeled else None,
            slots=tags if labeled else None,
            origin="supervised" if labeled else "augmented",
        )

    def generate(self, count: int, prefix: str, labeled: bool = True, stream: int = 0) -> list:
        # fnv1a64 instead of hash(): the builtin is salted per process
        rng = np.random.default_rng([self.seed, fnv1a64(prefix.encode()) & 0x7FFFFFFF, stream])
        return [self.sample(rng, i, prefix, labeled) for i in range(count)]


def make_synthetic_grammar(
    seed: int,
    n_examples: int,
    n_intents: int,
    n_slot_types: int,
    vocab_size: int = 120,
    out_dir=None,
    dev_examples: int | None = None,
    test_examples: int | None = None,
    augmented_factor: int = 8,
) -> dict:
    """Generate train/dev/test TSVs, an unlabeled augmented pool, schema, and vocab.

    Byte-identical output for a fixed argument tuple. Returns the path map.
    """
    grammar = SyntheticGrammar(seed, n_intents, n_slot_types, vocab_size)
    dev_examples = max(1, n_examples // 2) if dev_examples is None else dev_examples
    test_examples = dev_examples if test_examples is None else test_examples
    splits = {
        "train": grammar.generate(n_examples, "train"),
        "dev": grammar.generate(dev_examples, "dev"),
        "test": grammar.generate(test_examples, "test"),
    }
    aug = grammar.generate(augmented_factor * n_examples, "aug", labeled=False)
    out_dir = Path(out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, examples in splits.items():
        paths[name] = out_dir / f"{name}.tsv"
        write_dataset(examples, paths[name])
    paths["augmented"] = out_dir / "aug.tsv"
    write_augmented(aug, paths["augmented"])
    paths["schema"] = out_dir / "schema.json"
    grammar.schema.save(paths["schema"])
    paths["vocab"] = out_dir / "vocab.json"
    with open(paths["vocab"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(grammar.vocab_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return {k: str(v) for k, v in paths.items()}
