"""Transformer teacher: joint intent classification + BIO slot tagging.

The teacher is a BERT-style encoder with a sequence-classification head
for the intent and a token-classification head for the slots, trained
jointly. Queries arrive whitespace-tokenized (the student's contract);
each word is split into wordpieces and the slot logits for a word are read
from its FIRST subtoken, so the exported slot matrix always has exactly
one row per original token.

With a reachable pretrained identifier the encoder weights come from
``transformers``; offline (the usual desk-scale case) a compact encoder is
initialized from scratch and a WordPiece vocabulary is trained on the
dataset itself.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from tokenizers import Tokenizer, models, pre_tokenizers, trainers
from torch import nn

from .formats import FormatError, Query, Schema, read_dataset

logger = logging.getLogger(__name__)

SCRATCH_PRESETS = {
    "scratch-small": dict(hidden_size=128, num_hidden_layers=2, num_attention_heads=4, intermediate_size=256),
    "scratch-base": dict(hidden_size=256, num_hidden_layers=4, num_attention_heads=8, intermediate_size=512),
}


@dataclass
class TeacherConfig:
    pretrained: str = "scratch-small"  # preset name or a transformers model id
    epochs: int = 30
    lr: float = 5e-4
    batch_size: int = 32
    max_seq_len: int = 64
    seed: int = 0
    vocab_size: int = 800  # only for scratch presets (wordpiece trained on the data)


class JointTeacher(nn.Module):
    """Encoder + intent head (pooled first token) + slot head (per piece)."""

    def __init__(self, encoder, hidden_size: int, n_intents: int, n_args: int):
        super().__init__()
        self.encoder = encoder
        self.intent_head = nn.Linear(hidden_size, n_intents)
        self.slot_head = nn.Linear(hidden_size, n_args)

    def forward(self, input_ids, attention_mask):
        states = self.encoder(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state
        return self.intent_head(states[:, 0]), self.slot_head(states)


def train_wordpiece(queries, vocab_size: int) -> Tokenizer:
    tokenizer = Tokenizer(models.WordPiece(unk_token="[UNK]"))
    tokenizer.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    trainer = trainers.WordPieceTrainer(
        vocab_size=vocab_size,
        special_tokens=["[PAD]", "[UNK]", "[CLS]", "[SEP]"],
        show_progress=False,
    )
    tokenizer.train_from_iterator((" ".join(q.tokens) for q in queries), trainer)
    return tokenizer


def _build_encoder(config: TeacherConfig, tokenizer: Tokenizer):
    from transformers import AutoModel, BertConfig, BertModel

    if config.pretrained in SCRATCH_PRESETS:
        preset = SCRATCH_PRESETS[config.pretrained]
        bert_config = BertConfig(
            vocab_size=tokenizer.get_vocab_size(),
            max_position_embeddings=config.max_seq_len,
            pad_token_id=tokenizer.token_to_id("[PAD]"),
            **preset,
        )
        return BertModel(bert_config), preset["hidden_size"]
    try:
        encoder = AutoModel.from_pretrained(config.pretrained)
    except Exception as exc:
        raise FormatError(
            f"cannot load pretrained encoder {config.pretrained!r} "
            f"(offline? use a scratch preset: {sorted(SCRATCH_PRESETS)}): {exc}"
        ) from exc
    return encoder, encoder.config.hidden_size


def encode_words(tokenizer: Tokenizer, tokens, max_seq_len: int):
    """Wordpiece-encode a word sequence.

    Returns (ids, first_subtoken_index per word, n_valid_words). Words
    whose first subtoken would fall beyond max_seq_len are dropped from
    the encoded window (the caller pads their logits), with a warning.
    """
    cls_id = tokenizer.token_to_id("[CLS]")
    sep_id = tokenizer.token_to_id("[SEP]")
    ids = [cls_id]
    first_index = []
    for token in tokens:
        pieces = tokenizer.encode(token).ids
        if not pieces:
            pieces = [tokenizer.token_to_id("[UNK]")]
        if len(ids) + len(pieces) + 1 > max_seq_len:
            logger.warning(
                "query truncated at %d of %d words (max_seq_len=%d)",
                len(first_index), len(tokens), max_seq_len,
            )
            break
        first_index.append(len(ids))
        ids.extend(pieces)
    ids.append(sep_id)
    return ids, first_index, len(first_index)


def _batch_tensors(tokenizer, queries, schema: Schema, max_seq_len: int, device):
    pad_id = tokenizer.token_to_id("[PAD]")
    arg_index = {label: i for i, label in enumerate(schema.arg_labels)}
    intent_index = {label: i for i, label in enumerate(schema.intents)}
    encoded = [encode_words(tokenizer, q.tokens, max_seq_len) for q in queries]
    width = max(len(ids) for ids, _, _ in encoded)
    input_ids = torch.full((len(queries), width), pad_id, dtype=torch.long)
    attention = torch.zeros((len(queries), width), dtype=torch.long)
    slot_labels = torch.full((len(queries), width), -100, dtype=torch.long)
    intent_labels = torch.zeros(len(queries), dtype=torch.long)
    firsts = []
    for row, (q, (ids, first_index, n_valid)) in enumerate(zip(queries, encoded)):
        input_ids[row, : len(ids)] = torch.tensor(ids)
        attention[row, : len(ids)] = 1
        firsts.append(first_index)
        if q.intent is not None:
            if q.intent not in intent_index:
                raise FormatError(f"query {q.id}: intent {q.intent!r} not in schema")
            intent_labels[row] = intent_index[q.intent]
            for w, pos in enumerate(first_index):
                tag = q.slots[w]
                if tag not in arg_index:
                    raise FormatError(f"query {q.id}: slot tag {tag!r} not in schema")
                slot_labels[row, pos] = arg_index[tag]
    return (
        input_ids.to(device),
        attention.to(device),
        slot_labels.to(device),
        intent_labels.to(device),
        firsts,
    )


class Teacher:
    """Trained teacher bundle: encoder, heads, tokenizer, schema, config."""

    def __init__(self, model: JointTeacher, tokenizer: Tokenizer, schema: Schema, config: TeacherConfig):
        self.model = model
        self.tokenizer = tokenizer
        self.schema = schema
        self.config = config
        self.device = torch.device("cpu")

    # -- persistence --------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out / "model.pt")
        (out / "tokenizer.json").write_text(self.tokenizer.to_str(), encoding="utf-8")
        self.schema.save(out / "schema.json")
        (out / "teacher_config.json").write_text(
            json.dumps(self.config.__dict__, indent=1) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, out_dir) -> "Teacher":
        out = Path(out_dir)
        try:
            config = TeacherConfig(**json.loads((out / "teacher_config.json").read_text()))
            tokenizer = Tokenizer.from_str((out / "tokenizer.json").read_text(encoding="utf-8"))
            schema = Schema.load(out / "schema.json")
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"cannot load teacher from {out}: {exc}") from exc
        encoder, hidden = _build_encoder(config, tokenizer)
        model = JointTeacher(encoder, hidden, schema.num_intents, schema.num_args)
        state = torch.load(out / "model.pt", map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.eval()
        return cls(model, tokenizer, schema, config)

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def predict_logits(self, queries, batch_size: int = 64):
        """(intent_logits [I], slot_logits [T x A]) per query, first-subtoken
        aligned; words beyond the encoder window get zero rows."""
        self.model.eval()
        results = []
        for start in range(0, len(queries), batch_size):
            chunk = queries[start : start + batch_size]
            input_ids, attention, _, _, firsts = _batch_tensors(
                self.tokenizer, chunk, self.schema, self.config.max_seq_len, self.device
            )
            intent_logits, slot_logits = self.model(input_ids, attention)
            for row, q in enumerate(chunk):
                T = len(q.tokens)
                slots = np.zeros((T, self.schema.num_args), dtype=np.float32)
                for w, pos in enumerate(firsts[row]):
                    slots[w] = slot_logits[row, pos].numpy()
                results.append((q.id, q.tokens, intent_logits[row].numpy(), slots))
        return results

    def predict_labels(self, queries, batch_size: int = 64):
        """Greedy (intent, slots) decode used for evaluation."""
        out = []
        for qid, tokens, intent_logits, slot_logits in self.predict_logits(queries, batch_size):
            intent = self.schema.intents[int(intent_logits.argmax())]
            slots = [self.schema.arg_labels[int(row.argmax())] for row in slot_logits]
            out.append((intent, slots))
        return out


def exact_match(teacher: Teacher, queries) -> float:
    hits = 0
    for q, (intent, slots) in zip(queries, teacher.predict_labels(queries)):
        hits += intent == q.intent and slots == q.slots
    return hits / len(queries)


def finetune_teacher(dataset_path, schema_path, config: TeacherConfig, dev_path=None) -> Teacher:
    """Train the joint teacher on a labeled TSV; schema mismatches abort first."""
    schema = Schema.load(schema_path)
    train = read_dataset(dataset_path)
    # validate the full dataset against the schema before any training work
    intent_set, arg_set = set(schema.intents), set(schema.arg_labels)
    for q in train:
        if q.intent not in intent_set:
            raise FormatError(f"query {q.id}: intent {q.intent!r} not in schema")
        for tag in q.slots:
            if tag not in arg_set:
                raise FormatError(f"query {q.id}: slot tag {tag!r} not in schema")

    torch.manual_seed(config.seed)
    tokenizer = train_wordpiece(train, config.vocab_size)
    encoder, hidden = _build_encoder(config, tokenizer)
    model = JointTeacher(encoder, hidden, schema.num_intents, schema.num_args)
    teacher = Teacher(model, tokenizer, schema, config)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr)
    ce = nn.CrossEntropyLoss(ignore_index=-100)
    order_rng = np.random.default_rng(config.seed)
    model.train()
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start : start + config.batch_size]]
            input_ids, attention, slot_labels, intent_labels, _ = _batch_tensors(
                tokenizer, chunk, schema, config.max_seq_len, teacher.device
            )
            intent_logits, slot_logits = model(input_ids, attention)
            loss = ce(intent_logits, intent_labels)
            loss = loss + ce(slot_logits.reshape(-1, schema.num_args), slot_labels.reshape(-1))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
        if dev_path is not None and (epoch + 1) % 5 == 0:
            dev = read_dataset(dev_path)
            logger.info("epoch %d: loss %.4f dev EM %.4f", epoch + 1, epoch_loss, exact_match(teacher, dev))
    model.eval()
    return teacher


def export_logits(teacher: Teacher, queries) -> list:
    """Logit records for labeled or unlabeled queries, one per input."""
    return teacher.predict_logits(queries)
