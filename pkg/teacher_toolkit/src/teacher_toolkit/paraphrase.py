"""Deterministic pseudo-paraphrasing of queries.

A desk-scale stand-in for translation round-trips: lexical perturbations
that keep the query's meaning recoverable by the teacher. Each output is
guaranteed to differ from its source line, and a fixed seed reproduces the
file byte for byte. Labels are never produced here; they come from a
teacher forward pass over the perturbed text.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .formats import Query


def load_synonyms(vocab_path) -> dict:
    """Synonym table from the grammar generator's vocab JSON ({word: [alts]})."""
    obj = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
    table = obj.get("synonyms", obj if isinstance(obj, dict) else {})
    return {w: list(alts) for w, alts in table.items() if alts}


def _perturb(tokens, rng: np.random.Generator, synonyms: dict) -> list:
    out = list(tokens)
    changed = False
    # synonym substitution (same-role word, labels survive relabeling)
    for i, token in enumerate(out):
        alts = synonyms.get(token)
        if alts and rng.random() < 0.35:
            out[i] = alts[int(rng.integers(len(alts)))]
            changed = True
    # drop at most one token
    if len(out) > 2 and rng.random() < 0.3:
        del out[int(rng.integers(len(out)))]
        changed = True
    # swap one adjacent pair
    if len(out) > 1 and rng.random() < 0.3:
        i = int(rng.integers(len(out) - 1))
        out[i], out[i + 1] = out[i + 1], out[i]
        changed = True
    if not changed or out == list(tokens):
        # force a difference: substitute if possible, else swap or drop
        candidates = [i for i, t in enumerate(out) if synonyms.get(t)]
        if candidates:
            i = candidates[int(rng.integers(len(candidates)))]
            alts = [a for a in synonyms[out[i]] if a != out[i]]
            out[i] = alts[int(rng.integers(len(alts)))]
        elif len(out) > 1:
            i = int(rng.integers(len(out) - 1))
            out[i], out[i + 1] = out[i + 1], out[i]
            if out == list(tokens):  # palindromic pair, drop instead
                del out[i]
        else:
            out = out + out  # single un-substitutable token: duplicate it
    return out


def pseudo_paraphrase(queries, seed: int, factor: int, synonyms: dict | None = None) -> list:
    """factor x len(queries) perturbed copies; none equals its source."""
    synonyms = synonyms or {}
    out = []
    for k in range(factor):
        for q in queries:
            rng = np.random.default_rng([seed, k, abs(hash_id(q.id))])
            for _ in range(20):
                tokens = _perturb(q.tokens, rng, synonyms)
                if tokens != list(q.tokens):
                    break
            out.append(Query(id=f"{q.id}-p{k}", tokens=tokens))
    return out


def hash_id(text: str) -> int:
    # stable across processes (builtin hash is salted)
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0x7FFFFFFFFFFFFFFF
    return h
