import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqrnn.errors import AlignmentError, ConfigError, DataError, InputError
from pqrnn.data import (
    Example,
    LabelSchema,
    TeacherRecord,
    align_teacher,
    bio_spans,
    load_augmented,
    load_dataset,
    load_teacher_logits,
    make_batch,
    make_synthetic_grammar,
    merge_augmented,
    metrics,
    normalize_bio,
    tokenize,
    write_augmented,
    write_dataset,
    write_teacher_logits,
)
from pqrnn.projection import ProjectionConfig


def test_tokenize_basic_and_whitespace_runs():
    assert tokenize("book a flight") == ["book", "a", "flight"]
    assert tokenize("  a  b ") == ["a", "b"]


def test_tokenize_presegmented_text():
    assert tokenize("予約 し て") == ["予約", "し", "て"]


def test_tokenize_rejects_empty():
    with pytest.raises(InputError):
        tokenize("   ")


def test_load_dataset_single_line(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("q1\tbook a flight\tBookFlight\tO O B-flight\n", encoding="utf-8")
    examples, schema = load_dataset(path)
    assert len(examples) == 1
    assert examples[0].tokens == ["book", "a", "flight"]
    assert examples[0].intent == "BookFlight"
    assert schema.intents == ["BookFlight"]
    assert schema.slot_types == ["flight"]
    assert schema.arg_labels == ["O", "B-flight", "I-flight"]


def test_load_dataset_reports_line_of_length_mismatch(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text(
        "q1\ta b\tX\tO O\nq2\ta b c\tX\tO O\n", encoding="utf-8"
    )
    with pytest.raises(DataError, match=r":2:"):
        load_dataset(path)


def test_load_dataset_rejects_wrong_column_count(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("q1\ta b\tX\n", encoding="utf-8")
    with pytest.raises(DataError, match="4 tab-separated"):
        load_dataset(path)


def test_load_dataset_validates_against_fixed_schema(tmp_path):
    schema = LabelSchema(intents=["X"], slot_types=["s"])
    path = tmp_path / "d.tsv"
    path.write_text("q1\ta\tY\tO\n", encoding="utf-8")
    with pytest.raises(DataError, match="unknown intent"):
        load_dataset(path, schema)
    path.write_text("q1\ta\tX\tB-zz\n", encoding="utf-8")
    with pytest.raises(DataError, match="unknown slot type"):
        load_dataset(path, schema)


def test_dataset_round_trip(tmp_path):
    examples = [
        Example("a1", ["book", "it"], "Book", ["O", "B-x"]),
        Example("a2", ["go"], "Go", ["O"]),
    ]
    path = tmp_path / "rt.tsv"
    write_dataset(examples, path)
    loaded, _ = load_dataset(path)
    assert [(e.id, e.tokens, e.intent, e.slots) for e in loaded] == [
        (e.id, e.tokens, e.intent, e.slots) for e in examples
    ]


def test_augmented_round_trip(tmp_path):
    examples = [Example("g1", ["hello", "there"], None, None, origin="augmented")]
    path = tmp_path / "aug.tsv"
    write_augmented(examples, path)
    loaded = load_augmented(path)
    assert loaded[0].id == "g1"
    assert loaded[0].tokens == ["hello", "there"]
    assert loaded[0].intent is None and loaded[0].origin == "augmented"


def test_merge_augmented_ratio_one():
    sup = [Example(f"s{i}", ["a"], "X", ["O"]) for i in range(100)]
    aug = [Example(f"g{i}", ["b"], None, None, origin="augmented") for i in range(500)]
    merged = merge_augmented(sup, aug, ratio=1, seed=3)
    assert len(merged) == 200
    assert sum(e.origin == "augmented" for e in merged) == 100


def test_merge_augmented_short_pool_warns():
    sup = [Example(f"s{i}", ["a"], "X", ["O"]) for i in range(10)]
    aug = [Example("g0", ["b"], None, None, origin="augmented")]
    with pytest.warns(UserWarning, match="using all"):
        merged = merge_augmented(sup, aug, ratio=4, seed=0)
    assert len(merged) == 11


def test_merge_augmented_rejects_other_ratios():
    with pytest.raises(ConfigError):
        merge_augmented([], [], ratio=3)
    assert merge_augmented([], [], ratio=3, allow_any_ratio=True) == []


def test_merge_augmented_seeded_reproducible():
    sup = [Example(f"s{i}", ["a"], "X", ["O"]) for i in range(5)]
    aug = [Example(f"g{i}", ["b"], None, None, origin="augmented") for i in range(100)]
    a = [e.id for e in merge_augmented(sup, aug, 4, seed=7)]
    b = [e.id for e in merge_augmented(sup, aug, 4, seed=7)]
    c = [e.id for e in merge_augmented(sup, aug, 4, seed=8)]
    assert a == b
    assert a != c


def make_records(examples, I=2, A=3):
    return {
        ex.id: TeacherRecord(
            id=ex.id,
            tokens=list(ex.tokens),
            intent_logits=np.zeros(I, dtype=np.float32),
            slot_logits=np.zeros((len(ex.tokens), A), dtype=np.float32),
        )
        for ex in examples
    }


def test_align_teacher_perfect_join():
    examples = [Example(f"e{i}", ["a", "b"], "X", ["O", "O"]) for i in range(4)]
    joined = align_teacher(examples, make_records(examples))
    assert len(joined) == 4
    assert all(ex.id == rec.id for ex, rec in joined)


def test_align_teacher_missing_id_named():
    examples = [Example("e0", ["a"], "X", ["O"]), Example("e1", ["a"], "X", ["O"])]
    records = make_records(examples[:1])
    with pytest.raises(AlignmentError, match="e1"):
        align_teacher(examples, records)


def test_align_teacher_length_mismatch_named():
    examples = [Example("e0", ["a", "b", "c"], "X", ["O", "O", "O"])]
    records = make_records(examples)
    records["e0"].slot_logits = np.zeros((4, 3), dtype=np.float32)
    with pytest.raises(AlignmentError, match="e0"):
        align_teacher(examples, records)


def test_teacher_logits_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [
        TeacherRecord("a", ["x", "y"], rng.normal(size=3).astype(np.float32), rng.normal(size=(2, 5)).astype(np.float32)),
        TeacherRecord("b", ["z"], rng.normal(size=3).astype(np.float32), rng.normal(size=(1, 5)).astype(np.float32)),
    ]
    path = tmp_path / "t.jsonl"
    write_teacher_logits(recs, path)
    loaded = load_teacher_logits(path)
    assert set(loaded) == {"a", "b"}
    np.testing.assert_array_equal(loaded["a"].intent_logits, recs[0].intent_logits)
    np.testing.assert_array_equal(loaded["a"].slot_logits, recs[0].slot_logits)


def test_make_batch_shapes_and_mask():
    schema = LabelSchema(intents=["X", "Y"], slot_types=["s"])
    proj = ProjectionConfig(feature_dim=32)
    examples = [
        Example("e0", ["a", "b", "c"], "X", ["O", "B-s", "I-s"]),
        Example("e1", ["d"], "Y", ["O"]),
        Example("e2", ["e", "f"], None, None, origin="augmented"),
    ]
    batch = make_batch(examples, schema, proj)
    assert batch.features.shape == (3, 3, 32)
    np.testing.assert_array_equal(batch.mask, [[1, 1, 1], [1, 0, 0], [1, 1, 0]])
    np.testing.assert_array_equal(batch.intent_ids, [0, 1, -1])
    np.testing.assert_array_equal(batch.slot_ids[0], [0, 1, 2])
    np.testing.assert_array_equal(batch.has_gold, [True, True, False])
    assert np.all(batch.features[1, 1:] == 0)


def test_make_batch_with_teacher_records():
    schema = LabelSchema(intents=["X", "Y"], slot_types=["s"])
    proj = ProjectionConfig(feature_dim=32)
    examples = [Example("e0", ["a", "b"], "X", ["O", "O"])]
    records = make_records(examples, I=2, A=3)
    batch = make_batch(examples, schema, proj, records)
    assert batch.teacher_intent_logits.shape == (1, 2)
    assert batch.teacher_slot_logits.shape == (1, 2, 3)
    with pytest.raises(AlignmentError, match="e1"):
        make_batch([Example("e1", ["a"], None, None)], schema, proj, records)


def test_normalize_bio_rewrites_orphan_inside():
    assert normalize_bio(["I-x", "I-x", "O", "I-y"]) == ["B-x", "I-x", "O", "B-y"]
    assert normalize_bio(["B-x", "I-y"]) == ["B-x", "B-y"]


@given(
    st.lists(
        st.sampled_from(["O", "B-a", "I-a", "B-b", "I-b"]),
        min_size=0,
        max_size=12,
    )
)
@settings(max_examples=200, deadline=None)
def test_normalize_bio_idempotent(tags):
    once = normalize_bio(tags)
    assert normalize_bio(once) == once


def test_bio_spans_decoding():
    spans = bio_spans(["O", "B-x", "I-x", "O", "B-y"])
    assert spans == {("x", 1, 3), ("y", 4, 5)}


def test_metrics_all_correct():
    gold = [("X", ["O", "B-s"]), ("Y", ["B-t", "I-t"])]
    result = metrics(gold, gold)
    assert result == {"intent_accuracy": 1.0, "slot_f1": 1.0, "exact_match": 1.0}


def test_metrics_span_boundary_mismatch_scores_zero():
    gold = [("X", ["O", "O", "B-flight", "O"])]
    pred = [("X", ["O", "O", "B-flight", "I-flight"])]
    result = metrics(pred, gold)
    assert result["slot_f1"] == 0.0
    assert result["exact_match"] == 0.0
    assert result["intent_accuracy"] == 1.0


def test_metrics_hand_evaluated_small_case():
    gold = [
        ("A", ["O", "B-s"]),
        ("B", ["B-t", "O"]),
        ("C", ["O", "O"]),
    ]
    pred = [
        ("A", ["O", "B-s"]),
        ("B", ["B-t", "O"]),
        ("X", ["O", "O"]),  # wrong intent only
    ]
    result = metrics(pred, gold)
    assert result["exact_match"] == pytest.approx(2 / 3)
    assert result["intent_accuracy"] == pytest.approx(2 / 3)
    assert result["slot_f1"] == 1.0


def test_metrics_disjoint_spans_score_zero():
    gold = [("A", ["B-s", "O"])]
    pred = [("A", ["O", "B-s"])]
    assert metrics(pred, gold)["slot_f1"] == 0.0


def test_metrics_length_mismatch_rejected():
    with pytest.raises(InputError):
        metrics([("A", ["O"])], [("A", ["O", "O"])])


def test_grammar_deterministic_files(tmp_path):
    a = make_synthetic_grammar(7, 50, 3, 4, out_dir=tmp_path / "a")
    b = make_synthetic_grammar(7, 50, 3, 4, out_dir=tmp_path / "b")
    for key in ("train", "dev", "test", "augmented", "schema", "vocab"):
        assert open(a[key], "rb").read() == open(b[key], "rb").read()


def test_grammar_output_passes_validation(tmp_path):
    paths = make_synthetic_grammar(3, 200, 5, 8, out_dir=tmp_path)
    schema = LabelSchema.load(paths["schema"])
    examples, _ = load_dataset(paths["train"], schema)
    assert len(examples) == 200
    aug = load_augmented(paths["augmented"])
    assert len(aug) == 8 * 200
    # schema file order matches the generator's label order
    assert json.loads(open(paths["schema"]).read())["intents"] == schema.intents


def test_grammar_covers_all_intents(tmp_path):
    paths = make_synthetic_grammar(11, 20 * 5, 5, 4, out_dir=tmp_path)
    examples, schema = load_dataset(paths["train"])
    assert set(e.intent for e in examples) == set(schema.intents)


def test_grammar_slot_tags_use_declared_types(tmp_path):
    paths = make_synthetic_grammar(13, 100, 4, 6, out_dir=tmp_path)
    schema = LabelSchema.load(paths["schema"])
    examples, _ = load_dataset(paths["train"], schema)  # raises on unknown types
    assert any(tag != "O" for e in examples for tag in e.slots)
