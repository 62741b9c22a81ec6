"""Acceptance suite: one test per criterion, one printed pass line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines and timings. The experiment criteria (5-9) train real models on the
synthetic grammar; the whole suite takes roughly 15 minutes on one desktop
core.
"""
import json
import time

import numpy as np
import pytest

from gradcheck import check_gradients, finite_difference, max_rel_err
from pqrnn import cli
from pqrnn.data import (
    LabelSchema,
    load_augmented,
    load_dataset,
    make_batch,
    make_synthetic_grammar,
    merge_augmented,
)
from pqrnn.encoder import (
    BatchNormState,
    EncoderConfig,
    EncoderParams,
    QuantRange,
    fake_quantize,
    fo_pool,
    masked_batch_norm,
    zoneout_schedule,
)
from pqrnn.model import PqrnnModel, export_teacher_logits, param_count
from pqrnn.projection import ProjectionConfig, project_token
from pqrnn.tensor import (
    Tensor,
    concat,
    conv1d_time,
    cross_entropy,
    expand,
    matmul,
    mul,
    precision,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    reverse_sequence,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)
from pqrnn.training import (
    TrainConfig,
    entropy,
    evaluate,
    scale_teacher_logits,
    soft_eval_loss,
    supervised_loss,
    train_loop,
)

STUDENT_ENCODER = dict(
    feature_dim=256,
    bottleneck_dim=64,
    state_size=32,
    num_layers=2,
    zoneout_base=0.1,
    projection_dropout=0.2,
)
TEACHER_ENCODER = dict(
    feature_dim=1024,
    bottleneck_dim=256,
    state_size=128,
    num_layers=4,
    zoneout_base=0.1,
    projection_dropout=0.2,
    quantize=False,
)


def report(criterion: int, name: str, started: float, detail: str = "") -> None:
    elapsed = time.perf_counter() - started
    suffix = f"  [{detail}]" if detail else ""
    print(f"\nACCEPTANCE {criterion} ({name}): PASS in {elapsed:.1f}s{suffix}")


def student_model(schema, seed=0, **overrides) -> PqrnnModel:
    enc = dict(STUDENT_ENCODER)
    enc.update(overrides)
    cfg = EncoderConfig(**enc)
    return PqrnnModel(ProjectionConfig(feature_dim=cfg.feature_dim), cfg, schema, seed=seed)


@pytest.fixture(scope="module")
def overfit_grammar(tmp_path_factory):
    out = tmp_path_factory.mktemp("grammar-overfit")
    paths = make_synthetic_grammar(
        42, 200, 5, 8, out_dir=out, dev_examples=200, test_examples=200, augmented_factor=8
    )
    schema = LabelSchema.load(paths["schema"])
    train, _ = load_dataset(paths["train"], schema)
    dev, _ = load_dataset(paths["dev"], schema)
    return {"paths": paths, "schema": schema, "train": train, "dev": dev}


@pytest.fixture(scope="module")
def float_overfit(overfit_grammar):
    model = student_model(overfit_grammar["schema"], seed=0, quantize=False)
    cfg = TrainConfig(steps=2000, batch_size=64, eval_every=250, seed=0)
    started = time.perf_counter()
    _, history = train_loop(overfit_grammar["train"], overfit_grammar["dev"], model, cfg)
    elapsed = time.perf_counter() - started
    train_em = evaluate(model, overfit_grammar["train"])["exact_match"]
    return {"model": model, "train_em": train_em, "elapsed": elapsed, "history": history}


@pytest.fixture(scope="module")
def distill_setup(tmp_path_factory):
    """Teacher experiment: a large encoder needs enough supervised data to
    generalize rather than memorize, so this grammar has 600 train examples."""
    out = tmp_path_factory.mktemp("grammar-distill")
    paths = make_synthetic_grammar(
        1234, 600, 5, 8, out_dir=out, dev_examples=200, test_examples=200, augmented_factor=4
    )
    schema = LabelSchema.load(paths["schema"])
    train, _ = load_dataset(paths["train"], schema)
    dev, _ = load_dataset(paths["dev"], schema)
    aug = load_augmented(paths["augmented"])

    started = time.perf_counter()
    teacher = PqrnnModel(
        ProjectionConfig(feature_dim=1024), EncoderConfig(**TEACHER_ENCODER), schema, seed=1
    )
    cfg = TrainConfig(steps=800, batch_size=64, eval_every=200, seed=1)
    train_loop(train, dev, teacher, cfg)
    records = {r.id: r for r in export_teacher_logits(teacher, train + aug + dev)}
    teacher_time = time.perf_counter() - started
    teacher_dev = evaluate(teacher, dev)["exact_match"]
    return {
        "schema": schema,
        "train": train,
        "dev": dev,
        "aug": aug,
        "records": records,
        "teacher_dev": teacher_dev,
        "teacher_time": teacher_time,
    }


def run_distilled_student(setup, ratio: int, scale: float = 1.0, steps: int = 1500, seed: int = 7, with_dev_loss: bool = False):
    merged = merge_augmented(setup["train"], setup["aug"], ratio, seed=seed)
    student = student_model(setup["schema"], seed=seed, quantize=False)
    cfg = TrainConfig(
        steps=steps,
        batch_size=64,
        eval_every=250,
        seed=seed,
        distill_mode="soft_only",
        teacher_logit_scale=scale,
    )
    _, history = train_loop(
        merged,
        setup["dev"],
        student,
        cfg,
        teacher_records=setup["records"],
        dev_teacher_records=setup["records"] if with_dev_loss else None,
    )
    return student, history


# -- criterion 1 ---------------------------------------------------------------


def test_criterion_01_projection_statistics():
    started = time.perf_counter()
    cfg = ProjectionConfig(feature_dim=1024)
    rng = np.random.default_rng(2024)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))

    def token():
        return "".join(rng.choice(letters, size=rng.integers(2, 12)))

    unique: dict = {}
    while len(unique) < 20000:
        unique.setdefault(token(), None)
    tokens = list(unique)
    vectors = np.stack([project_token(t, cfg) for t in tokens])

    entries = vectors.ravel()
    assert entries.size >= 1_000_000
    p0 = np.mean(entries == 0)
    p_pos = np.mean(entries == 1)
    p_neg = np.mean(entries == -1)
    assert abs(p0 - 0.5) < 0.01
    assert abs(p_pos - 0.25) < 0.01
    assert abs(p_neg - 0.25) < 0.01

    floats = vectors.astype(np.float64)
    pairs = floats[:10000], floats[10000:20000]
    dots = np.einsum("ij,ij->i", pairs[0], pairs[1])
    mean_dot = abs(np.mean(dots) / cfg.feature_dim)
    assert mean_dot < 0.02

    norms_sq = (floats**2).sum(axis=1)
    half_n = cfg.feature_dim / 2
    assert abs(norms_sq.mean() - half_n) < 0.05 * half_n

    assert time.perf_counter() - started < 30
    report(
        1,
        "projection statistics",
        started,
        f"P0={p0:.4f} P+={p_pos:.4f} P-={p_neg:.4f} |dot|/N={mean_dot:.4f} E||v||^2={norms_sq.mean():.1f}",
    )


# -- criterion 2 ---------------------------------------------------------------


def _op_instances(rng):
    """One random FD check instance per call for each differentiable op."""

    def shifted(size):
        # relu probes need guaranteed kink clearance (FD is invalid within eps of 0)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        return sign * (np.abs(rng.normal(size=size)) + 0.05)

    checks = []

    def add_check(fn):
        checks.append(fn)
        return fn

    @add_check
    def _matmul():
        m, k, p = rng.integers(1, 5, size=3)
        a = Tensor(rng.normal(size=(m, k)), requires_grad=True)
        b = Tensor(rng.normal(size=(k, p)), requires_grad=True)
        mix = Tensor(rng.normal(size=(m, p)))
        return lambda: reduce_sum(mul(matmul(a, b), mix)), [a, b]

    @add_check
    def _conv():
        T, ci, co = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        x = Tensor(rng.normal(size=(T, ci)), requires_grad=True)
        w = Tensor(rng.normal(size=(k, ci, co)), requires_grad=True)
        mask = (rng.random(T) < 0.8).astype(float)
        mask[0] = 1.0
        mix = Tensor(rng.normal(size=(T, co)))
        return lambda: reduce_sum(mul(conv1d_time(x, w, mask), mix)), [x, w]

    @add_check
    def _elementwise():
        n = int(rng.integers(2, 30))
        x = Tensor(shifted(n), requires_grad=True)
        y = Tensor(rng.normal(size=n), requires_grad=True)
        mix = Tensor(rng.normal(size=n))

        def fwd():
            s = sigmoid(x)
            t = tanh(y)
            r = relu(x)
            return reduce_sum(mul(mul(s, mix), sub(t, r)))

        return fwd, [x, y]

    @add_check
    def _softmax_ce():
        B, C = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        x = Tensor(rng.normal(size=(B, C)), requires_grad=True)
        soft = rng.dirichlet(np.ones(C), size=B)
        mix = Tensor(rng.normal(size=(B, C)))
        hard = rng.integers(0, C, size=B)

        def fwd():
            a = reduce_sum(mul(softmax(x, axis=-1), mix))
            return reduce_sum(concat([reshape(a, (1,)), reshape(cross_entropy(x, soft), (1,)), reshape(cross_entropy(x, hard), (1,))], axis=0))

        return fwd, [x]

    @add_check
    def _shape_ops():
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        mix = Tensor(rng.normal(size=(4, 3)))
        lengths = np.array([3, 4])

        def fwd():
            xr = reshape(x, (4, 3))
            xt = transpose(transpose(xr))
            biased = mul(xt, expand(reshape(b, (1, 3)), (4, 3)))
            rev = reverse_sequence(reshape(biased, (2, 2, 3)), np.array([1, 2]))
            return reduce_mean(mul(reshape(rev, (4, 3)), mix))

        return fwd, [x, b]

    @add_check
    def _masked_bn():
        B, T, C = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        state = BatchNormState(C)
        state.running_mean = rng.normal(size=C) * 0.2
        state.running_var = rng.random(C) + 0.5
        mask = np.zeros((B, T))
        for b in range(B):
            mask[b, : rng.integers(1, T + 1)] = 1.0
        valid = mask.astype(bool)
        # a near-zero batch variance blows up the normalizer's third
        # derivative and with it the FD truncation error; redraw those
        for _ in range(100):
            data = rng.normal(size=(B, T, C))
            if valid.sum() == 1 or data[valid].var(axis=0).min() > 0.05:
                break
        x = Tensor(data, requires_grad=True)
        mix = Tensor(rng.normal(size=(B, T, C)))
        training = bool(rng.random() < 0.5)

        def fwd():
            return reduce_sum(mul(masked_batch_norm(x, mask, state, training), mix))

        return fwd, [x, state.gamma, state.beta]

    @add_check
    def _fo_pool():
        B, T, S = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        z = Tensor(rng.normal(size=(B, T, S)), requires_grad=True)
        f = Tensor(rng.random((B, T, S)) * 0.8 + 0.1, requires_grad=True)
        mask = np.zeros((B, T))
        for b in range(B):
            mask[b, : rng.integers(1, T + 1)] = 1.0
        mix = Tensor(rng.normal(size=(B, T, S)))
        return lambda: reduce_sum(mul(fo_pool(z, f, mask), mix)), [z, f]

    return checks


def test_criterion_02_gradient_suite(overfit_grammar):
    started = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    instances = 0
    with precision("float64"):
        # >= 100 random instances per op family
        for _ in range(100):
            for make in _op_instances(rng):
                fwd, params = make()
                worst = max(worst, check_gradients(fwd, params))
                instances += 1

        # end-to-end model: BN inference mode, dropout/zoneout off, quantization off
        schema = overfit_grammar["schema"]
        for seed in range(3):
            model = None
            for attempt in range(50):
                candidate = student_model(
                    schema,
                    seed=1000 + 50 * seed + attempt,
                    feature_dim=16,
                    bottleneck_dim=4,
                    state_size=3,
                    num_layers=2,
                    zoneout_base=0.0,
                    projection_dropout=0.0,
                    quantize=False,
                )
                for bn in candidate.encoder_params.named_bn_states().values():
                    bn.running_mean = rng.normal(size=bn.running_mean.shape) * 0.1
                    bn.running_var = rng.random(bn.running_var.shape) + 0.5
                examples = overfit_grammar["train"][seed * 4 : seed * 4 + 4]
                batch = make_batch(examples, schema, candidate.projection_config)
                # redraw until ReLU pre-activations clear the FD eps region
                pre = batch.features @ candidate.encoder_params.bottleneck_w.data + candidate.encoder_params.bottleneck_b.data
                bn = candidate.encoder_params.bottleneck_bn
                norm = (pre - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
                if np.abs(norm[batch.mask.astype(bool)]).min() > 5e-3:
                    model = candidate
                    break
            assert model is not None, "no kink-free fixture found"
            cfg = TrainConfig(steps=1, batch_size=4, eval_every=1, seed=0, l2_scale=1e-5)
            params = list(model.named_parameters().values())

            def fwd():
                loss, _ = supervised_loss(batch, model, cfg, training=False)
                return loss

            worst = max(worst, check_gradients(fwd, params))
            instances += 1
    elapsed = time.perf_counter() - started
    assert worst < 1e-4
    assert elapsed < 120
    report(2, "gradient suite", started, f"{instances} instances, worst rel err {worst:.2e}")


# -- criterion 3 ---------------------------------------------------------------


def test_criterion_03_masked_bn_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(3)
    with precision("float64"):
        for _ in range(50):
            batch = int(rng.integers(1, 6))
            T = int(rng.integers(2, 9))
            C = int(rng.integers(1, 8))
            lengths = rng.integers(1, T + 1, size=batch)
            seqs = [rng.normal(size=(n, C)) for n in lengths]
            x = np.zeros((batch, T, C))
            mask = np.zeros((batch, T))
            for b, s in enumerate(seqs):
                x[b, : len(s)] = s
                mask[b, : len(s)] = 1.0
            state = BatchNormState(C, momentum=0.0)
            out = masked_batch_norm(Tensor(x), mask, state, training=True)
            rows = np.concatenate(seqs, axis=0)
            np.testing.assert_allclose(state.running_mean, rows.mean(axis=0), atol=1e-6)
            np.testing.assert_allclose(state.running_var, rows.var(axis=0), atol=1e-6)
            expected = (rows - rows.mean(axis=0)) / np.sqrt(rows.var(axis=0) + state.eps)
            got = np.concatenate([out.data[b, : lengths[b]] for b in range(batch)])
            np.testing.assert_allclose(got, expected, atol=1e-6)
    assert time.perf_counter() - started < 10
    report(3, "masked batch norm vs unpadded concatenation", started, "50 randomized batches")


# -- criterion 4 ---------------------------------------------------------------


def test_criterion_04_fo_pooling_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    with precision("float64"):
        for _ in range(100):
            T = int(rng.integers(1, 9))
            S = int(rng.integers(1, 5))
            z = rng.normal(size=(T, S))
            f = rng.random((T, S))
            got = fo_pool(Tensor(z), Tensor(f), np.ones(T)).data
            c = np.zeros((T, S))
            prev = np.zeros(S)
            for t in range(T):
                for s in range(S):
                    prev[s] = f[t, s] * prev[s] + (1.0 - f[t, s]) * z[t, s]
                    c[t, s] = prev[s]
            np.testing.assert_allclose(got, c, atol=1e-6)
    assert time.perf_counter() - started < 10
    report(4, "fo-pooling vs scalar recurrence", started, "100 instances, T<=8, S<=4")


# -- criterion 5 ---------------------------------------------------------------


def test_criterion_05_overfit_run(float_overfit):
    started = time.perf_counter() - float_overfit["elapsed"]
    assert float_overfit["train_em"] >= 0.99
    assert float_overfit["elapsed"] < 300
    best_dev = max(h["dev_exact_match"] for h in float_overfit["history"])
    report(
        5,
        "synthetic-grammar overfit",
        started,
        f"train EM {float_overfit['train_em']:.4f}, dev EM {best_dev:.4f}, {float_overfit['elapsed']:.0f}s for 2000 steps",
    )


# -- criterion 6 ---------------------------------------------------------------


def test_criterion_06_distillation_ratio(distill_setup):
    started = time.perf_counter()
    teacher_dev = distill_setup["teacher_dev"]
    student1, _ = run_distilled_student(distill_setup, ratio=1)
    em1 = evaluate(student1, distill_setup["dev"])["exact_match"]
    student4, _ = run_distilled_student(distill_setup, ratio=4)
    em4 = evaluate(student4, distill_setup["dev"])["exact_match"]
    total = time.perf_counter() - started + distill_setup["teacher_time"]

    assert em4 >= 0.95 * teacher_dev
    assert em4 >= em1 - 0.01
    assert total < 1200
    report(
        6,
        "distillation ratio",
        started,
        f"teacher {teacher_dev:.4f}, ratio1 {em1:.4f}, ratio4 {em4:.4f}, "
        f"student/teacher {em4 / teacher_dev:.3f}, total {total:.0f}s incl. teacher",
    )


# -- criterion 7 ---------------------------------------------------------------


def test_criterion_07_teacher_logit_scaling(distill_setup):
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(1000, 9)) * 3
    for s in (0.25, 0.5, 1.0, 2.0, 4.0):
        np.testing.assert_array_equal(
            scale_teacher_logits(logits, s).argmax(axis=-1), logits.argmax(axis=-1)
        )
    scales = (0.25, 0.5, 1.0, 2.0, 4.0)
    ent = np.stack([entropy(scale_teacher_logits(logits, s)) for s in scales])
    assert np.all(np.diff(ent, axis=0) < 0)

    # dev soft-loss curves for the sweep (reported, not asserted)
    curves = {}
    for s in (0.25, 0.5, 1.0, 2.0):
        _, history = run_distilled_student(
            distill_setup, ratio=1, scale=s, steps=750, seed=17, with_dev_loss=True
        )
        curves[s] = [(h["step"], round(h["dev_soft_loss"], 4)) for h in history]
    lines = "; ".join(f"s={s}: {curve}" for s, curve in curves.items())
    elapsed = time.perf_counter() - started
    assert elapsed < 1200
    report(7, "teacher-logit scaling", started, f"argmax/entropy asserted; dev soft-loss curves {lines}")


# -- criterion 8 ---------------------------------------------------------------


def test_criterion_08_ablation_harness(overfit_grammar, tmp_path, capsys):
    started = time.perf_counter()
    paths = overfit_grammar["paths"]
    config = {
        "feature_dim": 128,
        "bottleneck_dim": 32,
        "state_size": 16,
        "num_layers": 2,
        "zoneout_base": 0.5,
        "projection_dropout": 0.2,
        "quantize": True,
        "batch_norm": True,
        "steps": 150,
        "batch_size": 32,
        "eval_every": 150,
        "seed": 0,
        "train_path": paths["train"],
        "dev_path": paths["dev"],
        "test_path": paths["test"],
        "schema_path": paths["schema"],
    }
    cfg_path = tmp_path / "ablate.json"
    cfg_path.write_text(json.dumps(config))
    rc = cli.main(["ablate", "--config", str(cfg_path), "--out-dir", str(tmp_path / "out")])
    capsys.readouterr()
    assert rc == 0

    rows = json.loads((tmp_path / "out" / "ablation.json").read_text())
    assert len(rows) == 8
    assert rows[0]["variant"] == "default"
    base = cli.RunConfig.from_dict(config).to_dict()
    for entry, row in zip(cli.ablation_grid(cli.RunConfig.from_dict(config))[1:], rows[1:]):
        diff = {k: v for k, v in entry["config"].to_dict().items() if base[k] != v}
        assert len(diff) == 1
        assert row["field"] in diff

    tsv_lines = (tmp_path / "out" / "ablation.tsv").read_text().strip().splitlines()
    assert len(tsv_lines) == 9  # header + 8 rows
    default_em = rows[0]["exact_match"]
    deltas = {r["variant"]: round(r["exact_match"] - default_em, 4) for r in rows[1:]}
    elapsed = time.perf_counter() - started
    assert elapsed < 1800
    report(8, "ablation harness", started, f"8 rows, one switch each; EM deltas vs default: {deltas}")


# -- criterion 9 ---------------------------------------------------------------


def test_criterion_09_quantization(overfit_grammar, float_overfit):
    started = time.perf_counter()
    rng = np.random.default_rng(9)
    qr = QuantRange()
    qr.min, qr.max, qr.initialized = -0.8, 1.7, True
    x = Tensor(rng.uniform(-0.8, 1.7, size=20000))
    once = fake_quantize(x, qr)
    twice = fake_quantize(once, qr)
    np.testing.assert_array_equal(once.data, twice.data)
    bound = (qr.max - qr.min) / 510.0 + 1e-7
    assert np.max(np.abs(once.data - x.data)) <= bound

    model = student_model(overfit_grammar["schema"], seed=0, quantize=True)
    cfg = TrainConfig(steps=2000, batch_size=64, eval_every=500, seed=0)
    train_loop(overfit_grammar["train"], overfit_grammar["dev"], model, cfg)
    quant_em = evaluate(model, overfit_grammar["train"])["exact_match"]
    float_em = float_overfit["train_em"]
    assert quant_em >= float_em - 0.02
    report(
        9,
        "quantization",
        started,
        f"idempotent, error bound {bound:.2e}; quantized train EM {quant_em:.4f} vs float {float_em:.4f}",
    )


# -- criterion 10 ----------------------------------------------------------------


def test_criterion_10_parameter_count():
    started = time.perf_counter()
    count = param_count(EncoderConfig(), 113, 151)
    assert 1_500_000 <= count <= 2_500_000
    schema = LabelSchema(
        intents=[f"i{k}" for k in range(113)], slot_types=[f"s{k}" for k in range(75)]
    )
    model = PqrnnModel(ProjectionConfig(), EncoderConfig(), schema)
    assert model.count_trainable() == count
    report(10, "parameter count", started, f"default config, I=113, A=151: {count:,} trainable scalars")
