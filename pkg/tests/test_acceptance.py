"""Acceptance suite: one test per criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
pass/fail lines. Every tolerance is pinned here; nothing is deferred to
later calibration.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import chi2

from conftest import (
    build_corpus,
    build_workspace,
    train_toy,
    zeroshot_accuracy_for_source,
)
from medforge.captions import offline_caption_bank
from medforge.cli import main as cli_main
from medforge.encoders import ToyDualEncoder
from medforge.errors import IntegrityError, ManifestError
from medforge.evaluation import compute_auc, linear_probe
from medforge.ingest import generate_fixture
from medforge.manifest import (
    BankRef,
    CaptionBank,
    DatasetManifest,
    InlineCaption,
    ModalityTag,
    SampleRecord,
    read_manifest,
    write_manifest,
)
from medforge.training import (
    EmbeddingBatch,
    TrainingConfig,
    contrastive_grads,
    contrastive_loss,
    l2_normalize_rows,
    load_checkpoint,
    sample_caption,
    train_loop,
)

OFFLINE_STAMP = "1970-01-01T00:00:00+00:00"


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"[criterion {criterion:2d}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def reference_loss(v_rows, t_rows, tau):
    """Independent oracle: explicit per-row softmax cross-entropy loops."""
    n = len(v_rows)
    total = 0.0
    for rows_a, rows_b in ((v_rows, t_rows), (t_rows, v_rows)):
        for i in range(n):
            logits = [
                sum(a * b for a, b in zip(rows_a[i], rows_b[j])) / tau for j in range(n)
            ]
            m = max(logits)
            log_denominator = m + math.log(sum(math.exp(z - m) for z in logits))
            total += -(logits[i] - log_denominator) / (2 * n)
    return total


def random_unit_batch(rng, n, d):
    return EmbeddingBatch(
        l2_normalize_rows(rng.standard_normal((n, d))),
        l2_normalize_rows(rng.standard_normal((n, d))),
    )


def test_c01_loss_oracle():
    """100 random batches match the independent oracle within 1e-9, < 5 s."""
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        batch = random_unit_batch(rng, n, d)
        loss, _ = contrastive_loss(batch, tau)
        expected = reference_loss(
            batch.image_embeddings.tolist(), batch.text_embeddings.tolist(), tau
        )
        worst = max(worst, abs(loss - expected))
    elapsed = time.monotonic() - start
    report(
        1,
        worst < 1e-9 and elapsed < 5.0,
        f"loss vs oracle max |diff| {worst:.2e} (tol 1e-9), {elapsed:.2f}s (< 5s)",
    )


def test_c02_gradient_check():
    """Analytic gradients match central finite differences, rel 1e-4, < 30 s."""
    start = time.monotonic()
    rng = np.random.default_rng(202)
    eps = 1e-5
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        batch = random_unit_batch(rng, n, d)
        grads = contrastive_grads(batch, tau)
        v = batch.image_embeddings
        t = batch.text_embeddings
        for matrix, analytic in ((v, grads.d_image_embeddings), (t, grads.d_text_embeddings)):
            fd = np.zeros_like(matrix)
            for i in range(n):
                for j in range(d):
                    for sign in (1.0, -1.0):
                        matrix[i, j] += sign * eps
                        loss, _ = contrastive_loss(
                            EmbeddingBatch(v, t), tau, norm_tolerance=1.0
                        )
                        fd[i, j] += sign * loss / (2 * eps)
                        matrix[i, j] -= sign * eps
            rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, rel)
        log_tau = math.log(tau)
        up, _ = contrastive_loss(batch, math.exp(log_tau + eps))
        down, _ = contrastive_loss(batch, math.exp(log_tau - eps))
        fd_scalar = (up - down) / (2 * eps)
        rel = abs(grads.d_log_temperature - fd_scalar) / max(abs(fd_scalar), 1e-12)
        worst = max(worst, rel)
    elapsed = time.monotonic() - start
    report(
        2,
        worst < 1e-4 and elapsed < 30.0,
        f"grad vs finite differences worst rel {worst:.2e} (tol 1e-4), {elapsed:.1f}s (< 30s)",
    )


def test_c03_pinned_loss_values():
    """N=1 loss exactly 0; N=2 identity case 0.31326 within 1e-4."""
    single = EmbeddingBatch(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]))
    loss_one, _ = contrastive_loss(single, 0.07)
    two = EmbeddingBatch(np.eye(2), np.eye(2))
    loss_two, _ = contrastive_loss(two, 1.0)
    oracle_two = reference_loss(np.eye(2).tolist(), np.eye(2).tolist(), 1.0)
    ok = (
        loss_one == 0.0
        and abs(loss_two - 0.31326) < 1e-4
        and abs(oracle_two - loss_two) < 1e-12
    )
    report(3, ok, f"N=1 loss {loss_one}; N=2 identity loss {loss_two:.6f} (0.31326 +/- 1e-4)")


def test_c04_sampler_uniformity():
    """10^4 draws over an M=10 bank pass chi-square at p > 0.001; seeded replay exact."""
    captions = tuple(f"caption variant number {i}" for i in range(10))
    bank = CaptionBank({"k": captions}, "test", OFFLINE_STAMP, 10)
    record = SampleRecord(
        record_id="s/0", image_uri="u", source_dataset="s",
        modality=ModalityTag.MRI, payload=BankRef("k"),
    )

    def draw_sequence(seed):
        rng = np.random.default_rng(seed)
        return [sample_caption(record, bank, rng) for _ in range(10_000)]

    draws = draw_sequence(404)
    counts = np.array([draws.count(c) for c in captions])
    statistic = float(((counts - 1000.0) ** 2 / 1000.0).sum())
    p_value = float(chi2.sf(statistic, df=9))
    replay_exact = draws == draw_sequence(404)
    report(
        4,
        p_value > 0.001 and replay_exact,
        f"chi-square stat {statistic:.2f}, p {p_value:.4f} (> 0.001); seeded replay exact: {replay_exact}",
    )


@pytest.fixture(scope="module")
def end_to_end_run():
    """Criterion-5 training run, shared with the probe criterion."""
    start = time.monotonic()
    corpus = build_corpus(["xray", "ct", "mri"], 3, 40, seed=11, noise=0.1)
    bank = offline_caption_bank(corpus.triplets, 10, seed=3)
    result = train_toy(corpus, bank, seed=7, batch_size=36, epochs=20)  # 200 steps
    elapsed = time.monotonic() - start
    return corpus, result, elapsed


def test_c05_end_to_end_fixture(end_to_end_run):
    """Separable 3-modality fixture reaches >= 95% held-out zero-shot in < 60 s."""
    corpus, result, train_elapsed = end_to_end_run
    start = time.monotonic()
    held_out = generate_fixture(["xray", "ct", "mri"], 3, 15, seed=99, noise=0.1)
    accuracies = []
    for source in held_out.sources:
        modality = source.split("_")[1].upper()
        templates = [f"A medical {modality} image showing {{}}."]
        accuracies.append(
            zeroshot_accuracy_for_source(result.encoders, held_out, source, templates)
        )
    total = train_elapsed + (time.monotonic() - start)
    overall = float(np.mean(accuracies))
    report(
        5,
        overall >= 95.0 and result.total_steps == 200 and total < 60.0,
        f"held-out zero-shot {overall:.1f}% (>= 95%) over {result.total_steps} steps "
        f"in {total:.1f}s (< 60s)",
    )


def test_c06_template_count_trend():
    """Ambiguous single captions vs 10-caption banks: M=10 >= M=1 (majority of 3 seeds)."""
    ambiguous = "A routine imaging study of an unidentified patient."
    wins = 0
    details = []
    for seed in (1, 2, 3):
        corpus = build_corpus(["mri"], 2, 60, seed=20 + seed)
        held_out = generate_fixture(["mri"], 2, 20, seed=90 + seed, noise=0.1)
        bank_single = CaptionBank(
            {t.key: (ambiguous,) for t in corpus.triplets}, "test", OFFLINE_STAMP, 1
        )
        rich = offline_caption_bank(corpus.triplets, 9, seed=5)
        bank_multi = CaptionBank(
            {t.key: (ambiguous,) + rich.entries[t.key] for t in corpus.triplets},
            "test", OFFLINE_STAMP, 10,
        )
        templates = ["A medical MRI image showing {}."]
        accuracy = {}
        for name, bank in (("m1", bank_single), ("m10", bank_multi)):
            result = train_toy(corpus, bank, seed=seed, batch_size=12, epochs=20)
            accuracy[name] = zeroshot_accuracy_for_source(
                result.encoders, held_out, corpus.fixture.sources[0], templates
            )
        wins += accuracy["m10"] >= accuracy["m1"]
        details.append(f"seed {seed}: M=1 {accuracy['m1']:.0f}% M=10 {accuracy['m10']:.0f}%")
    report(6, wins >= 2, f"multi-caption trend holds {wins}/3 seeds ({'; '.join(details)})")


NOISY_TEMPLATES = [
    "{} resembling beta pattern and beta pattern.",
    "{} resembling gamma pattern and gamma pattern.",
    "{} resembling alpha pattern and alpha pattern.",
    "{} compared against beta pattern.",
    "{} compared against gamma pattern.",
    "{} compared against alpha pattern.",
    "{} unlike beta pattern or gamma pattern.",
    "{} unlike gamma pattern or alpha pattern.",
]


def test_c07_prompt_ensembling_trend():
    """Eight noisy templates >= one (majority of 3 seeds); identical-template ensemble exact."""
    wins = 0
    details = []
    for seed in (1, 2, 3):
        corpus = build_corpus(["mri"], 3, 40, seed=40 + seed, noise=0.8)
        bank = offline_caption_bank(corpus.triplets, 10, seed=3)
        result = train_toy(
            corpus, bank, seed=seed, batch_size=12, learning_rate=0.05,
            warmup_iters=5, epochs=8, temperature_init=0.05, encoder_seed=seed,
        )
        held_out = generate_fixture(["mri"], 3, 25, seed=140 + seed, noise=0.8)
        source = corpus.fixture.sources[0]
        acc_one = zeroshot_accuracy_for_source(
            result.encoders, held_out, source, NOISY_TEMPLATES[:1]
        )
        acc_eight = zeroshot_accuracy_for_source(
            result.encoders, held_out, source, NOISY_TEMPLATES
        )
        wins += acc_eight >= acc_one
        details.append(f"seed {seed}: 1t {acc_one:.1f}% 8t {acc_eight:.1f}%")
        # duplicating one template must be exactly the single-template head
        from medforge.evaluation import build_zeroshot_head

        pair = result.encoders.as_pair()
        classes = sorted({r["label"] for r in held_out.rows})
        single = build_zeroshot_head(classes, NOISY_TEMPLATES[:1], pair.f_text)
        repeated = build_zeroshot_head(classes, NOISY_TEMPLATES[:1] * 4, pair.f_text)
        assert np.array_equal(single.weights, repeated.weights)
    report(7, wins >= 2, f"ensembling trend holds {wins}/3 seeds ({'; '.join(details)})")


def test_c08_modality_dropout_trend():
    """Excluding a modality's source lowers that modality's zero-shot accuracy."""
    corpus = build_corpus(["xray", "ct", "mri"], 3, 40, seed=11)
    bank = offline_caption_bank(corpus.triplets, 10, seed=3)
    held_out = generate_fixture(["xray", "ct", "mri"], 3, 15, seed=99, noise=0.1)
    full = train_toy(corpus, bank, seed=7, batch_size=36, epochs=20)
    details = []
    ok = True
    for source in corpus.fixture.sources:
        modality = source.split("_")[1].upper()
        templates = [f"A medical {modality} image showing {{}}."]
        acc_full = zeroshot_accuracy_for_source(full.encoders, held_out, source, templates)
        dropped_run = train_toy(
            corpus, bank, seed=7, batch_size=24, epochs=30, source_exclusions=(source,)
        )
        acc_dropped = zeroshot_accuracy_for_source(
            dropped_run.encoders, held_out, source, templates
        )
        ok = ok and acc_dropped < acc_full
        details.append(f"{source}: full {acc_full:.0f}% dropped {acc_dropped:.0f}%")
    report(8, ok, f"dropout lowers excluded-modality accuracy ({'; '.join(details)})")


def test_c09_auc_oracle():
    """Rank-based AUC equals exhaustive pair counting exactly; complement identity exact."""

    def pair_count(scores, labels):
        wins = ties = pairs = 0
        for sp, lp in zip(scores, labels):
            if lp != 1:
                continue
            for sn, ln in zip(scores, labels):
                if ln != 0:
                    continue
                pairs += 1
                if sp > sn:
                    wins += 1
                elif sp == sn:
                    ties += 1
        return 100.0 * (wins + 0.5 * ties) / pairs

    rng = np.random.default_rng(909)
    exact = True
    complement = True
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        auc = compute_auc(scores, labels)
        exact = exact and auc == pair_count(scores, labels)
        complement = complement and auc + compute_auc(scores, 1 - labels) == 100.0
    report(9, exact and complement, f"pair-count equality: {exact}; complement identity: {complement}")


def test_c10_linear_probe_monotonicity(end_to_end_run):
    """Probe accuracy non-decreasing over fractions 0.01/0.10/1.00; 1.00 reaches 100%."""
    _, result, _ = end_to_end_run
    pair = result.encoders.as_pair()
    probe_train = generate_fixture(["xray", "ct", "mri"], 3, 100, seed=55, noise=0.1)
    probe_test = generate_fixture(["xray", "ct", "mri"], 3, 30, seed=56, noise=0.1)
    classes = probe_train.class_names
    embed = lambda fx: l2_normalize_rows(pair.f_vision(fx.features))
    train_y = np.array([classes.index(r["label"]) for r in probe_train.rows])
    test_y = np.array([classes.index(r["label"]) for r in probe_test.rows])
    train_x, test_x = embed(probe_train), embed(probe_test)
    values = [
        linear_probe(
            train_x, train_y, fraction, seed=3, test_features=test_x, test_labels=test_y
        ).value
        for fraction in (0.01, 0.10, 1.00)
    ]
    ok = values[0] <= values[1] <= values[2] and values[2] == 100.0
    report(10, ok, f"probe accuracies {values[0]:.1f} <= {values[1]:.1f} <= {values[2]:.1f}, full = 100")


def test_c11_reproducibility(tmp_path):
    """Same config + seed: bit-identical artifacts; resume matches within 1e-9."""
    outputs = []
    for name in ("one", "two"):
        root = tmp_path / name
        root.mkdir()
        config_path = build_workspace(root)
        for command in ("ingest", "caption", "train"):
            assert cli_main([command, "--config", str(config_path)]) == 0
        outputs.append(root / "out")
    identical = all(
        (outputs[0] / rel).read_bytes() == (outputs[1] / rel).read_bytes()
        for rel in ("manifests/merged.jsonl", "captions/bank.json", "train/metrics.jsonl")
    )

    corpus = build_corpus(["mri"], 2, 24, seed=14)
    bank = offline_caption_bank(corpus.triplets, 4, seed=2)
    config = TrainingConfig(batch_size=8, learning_rate=0.05, warmup_iters=3, epochs=4, seed=5)
    full_encoders = ToyDualEncoder(feature_dim=corpus.store.dim, embed_dim=8, seed=3)
    full = train_loop(corpus.manifest, bank, full_encoders, config, corpus.store)
    part_encoders = ToyDualEncoder(feature_dim=corpus.store.dim, embed_dim=8, seed=3)
    train_loop(
        corpus.manifest, bank, part_encoders, config, corpus.store,
        checkpoint_every=6, checkpoint_dir=tmp_path / "ckpt",
    )
    mid = load_checkpoint(tmp_path / "ckpt" / "step_000006.ckpt")
    fresh = ToyDualEncoder(feature_dim=corpus.store.dim, embed_dim=8, seed=3)
    resumed = train_loop(
        corpus.manifest, bank, fresh, config, corpus.store, resume_from=mid
    )
    deltas = [
        abs(a["loss"] - b["loss"])
        for a, b in zip(full.metrics[6:], resumed.metrics)
    ]
    resume_ok = max(deltas) <= 1e-9
    report(
        11,
        identical and resume_ok,
        f"bit-identical artifacts: {identical}; resume max |loss delta| {max(deltas):.2e} (<= 1e-9)",
    )


def _fuzz_record(rng, index):
    sources = ["alpha_src", "beta-src", "gamma src", "delta/src"]
    modality = list(ModalityTag)[int(rng.integers(len(ModalityTag)))]
    source = sources[int(rng.integers(len(sources)))]
    if rng.random() < 0.5:
        words = ["lesion", "нодуль", "病变", "Stück", "ﬁnding", "a b\tc", 'quo"te', "back\\slash"]
        caption = " ".join(
            words[int(rng.integers(len(words)))] for _ in range(int(rng.integers(1, 12)))
        )
        payload = InlineCaption(caption)
    else:
        payload = BankRef(f"label {int(rng.integers(50))}\x1fmodality {int(rng.integers(5))}")
    return SampleRecord(
        record_id=f"{source}/{index:06d}",
        image_uri=f"store://bucket/{index}?v={int(rng.integers(9))}",
        source_dataset=source,
        modality=modality,
        payload=payload,
    )


def test_c12_format_integrity(tmp_path):
    """10k fuzzed records round-trip losslessly; corrupted files are detected."""
    rng = np.random.default_rng(1212)
    records = [_fuzz_record(rng, i) for i in range(10_000)]
    manifest = DatasetManifest.from_records(records)
    path = write_manifest(manifest, tmp_path / "fuzz.jsonl")
    round_trip_ok = read_manifest(path) == manifest

    bank_entries = {
        f"label {i}\x1fmodality {j}": tuple(
            f"caption number {k} for label {i} modality {j}" for k in range(3)
        )
        for i in range(50)
        for j in range(5)
    }
    bank = CaptionBank(bank_entries, "fuzz", OFFLINE_STAMP, 3)
    bank_path = bank.save(tmp_path / "bank.json")
    round_trip_ok = round_trip_ok and CaptionBank.load(bank_path) == bank

    original = path.read_text(encoding="utf-8")
    lines = original.splitlines()

    def corrupt_detected(mutated_text):
        mutated = tmp_path / "mutated.jsonl"
        mutated.write_text(mutated_text, encoding="utf-8")
        try:
            read_manifest(mutated)
            return False
        except (ManifestError, IntegrityError):
            return True

    corruptions = {
        "dropped record line": "\n".join(lines[:500] + lines[501:]) + "\n",
        "truncated mid-line": original[: len(original) // 2],
        "mangled json": "\n".join(lines[:3] + [lines[3][:-5] + "!!!"] + lines[4:]) + "\n",
        "header count lie": "\n".join([lines[0].replace(":", ": 1 +", 1)] + lines[1:]) + "\n",
        "duplicated record": "\n".join(lines + [lines[1]]) + "\n",
        "empty file": "",
    }
    detection = {name: corrupt_detected(text) for name, text in corruptions.items()}

    blob = bank_path.read_text(encoding="utf-8")
    bank_detection = True
    for mutated_text in (blob[: len(blob) // 2], blob.replace('"metadata"', '"metadumb"', 1)):
        mutated = tmp_path / "mutated.json"
        mutated.write_text(mutated_text, encoding="utf-8")
        try:
            CaptionBank.load(mutated)
            bank_detection = False
        except (ManifestError, IntegrityError):
            pass

    all_detected = all(detection.values()) and bank_detection
    report(
        12,
        round_trip_ok and all_detected,
        f"10k round-trip lossless: {round_trip_ok}; corruption detected: "
        f"{sum(detection.values())}/{len(detection)} manifest cases, bank: {bank_detection}",
    )
