"""Shared helpers: assemble a trainable corpus from the synthetic fixture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from medforge.captions import offline_caption_bank
from medforge.encoders import ToyDualEncoder
from medforge.evaluation import build_zeroshot_head, compute_accuracy, zeroshot_predict
from medforge.ingest import FeatureStore, SchemaMap, generate_fixture, ingest_label_only
from medforge.manifest import CaptionBank, DatasetManifest, LabelInfoTriplet
from medforge.training import TrainingConfig, l2_normalize_rows, train_loop


@dataclass
class Corpus:
    fixture: object
    manifest: DatasetManifest
    store: FeatureStore
    triplets: list[LabelInfoTriplet]


def fixture_schema(source: str) -> SchemaMap:
    return SchemaMap(
        source=source,
        image_column="image",
        label_column="label",
        modality_column="modality",
        anatomy_column="anatomy",
    )


def build_corpus(modalities, classes, rows, seed, noise=0.1) -> Corpus:
    fixture = generate_fixture(modalities, classes, rows, seed=seed, noise=noise)
    records, triplets = [], []
    for source in fixture.sources:
        result = ingest_label_only(fixture.rows_for_source(source), fixture_schema(source))
        records.extend(result.records)
        triplets.extend(result.triplets)
    return Corpus(
        fixture=fixture,
        manifest=DatasetManifest.from_records(records),
        store=FeatureStore.from_rows(fixture.rows, "image", fixture.features),
        triplets=triplets,
    )


def train_toy(
    corpus: Corpus,
    bank: CaptionBank,
    *,
    seed: int,
    batch_size: int = 36,
    learning_rate: float = 0.05,
    warmup_iters: int = 10,
    epochs: int = 20,
    temperature_init: float = 0.07,
    source_exclusions: tuple[str, ...] = (),
    encoder_seed: int = 5,
    **loop_kwargs,
):
    encoders = ToyDualEncoder(
        feature_dim=corpus.store.dim, embed_dim=32, buckets=256, seed=encoder_seed
    )
    config = TrainingConfig(
        batch_size=batch_size,
        learning_rate=learning_rate,
        warmup_iters=warmup_iters,
        epochs=epochs,
        temperature_init=temperature_init,
        temperature_learnable=True,
        seed=seed,
        source_exclusions=source_exclusions,
    )
    return train_loop(corpus.manifest, bank, encoders, config, corpus.store, **loop_kwargs)


def zeroshot_accuracy_for_source(encoders, test_fixture, source, templates) -> float:
    pair = encoders.as_pair()
    rows = test_fixture.rows_for_source(source)
    indices = [i for i, r in enumerate(test_fixture.rows) if r["source"] == source]
    classes = sorted({r["label"] for r in rows})
    embeddings = l2_normalize_rows(pair.f_vision(test_fixture.features[indices]))
    head = build_zeroshot_head(classes, templates, pair.f_text)
    predictions, _ = zeroshot_predict(embeddings, head)
    labels = np.array([classes.index(r["label"]) for r in rows])
    return compute_accuracy(predictions, labels)


@pytest.fixture(scope="session")
def trained_three_modality():
    """One seeded three-modality training run shared by slow tests."""
    corpus = build_corpus(["xray", "ct", "mri"], 3, 40, seed=11)
    bank = offline_caption_bank(corpus.triplets, 10, seed=3)
    result = train_toy(corpus, bank, seed=7)
    return corpus, bank, result


# The CLI tests and the acceptance suite run against the demo workspace.
from medforge.demo import build_workspace  # noqa: E402,F401
