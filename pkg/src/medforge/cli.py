"""Command-line pipeline orchestration.

``forge <ingest|caption|train|eval|stats> --config <path> [--section.key=value ...]``

Each command reads the same TOML run config, takes a lock on the output
directory, writes its artifacts there, and records a run manifest with
the config hash, seed, and applied overrides. Exit codes: 0 success,
1 runtime failure, 2 invalid config. Commands are independent: ``eval``
consumes an existing checkpoint and never retrains.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import captions as captions_mod
from . import evaluation as eval_mod
from . import ingest as ingest_mod
from . import manifest as manifest_mod
from . import training as training_mod
from .config import RunConfig, load_config
from .encoders import ToyDualEncoder
from .errors import ConfigError, MedforgeError

_OVERRIDE_RE = re.compile(r"^--[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)+=.*$")

_DEFAULT_EMBED_DIM = 32
_DEFAULT_TEXT_BUCKETS = 256


class PhaseError(MedforgeError):
    """Wraps a failure with the module and operation it happened in."""

    def __init__(self, module: str, operation: str, cause: BaseException):
        super().__init__(f"{module}.{operation}: {cause}")
        self.module = module
        self.operation = operation
        self.cause = cause


@contextlib.contextmanager
def _phase(module: str, operation: str):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(module, operation, exc) from exc


@contextlib.contextmanager
def _output_lock(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise MedforgeError(
            f"another run owns {output_dir} (remove stale {lock_path} if no run is active)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _write_run_manifest(
    config: RunConfig, command: str, overrides: list[str], artifacts: list[Path]
) -> Path:
    doc = {
        "command": command,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "overrides": overrides,
        "artifacts": [str(p) for p in artifacts],
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path = config.output_dir / f"run_{command}.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _ingest_source(source) -> ingest_mod.IngestResult:
    table = ingest_mod.read_table(source.path)
    if source.kind == "label_only":
        return ingest_mod.ingest_label_only(table, source.schema)
    if source.kind == "image_text":
        return ingest_mod.ingest_image_text(table, source.schema)
    return ingest_mod.ingest_multilabel(table, source.schema)


def _load_bank_if_present(config: RunConfig) -> Optional[manifest_mod.CaptionBank]:
    bank_path = config.output_dir / "captions" / "bank.json"
    if bank_path.is_file():
        return manifest_mod.CaptionBank.load(bank_path)
    return None


def _cmd_ingest(config: RunConfig) -> list[Path]:
    if not config.sources:
        raise ConfigError("no sources configured")
    manifests_dir = config.output_dir / "manifests"
    manifests_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    parts = []
    for source in config.sources:
        with _phase("ingestors", f"ingest_{source.kind}"):
            result = _ingest_source(source)
        with _phase("ingestors", "dedup_and_validate"):
            kept, report = ingest_mod.dedup_and_validate(result.records)
        part = manifest_mod.DatasetManifest.from_records(kept)
        with _phase("manifest_core", "write_manifest"):
            path = manifest_mod.write_manifest(part, manifests_dir / f"{source.schema.source}.jsonl")
        artifacts.append(path)
        parts.append(part)
        print(
            f"ingested {source.schema.source}: {len(kept)} records "
            f"({result.skipped} skipped, {len(report.dropped_duplicates)} duplicates)"
        )
    with _phase("manifest_core", "merge_manifests"):
        merged = manifest_mod.merge_manifests(parts)
    with _phase("manifest_core", "write_manifest"):
        merged_path = manifest_mod.write_manifest(merged, manifests_dir / "merged.jsonl")
    artifacts.append(merged_path)
    artifacts.extend(_write_stats(config, merged))
    return artifacts


def _write_stats(config: RunConfig, merged: manifest_mod.DatasetManifest) -> list[Path]:
    bank = _load_bank_if_present(config)
    with _phase("manifest_core", "compute_stats"):
        stats = manifest_mod.compute_stats(merged, bank, require_bank=False)
    json_path = config.output_dir / "stats.json"
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stats.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    md_path = config.output_dir / "stats.md"
    md_path.write_text(stats.to_markdown(), encoding="utf-8")
    print(f"stats over {stats.total_records} records -> {json_path}")
    return [json_path, md_path]


def _collect_triplets(config: RunConfig) -> list[manifest_mod.LabelInfoTriplet]:
    triplets: list[manifest_mod.LabelInfoTriplet] = []
    seen: set[str] = set()
    for source in config.sources:
        if source.kind not in ("label_only", "multilabel"):
            continue
        with _phase("ingestors", f"ingest_{source.kind}"):
            result = _ingest_source(source)
        for triplet in result.triplets:
            if triplet.key not in seen:
                seen.add(triplet.key)
                triplets.append(triplet)
    if not triplets:
        raise MedforgeError("no label-only or multilabel sources to caption")
    return triplets


def _build_client(config: RunConfig) -> captions_mod.LlmClient:
    client_config = config.caption.client
    if client_config.kind == "mock":
        if not client_config.responses_dir:
            raise ConfigError("caption.client: responses_dir is required for the mock client")
        client: captions_mod.LlmClient = captions_mod.DirectoryMockClient(
            client_config.responses_dir, max_attempts=client_config.max_attempts
        )
    else:
        if not client_config.endpoint:
            raise ConfigError("caption.client: endpoint is required for the http client")
        client = captions_mod.HttpLlmClient(
            endpoint=client_config.endpoint,
            model=client_config.model,
            max_attempts=client_config.max_attempts,
            backoff_base=client_config.backoff_base,
        )
    cache_dir = config.output_dir / "captions" / "cache"
    return captions_mod.CachingClient(client, cache_dir)


def _cmd_caption(config: RunConfig) -> list[Path]:
    triplets = _collect_triplets(config)
    captions_dir = config.output_dir / "captions"
    captions_dir.mkdir(parents=True, exist_ok=True)
    if config.caption.mode == "offline":
        with _phase("caption_factory", "offline_caption_bank"):
            bank = captions_mod.offline_caption_bank(triplets, config.caption.m, config.seed)
    else:
        client = _build_client(config)
        with _phase("caption_factory", "generate_caption_bank"):
            bank = captions_mod.generate_caption_bank(
                triplets,
                config.caption.m,
                client,
                concurrency=config.caption.client.concurrency,
            )
    bank_path = bank.save(captions_dir / "bank.json")
    with _phase("caption_factory", "validate_caption_bank"):
        report = captions_mod.validate_caption_bank(bank, triplets)
    report_path = captions_dir / "validation.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    status = "ok" if report.ok else f"{len(report.failures)} entries flagged"
    print(f"caption bank: {len(bank.entries)} entries x {bank.m} captions ({status})")
    return [bank_path, report_path]


def _feature_store(config: RunConfig) -> ingest_mod.FeatureStore:
    stores = []
    for source in config.sources:
        if source.features is None:
            continue
        table = ingest_mod.read_table(source.path)
        features = ingest_mod.read_features(source.features)
        stores.append(
            ingest_mod.FeatureStore.from_rows(table, source.schema.image_column, features)
        )
    if not stores:
        raise MedforgeError("no source has a features file; training needs image features")
    store = stores[0]
    for other in stores[1:]:
        store = store.merge(other)
    return store


def _cmd_train(config: RunConfig) -> list[Path]:
    merged_path = config.output_dir / "manifests" / "merged.jsonl"
    if not merged_path.is_file():
        raise MedforgeError(f"{merged_path} does not exist; run `forge ingest` first")
    with _phase("manifest_core", "read_manifest"):
        merged = manifest_mod.read_manifest(merged_path)
    bank = _load_bank_if_present(config)
    with _phase("ingestors", "read_features"):
        features = _feature_store(config)

    train_dir = config.output_dir / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    encoders = ToyDualEncoder(
        feature_dim=features.dim,
        embed_dim=_DEFAULT_EMBED_DIM,
        buckets=_DEFAULT_TEXT_BUCKETS,
        seed=config.seed,
    )
    usable = sum(
        1 for r in merged.records if r.source_dataset not in config.training.source_exclusions
    )
    steps_per_epoch = max(1, usable // config.training.batch_size)
    metrics_path = train_dir / "metrics.jsonl"
    with _phase("trainer", "train_loop"):
        result = training_mod.train_loop(
            merged,
            bank,
            encoders,
            config.training,
            features,
            checkpoint_every=steps_per_epoch,
            checkpoint_dir=train_dir / "checkpoints",
            metrics_path=metrics_path,
        )
    final_path = train_dir / "final.ckpt"
    with _phase("trainer", "save_checkpoint"):
        training_mod.save_checkpoint(result.final_checkpoint, final_path)
    first, last = result.metrics[0]["loss"], result.metrics[-1]["loss"]
    print(f"trained {result.total_steps} steps: loss {first:.4f} -> {last:.4f}")
    return [metrics_path, final_path]


def _load_split(uri: str, classes: tuple[str, ...], base_dir: Path):
    csv_path = Path(uri)
    if not csv_path.is_absolute():
        csv_path = base_dir / csv_path
    table = ingest_mod.read_table(csv_path)
    features = ingest_mod.read_features(csv_path.with_suffix(".f32"))
    store = ingest_mod.FeatureStore.from_rows(table, "image", features)
    class_index = {name: i for i, name in enumerate(classes)}
    labels = []
    for row in table:
        if row["label"] not in class_index:
            raise MedforgeError(f"{csv_path}: label {row['label']!r} not in registry classes")
        labels.append(class_index[row["label"]])
    matrix = store.matrix_for([row["image"] for row in table])
    return matrix, np.asarray(labels, dtype=int)


def _cmd_eval(config: RunConfig) -> list[Path]:
    checkpoint_path = config.evaluation.checkpoint or config.output_dir / "train" / "final.ckpt"
    if not Path(checkpoint_path).is_file():
        raise MedforgeError(f"checkpoint {checkpoint_path} does not exist; run `forge train` first")
    if config.evaluation.registry is None:
        raise ConfigError("evaluation.registry is required for `forge eval`")
    with _phase("trainer", "load_checkpoint"):
        state = training_mod.load_checkpoint(checkpoint_path)
    encoder_state = {k: v for k, v in state.params.items() if k != "log_temperature"}
    encoders = ToyDualEncoder.from_state(encoder_state)
    pair = encoders.as_pair()

    with _phase("evaluator", "load_registry"):
        registry = eval_mod.load_registry(config.evaluation.registry)
    registry_dir = Path(config.evaluation.registry).parent
    zeroshot_results = []
    rows = []
    for entry in registry:
        with _phase("evaluator", "zeroshot_predict"):
            test_x, test_y = _load_split(entry.test_split_uri, entry.classes, registry_dir)
            test_embeddings = training_mod.l2_normalize_rows(pair.f_vision(test_x))
            templates = entry.effective_templates(config.evaluation.template_count)
            head = eval_mod.build_zeroshot_head(entry.classes, templates, pair.f_text)
            predictions, scores = eval_mod.zeroshot_predict(test_embeddings, head)
            if entry.metric == "ACC":
                value = eval_mod.compute_accuracy(predictions, test_y)
            else:
                if len(entry.classes) != 2:
                    raise MedforgeError(f"{entry.name}: AUC needs exactly two classes")
                value = eval_mod.compute_auc(scores[:, 1], test_y)
        result = eval_mod.EvalResult(
            dataset=entry.name, modality=entry.modality, metric=entry.metric,
            value=value, n=len(test_y),
        )
        zeroshot_results.append(result)
        rows.append({"kind": "zeroshot", **result.to_json_obj()})

        if config.evaluation.probe:
            with _phase("evaluator", "linear_probe"):
                train_x, train_y = _load_split(entry.train_split_uri, entry.classes, registry_dir)
                train_embeddings = training_mod.l2_normalize_rows(pair.f_vision(train_x))
                for fraction in config.evaluation.fractions:
                    probe = eval_mod.linear_probe(
                        train_embeddings,
                        train_y,
                        fraction,
                        config.seed,
                        test_features=test_embeddings,
                        test_labels=test_y,
                        metric=entry.metric,
                        dataset=entry.name,
                        modality=entry.modality,
                    )
                    rows.append({"kind": "probe", "fraction": fraction, **probe.to_json_obj()})

    eval_dir = config.output_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    results_path = eval_dir / "results.jsonl"
    with open(results_path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    with _phase("evaluator", "modality_report"):
        report = eval_mod.modality_report(zeroshot_results)
    report_path = eval_dir / "report.md"
    lines = ["# Zero-shot results by modality", "", report.to_markdown()]
    if config.evaluation.probe:
        lines += ["", "# Linear probe", "", "| dataset | fraction | metric | value |",
                  "| --- | ---: | --- | ---: |"]
        for row in rows:
            if row["kind"] == "probe":
                lines.append(
                    f"| {row['dataset']} | {row['fraction']} | {row['metric']} "
                    f"| {row['value']:.2f} |"
                )
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"evaluated {len(registry)} datasets: grand average {report.grand_average:.2f}")
    return [results_path, report_path]


def _cmd_stats(config: RunConfig) -> list[Path]:
    merged_path = config.output_dir / "manifests" / "merged.jsonl"
    if not merged_path.is_file():
        raise MedforgeError(f"{merged_path} does not exist; run `forge ingest` first")
    with _phase("manifest_core", "read_manifest"):
        merged = manifest_mod.read_manifest(merged_path)
    return _write_stats(config, merged)


_COMMANDS = {
    "ingest": _cmd_ingest,
    "caption": _cmd_caption,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Medical vision-language pipeline: ingest, caption, train, eval, stats.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the TOML run config")
    args, extras = parser.parse_known_args(argv)

    bad = [e for e in extras if not _OVERRIDE_RE.match(e)]
    if bad:
        print(f"error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return 2

    try:
        config, overrides = load_config(args.config, extras)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2

    try:
        with _output_lock(config.output_dir):
            artifacts = _COMMANDS[args.command](config)
            manifest_path = _write_run_manifest(config, args.command, overrides, artifacts)
            print(f"run manifest: {manifest_path}")
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except PhaseError as exc:
        print(f"error: {exc.module}.{exc.operation}: {exc.cause}", file=sys.stderr)
        return 1
    except MedforgeError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
