"""Run configuration: strict TOML parsing plus dotted-key overrides.

Unknown keys are rejected everywhere so typos fail loudly instead of
silently falling back to defaults. The top-level seed is the only seed:
it propagates into caption generation and training. Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .ingest import SchemaMap
from .training import TrainingConfig

SOURCE_KINDS = ("label_only", "image_text", "multilabel")


@dataclass(frozen=True)
class ClientConfig:
    """Completion backend settings; credentials come from the environment."""

    kind: str = "mock"
    endpoint: str = ""
    model: str = ""
    responses_dir: str = ""
    max_attempts: int = 3
    backoff_base: float = 0.5
    concurrency: int = 1


@dataclass(frozen=True)
class CaptionConfig:
    m: int = 10
    mode: str = "offline"
    client: ClientConfig = field(default_factory=ClientConfig)


@dataclass(frozen=True)
class SourceConfig:
    path: Path
    kind: str
    schema: SchemaMap
    features: Optional[Path] = None


@dataclass(frozen=True)
class EvaluationConfig:
    registry: Optional[Path] = None
    template_count: Optional[int] = None
    fractions: tuple[float, ...] = (0.01, 0.10, 1.00)
    checkpoint: Optional[Path] = None
    probe: bool = True


@dataclass(frozen=True)
class RunConfig:
    output_dir: Path
    seed: int
    sources: tuple[SourceConfig, ...]
    caption: CaptionConfig
    training: TrainingConfig
    evaluation: EvaluationConfig

    def config_hash(self) -> str:
        def jsonable(obj: Any):
            if isinstance(obj, Path):
                return str(obj)
            if isinstance(obj, (list, tuple)):
                return [jsonable(o) for o in obj]
            if hasattr(obj, "__dataclass_fields__"):
                return {
                    name: jsonable(getattr(obj, name)) for name in obj.__dataclass_fields__
                }
            return obj

        blob = json.dumps(jsonable(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _reject_unknown(section: dict, allowed: Sequence[str], where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _build_schema(raw: dict, default_source: str, where: str) -> SchemaMap:
    allowed = (
        "source", "image_column", "label_column", "caption_column",
        "modality", "modality_column", "anatomy_column",
    )
    _reject_unknown(raw, allowed, where)
    label_column = raw.get("label_column")
    if isinstance(label_column, list):
        label_column = tuple(label_column)
    try:
        return SchemaMap(
            source=raw.get("source", default_source),
            image_column=raw["image_column"],
            label_column=label_column,
            caption_column=raw.get("caption_column"),
            modality=raw.get("modality"),
            modality_column=raw.get("modality_column"),
            anatomy_column=raw.get("anatomy_column"),
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: missing required key {exc}") from None
    except Exception as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_source(raw: dict, base_dir: Path, index: int) -> SourceConfig:
    where = f"sources[{index}]"
    _reject_unknown(raw, ("path", "kind", "schema", "features"), where)
    try:
        path = base_dir / raw["path"]
        kind = raw["kind"]
    except KeyError as exc:
        raise ConfigError(f"{where}: missing required key {exc}") from None
    if kind not in SOURCE_KINDS:
        raise ConfigError(f"{where}: kind must be one of {SOURCE_KINDS}, got {kind!r}")
    schema = _build_schema(raw.get("schema", {}), default_source=Path(path).stem, where=f"{where}.schema")
    features = base_dir / raw["features"] if "features" in raw else None
    return SourceConfig(path=path, kind=kind, schema=schema, features=features)


def _build_caption(raw: dict, where: str = "caption") -> CaptionConfig:
    _reject_unknown(raw, ("M", "mode", "client"), where)
    mode = raw.get("mode", "offline")
    if mode not in ("offline", "llm"):
        raise ConfigError(f"{where}: mode must be 'offline' or 'llm', got {mode!r}")
    m = raw.get("M", 10)
    if not isinstance(m, int) or m < 1:
        raise ConfigError(f"{where}: M must be a positive integer")
    client_raw = raw.get("client", {})
    _reject_unknown(
        client_raw,
        ("kind", "endpoint", "model", "responses_dir", "max_attempts", "backoff_base", "concurrency"),
        f"{where}.client",
    )
    client = ClientConfig(
        kind=client_raw.get("kind", "mock"),
        endpoint=client_raw.get("endpoint", ""),
        model=client_raw.get("model", ""),
        responses_dir=client_raw.get("responses_dir", ""),
        max_attempts=int(client_raw.get("max_attempts", 3)),
        backoff_base=float(client_raw.get("backoff_base", 0.5)),
        concurrency=int(client_raw.get("concurrency", 1)),
    )
    if client.kind not in ("mock", "http"):
        raise ConfigError(f"{where}.client: kind must be 'mock' or 'http'")
    return CaptionConfig(m=m, mode=mode, client=client)


def _build_training(raw: dict, seed: int) -> TrainingConfig:
    allowed = (
        "batch_size", "learning_rate", "warmup_iters", "epochs",
        "temperature_init", "temperature_learnable", "source_exclusions",
    )
    if "seed" in raw:
        raise ConfigError("training: seed is set at the top level, not per section")
    _reject_unknown(raw, allowed, "training")
    exclusions = raw.get("source_exclusions", ())
    if isinstance(exclusions, str):
        exclusions = [exclusions]
    try:
        return TrainingConfig(
            batch_size=raw.get("batch_size", TrainingConfig.batch_size),
            learning_rate=raw.get("learning_rate", TrainingConfig.learning_rate),
            warmup_iters=raw.get("warmup_iters", TrainingConfig.warmup_iters),
            epochs=raw.get("epochs", TrainingConfig.epochs),
            temperature_init=raw.get("temperature_init", TrainingConfig.temperature_init),
            temperature_learnable=raw.get(
                "temperature_learnable", TrainingConfig.temperature_learnable
            ),
            seed=seed,
            source_exclusions=tuple(exclusions),
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from None


def _build_evaluation(raw: dict, base_dir: Path) -> EvaluationConfig:
    allowed = ("registry", "template_count", "fractions", "checkpoint", "probe")
    _reject_unknown(raw, allowed, "evaluation")
    fractions = raw.get("fractions", [0.01, 0.10, 1.00])
    if isinstance(fractions, (int, float)):
        fractions = [fractions]
    for f in fractions:
        if not 0 < float(f) <= 1:
            raise ConfigError(f"evaluation: fraction {f} outside (0, 1]")
    template_count = raw.get("template_count")
    if template_count is not None and (not isinstance(template_count, int) or template_count < 1):
        raise ConfigError("evaluation: template_count must be a positive integer")
    return EvaluationConfig(
        registry=base_dir / raw["registry"] if "registry" in raw else None,
        template_count=template_count,
        fractions=tuple(float(f) for f in fractions),
        checkpoint=base_dir / raw["checkpoint"] if "checkpoint" in raw else None,
        probe=bool(raw.get("probe", True)),
    )


def parse_override(text: str) -> tuple[list[str], Any]:
    """Parse ``--section.key=value`` into a key path and a TOML-typed value."""
    body = text[2:] if text.startswith("--") else text
    if "=" not in body:
        raise ConfigError(f"override {text!r} must look like --section.key=value")
    dotted, raw_value = body.split("=", 1)
    keys = dotted.split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override {text!r} must name a section and key")
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value
    return keys, value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> list[str]:
    """Apply dotted overrides in order (last one wins); returns the applied list."""
    applied = []
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for key in keys[:-1]:
            nxt = node.get(key)
            if nxt is None:
                nxt = node[key] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {key!r} is not a section")
            node = nxt
        node[keys[-1]] = value
        applied.append(text if text.startswith("--") else f"--{text}")
    return applied


def load_config(path, overrides: Sequence[str] = ()) -> tuple[RunConfig, list[str]]:
    """Parse and validate a run config; returns it with the applied overrides."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file does not exist: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc

    applied = apply_overrides(raw, overrides)
    _reject_unknown(
        raw, ("output_dir", "seed", "sources", "caption", "training", "evaluation"), str(path)
    )
    if "output_dir" not in raw:
        raise ConfigError(f"{path}: output_dir is required")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"{path}: seed must be an integer")

    base_dir = path.parent
    sources = tuple(
        _build_source(s, base_dir, i) for i, s in enumerate(raw.get("sources", []))
    )
    config = RunConfig(
        output_dir=base_dir / raw["output_dir"],
        seed=seed,
        sources=sources,
        caption=_build_caption(raw.get("caption", {})),
        training=_build_training(raw.get("training", {}), seed),
        evaluation=_build_evaluation(raw.get("evaluation", {}), base_dir),
    )
    return config, applied
