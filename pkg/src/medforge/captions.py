"""Caption bank construction for label-only sources.

Each label triplet is turned into a generation prompt; a pluggable
completion client returns multiple candidate captions which are parsed
from a numbered list, validated, and stored as the triplet's caption
bank entry. A deterministic offline template engine provides the same
interface without any external service, for reproducible desk-scale runs.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import CaptionGenerationError
from .manifest import CaptionBank, LabelInfoTriplet

DEFAULT_CAPTIONS_PER_TRIPLET = 10

# Timestamp embedded in offline banks: fixed so seeded runs are byte-stable.
OFFLINE_BANK_TIMESTAMP = "1970-01-01T00:00:00+00:00"

DEFAULT_WORD_BOUNDS = (4, 80)

PROMPT_HEADER = "Generate a caption for a medical image containing the following information:"

DEFAULT_STYLE_DIRECTIVES = (
    "Write as a medical professional would, using precise clinical nomenclature, "
    "and keep the stated disease or category name in every caption. "
    "Produce {m} distinct captions in diverse tones and styles, formatted as a "
    "numbered list (1. through {m}.), one caption per line."
)


@dataclass(frozen=True)
class PromptSpec:
    """Everything needed to build one generation prompt."""

    triplet: LabelInfoTriplet
    m: int = DEFAULT_CAPTIONS_PER_TRIPLET
    style_directives: str = DEFAULT_STYLE_DIRECTIVES

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("caption count m must be >= 1")


def build_prompt(spec: PromptSpec) -> str:
    """Render the generation prompt for one triplet.

    The field block names the disease/category, the modality, and - only
    when the triplet has one - the organ; the style directives then ask
    for ``m`` diversified captions. Pure function of its input.
    """
    triplet = spec.triplet
    lines = [
        PROMPT_HEADER,
        f"Disease/Category Name: {triplet.category_label},",
        f"Modality Name: {triplet.modality}" + ("," if triplet.anatomy else ""),
    ]
    if triplet.anatomy:
        lines.append(f"Organ Name: {triplet.anatomy}")
    directives = spec.style_directives.format(m=spec.m)
    return "\n".join(lines) + "\n\n" + directives


class LlmClient:
    """Completion backend interface.

    ``max_attempts`` is the total per-triplet request budget (transport
    errors, short parses, and validation failures all draw from it);
    ``backoff_base`` scales the exponential sleep between attempts.
    Implementations should be deterministic under a fixed-seed or
    zero-temperature configuration where the backing service allows it,
    and must be thread-safe when used with concurrency > 1.
    """

    max_attempts: int = 3
    backoff_base: float = 0.0

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


def prompt_cache_key(prompt: str) -> str:
    """Stable filename stem for a prompt (covers triplet, m, and style)."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class DirectoryMockClient(LlmClient):
    """Serves canned responses from ``<directory>/<prompt hash>.txt``."""

    def __init__(self, directory: Union[str, Path], max_attempts: int = 3):
        self.directory = Path(directory)
        self.max_attempts = max_attempts
        self.backoff_base = 0.0

    def complete(self, prompt: str) -> str:
        path = self.directory / f"{prompt_cache_key(prompt)}.txt"
        if not path.is_file():
            raise CaptionGenerationError(f"no canned response at {path}")
        return path.read_text(encoding="utf-8")


class HttpLlmClient(LlmClient):
    """Minimal JSON-over-HTTP completion client.

    Posts ``{"model": ..., "prompt": ...}`` to the endpoint and expects a
    ``{"text": ...}`` response. The bearer token is read from the
    MEDFORGE_LLM_API_KEY environment variable, never from config files.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import json as _json
        import os
        import urllib.request

        body = _json.dumps({"model": self.model, "prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        token = os.environ.get("MEDFORGE_LLM_API_KEY")
        if token:
            request.add_header("Authorization", f"Bearer {token}")
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            payload = _json.loads(response.read().decode("utf-8"))
        return payload["text"]


class CachingClient(LlmClient):
    """Caches an inner client's responses on disk, keyed by prompt hash.

    Because the prompt is a pure function of (triplet, m, style), the
    prompt hash is exactly the dedupe key that prevents repeat paid calls
    across runs.
    """

    def __init__(self, inner: LlmClient, cache_dir: Union[str, Path]):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.max_attempts = inner.max_attempts
        self.backoff_base = inner.backoff_base

    def complete(self, prompt: str) -> str:
        path = self.cache_dir / f"{prompt_cache_key(prompt)}.txt"
        if path.is_file():
            return path.read_text(encoding="utf-8")
        response = self.inner.complete(prompt)
        path.write_text(response, encoding="utf-8")
        return response


_NUMBERED_LINE = re.compile(r"^\s*\d+[.)]\s*(\S.*?)\s*$")


def parse_numbered_list(text: str) -> list[str]:
    """Extract the items of a numbered list, ignoring surrounding prose."""
    items = []
    for line in text.splitlines():
        match = _NUMBERED_LINE.match(line)
        if match:
            items.append(match.group(1))
    return items


def _entry_failures(
    label: str,
    captions: Sequence[str],
    aliases: Mapping[str, Sequence[str]],
    word_bounds: tuple[int, int],
) -> list[str]:
    """Rule checks for one bank entry; returns human-readable failures."""
    failures = []
    accepted = [label.lower()] + [a.lower() for a in aliases.get(label, [])]
    lo, hi = word_bounds
    seen: set[str] = set()
    for j, caption in enumerate(captions):
        if not caption.strip():
            failures.append(f"caption {j}: empty")
            continue
        lowered = caption.lower()
        if not any(term in lowered for term in accepted):
            failures.append(f"caption {j}: does not mention label {label!r}")
        words = len(caption.split())
        if not lo <= words <= hi:
            failures.append(f"caption {j}: word count {words} outside [{lo}, {hi}]")
        if caption in seen:
            failures.append(f"caption {j}: duplicate of an earlier caption")
        seen.add(caption)
    return failures


@dataclass
class ValidationReport:
    """Per-triplet-key rule failures; empty means the bank passed."""

    failures: dict[str, list[str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json_obj(self) -> dict:
        return {"ok": self.ok, "failures": {k: list(v) for k, v in sorted(self.failures.items())}}


def validate_caption_bank(
    bank: CaptionBank,
    triplets: Sequence[LabelInfoTriplet],
    *,
    aliases: Optional[Mapping[str, Sequence[str]]] = None,
    word_bounds: tuple[int, int] = DEFAULT_WORD_BOUNDS,
) -> ValidationReport:
    """Check every bank entry mentions its label, stays within the word
    bounds, and has no empty or duplicate captions. Pure report; the bank
    is never mutated."""
    aliases = aliases or {}
    labels_by_key = {t.key: t.category_label for t in triplets}
    report = ValidationReport()
    for key, captions in bank.entries.items():
        if key not in labels_by_key:
            report.failures[key] = ["no triplet supplied for this key"]
            continue
        failures = _entry_failures(labels_by_key[key], captions, aliases, word_bounds)
        if failures:
            report.failures[key] = failures
    return report


def _dedupe_triplets(triplets: Sequence[LabelInfoTriplet]) -> list[LabelInfoTriplet]:
    seen: set[str] = set()
    out = []
    for t in triplets:
        if t.key not in seen:
            seen.add(t.key)
            out.append(t)
    return out


def _generate_entry(
    triplet: LabelInfoTriplet,
    m: int,
    client: LlmClient,
    style_directives: str,
    aliases: Mapping[str, Sequence[str]],
    word_bounds: tuple[int, int],
) -> tuple[str, ...]:
    prompt = build_prompt(PromptSpec(triplet=triplet, m=m, style_directives=style_directives))
    attempts = max(1, client.max_attempts)
    last_problem = "no attempts made"
    for attempt in range(attempts):
        if attempt > 0 and client.backoff_base > 0:
            time.sleep(client.backoff_base * 2 ** (attempt - 1))
        try:
            response = client.complete(prompt)
        except Exception as exc:
            last_problem = f"client error: {exc}"
            continue
        captions = parse_numbered_list(response)
        if len(captions) < m:
            last_problem = f"parsed only {len(captions)} of {m} captions"
            continue
        captions = captions[:m]
        failures = _entry_failures(triplet.category_label, captions, aliases, word_bounds)
        if failures:
            last_problem = f"validation failed: {'; '.join(failures)}"
            continue
        return tuple(captions)
    raise CaptionGenerationError(
        f"caption generation failed for triplet key {triplet.key!r} "
        f"after {attempts} attempts: {last_problem}"
    )


def generate_caption_bank(
    triplets: Sequence[LabelInfoTriplet],
    m: int,
    client: LlmClient,
    *,
    style_directives: str = DEFAULT_STYLE_DIRECTIVES,
    aliases: Optional[Mapping[str, Sequence[str]]] = None,
    word_bounds: tuple[int, int] = DEFAULT_WORD_BOUNDS,
    concurrency: int = 1,
    generator_name: str = "llm",
    created: Optional[str] = None,
) -> CaptionBank:
    """Request m captions per distinct triplet from the client.

    Triplets sharing a canonical key are generated once. Each attempt
    must parse to at least m numbered items that pass the bank validation
    rules; otherwise the triplet is re-requested until the client's
    attempt budget runs out. Requests may run concurrently; assembly is
    keyed and sorted, so the bank does not depend on completion order.
    """
    if m < 1:
        raise ValueError("caption count m must be >= 1")
    aliases = aliases or {}
    distinct = _dedupe_triplets(triplets)

    def job(triplet: LabelInfoTriplet) -> tuple[str, tuple[str, ...]]:
        return triplet.key, _generate_entry(
            triplet, m, client, style_directives, aliases, word_bounds
        )

    if concurrency > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(job, distinct))
    else:
        results = [job(t) for t in distinct]

    entries = dict(sorted(results))
    if created is None:
        from datetime import datetime, timezone

        created = datetime.now(timezone.utc).isoformat()
    return CaptionBank(entries=entries, generator=generator_name, created=created, m=m)


# ---------------------------------------------------------------------------
# Offline template engine
# ---------------------------------------------------------------------------

_NOUNS = ("image", "scan", "study")
_VERBS = ("showing", "demonstrating", "consistent with")

_PATTERNS_WITH_ANATOMY = (
    "A medical {modality} {noun} {verb} {label} in the {anatomy}.",
    "{modality} {noun} of the {anatomy} {verb} {label}.",
    "This {modality} {noun} of the {anatomy} is notable for {label}.",
)
_PATTERNS_NO_ANATOMY = (
    "A medical {modality} {noun} {verb} {label}.",
    "{modality} {noun} {verb} {label}.",
    "This {modality} {noun} is notable for {label}.",
)


def _grammar_expansions(triplet: LabelInfoTriplet) -> list[str]:
    """All caption variants for a triplet, in a fixed deterministic order.

    The first variant is the plain fixed template (image + showing), which
    is what an m=1 bank degenerates to.
    """
    patterns = _PATTERNS_WITH_ANATOMY if triplet.anatomy else _PATTERNS_NO_ANATOMY
    slots = {
        "modality": triplet.modality.strip(),
        "label": triplet.category_label.strip(),
        "anatomy": (triplet.anatomy or "").strip(),
    }
    out = []
    seen: set[str] = set()
    for pattern in patterns:
        for noun in _NOUNS:
            if "{verb}" in pattern:
                for verb in _VERBS:
                    text = pattern.format(noun=noun, verb=verb, **slots)
                    if text not in seen:
                        seen.add(text)
                        out.append(text)
            else:
                text = pattern.format(noun=noun, **slots)
                if text not in seen:
                    seen.add(text)
                    out.append(text)
    return out


def _key_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}|{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def offline_caption_bank(
    triplets: Sequence[LabelInfoTriplet], m: int, seed: int
) -> CaptionBank:
    """Deterministic grammar-expanded caption bank, no external service.

    Entry j=0 is always the fixed base template (independent of the
    seed); the remaining m-1 captions are a seeded draw from the other
    grammar expansions, so all captions within an entry are pairwise
    distinct and the whole bank is reproducible bit-for-bit.
    """
    if m < 1:
        raise ValueError("caption count m must be >= 1")
    entries: dict[str, tuple[str, ...]] = {}
    for triplet in sorted(_dedupe_triplets(triplets), key=lambda t: t.key):
        expansions = _grammar_expansions(triplet)
        if m > len(expansions):
            raise ValueError(
                f"m={m} exceeds offline grammar capacity {len(expansions)} "
                f"for triplet key {triplet.key!r}"
            )
        captions = [expansions[0]]
        if m > 1:
            rng = np.random.default_rng(_key_seed(seed, triplet.key))
            extra = rng.choice(len(expansions) - 1, size=m - 1, replace=False)
            captions.extend(expansions[1 + int(i)] for i in extra)
        entries[triplet.key] = tuple(captions)
    return CaptionBank(
        entries=entries,
        generator="offline-template-engine",
        created=OFFLINE_BANK_TIMESTAMP,
        m=m,
    )
