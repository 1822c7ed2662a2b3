"""Zero-shot classification, ranking metrics, and linear probing.

Zero-shot heads ensemble multiple prompt phrasings per class by averaging
their normalized text embeddings and re-normalizing the mean; prediction
is argmax cosine similarity. Accuracy serves balanced datasets, a
rank-based AUC serves imbalanced binary ones, and the dataset registry
decides which metric applies where. The linear probe fits a multinomial
logistic head on frozen embeddings at stratified data fractions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError
from .manifest import ModalityTag
from .training import l2_normalize_rows

PROBE_L2_PENALTY = 1e-4
PROBE_MAX_ITER = 1000
PROBE_GRAD_TOL = 1e-6


@dataclass(frozen=True)
class ZeroShotHead:
    """Per-class unit text embeddings built from ensembled prompts."""

    class_names: tuple[str, ...]
    weights: np.ndarray
    templates_used: tuple[str, ...]

    def __post_init__(self):
        if self.weights.shape[0] != len(self.class_names):
            raise ValueError("head rows must align with class_names")
        deviation = np.abs(np.linalg.norm(self.weights, axis=1) - 1.0)
        if deviation.max(initial=0.0) > 1e-6:
            raise ValueError("head rows must be unit-norm")


@dataclass(frozen=True)
class EvalResult:
    """One metric value for one dataset."""

    dataset: str
    modality: ModalityTag
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"metric value {self.value} outside [0, 100]")
        if self.metric not in ("ACC", "AUC"):
            raise ValueError(f"unknown metric {self.metric!r}")

    def to_json_obj(self) -> dict:
        return {
            "dataset": self.dataset,
            "modality": self.modality.value,
            "metric": self.metric,
            "value": self.value,
            "n": self.n,
        }


def build_zeroshot_head(
    class_names: Sequence[str],
    templates: Sequence[str],
    f_text: Callable[[Sequence[str]], np.ndarray],
) -> ZeroShotHead:
    """Ensemble templates into one unit-norm row per class.

    Every template is filled with the class name (``{}`` placeholder),
    embedded, normalized, and averaged; the mean is re-normalized.
    Duplicate filled prompts are collapsed before averaging - a repeated
    phrasing adds no information - which keeps an all-identical template
    multiset bit-identical to the single-template head. Templates whose
    embeddings cancel exactly are rejected.
    """
    if not class_names or not templates:
        raise ValueError("need at least one class and one template")
    for template in templates:
        if "{}" not in template:
            raise ValueError(f"template missing {{}} placeholder: {template!r}")
    rows = []
    for name in class_names:
        filled = list(dict.fromkeys(t.format(name) for t in templates))
        embedded = l2_normalize_rows(
            np.asarray(f_text(filled), dtype=np.float64), what="template embedding"
        )
        mean = embedded.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError(f"template embeddings cancel to zero mean for class {name!r}")
        rows.append(mean / norm)
    return ZeroShotHead(
        class_names=tuple(class_names),
        weights=np.asarray(rows),
        templates_used=tuple(templates),
    )


def zeroshot_predict(
    image_embeddings: np.ndarray, head: ZeroShotHead
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores against every class row and the argmax prediction.

    Ties break toward the lowest class index, so predictions are
    deterministic.
    """
    image_embeddings = np.asarray(image_embeddings, dtype=np.float64)
    if image_embeddings.ndim != 2 or image_embeddings.shape[1] != head.weights.shape[1]:
        raise ValueError(
            f"image embeddings of dim {image_embeddings.shape[-1]} do not match "
            f"head dim {head.weights.shape[1]}"
        )
    scores = image_embeddings @ head.weights.T
    return scores.argmax(axis=1), scores


def compute_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("cannot compute accuracy of empty inputs")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    return 100.0 * float((predictions == labels).sum()) / predictions.size


def compute_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUC: the fraction of positive-negative pairs ranked
    correctly, ties counting one half, as a percentage.

    Computed from tied ranks rather than explicit pair enumeration, so it
    stays O(n log n) while matching exhaustive pair counting exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be binary (0/1)")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both label values are present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # tied group shares the average of ranks i+1 .. j+1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    wins = rank_sum - n_pos * (n_pos + 1) / 2.0
    return 100.0 * wins / (n_pos * n_neg)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _fit_logistic_head(
    features: np.ndarray, labels: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression with a small fixed L2 penalty."""
    n, dim = features.shape
    one_hot = np.zeros((n, n_classes))
    one_hot[np.arange(n), labels] = 1.0

    def objective(flat: np.ndarray):
        w = flat[: dim * n_classes].reshape(dim, n_classes)
        b = flat[dim * n_classes :]
        probs = _softmax_rows(features @ w + b)
        loss = -np.log(probs[np.arange(n), labels] + 1e-300).mean()
        loss += 0.5 * PROBE_L2_PENALTY * float((w * w).sum())
        d_logits = (probs - one_hot) / n
        d_w = features.T @ d_logits + PROBE_L2_PENALTY * w
        d_b = d_logits.sum(axis=0)
        return loss, np.concatenate([d_w.ravel(), d_b])

    x0 = np.zeros(dim * n_classes + n_classes)
    result = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": PROBE_MAX_ITER, "gtol": PROBE_GRAD_TOL, "ftol": 0.0},
    )
    w = result.x[: dim * n_classes].reshape(dim, n_classes)
    b = result.x[dim * n_classes :]
    return w, b


def stratified_subsample(
    labels: np.ndarray, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Indices of a per-class subsample at the given fraction.

    Each class contributes round(fraction * class count) samples, at
    least one. Infeasible stratifications (fraction * n below the class
    count) are an error.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if fraction * len(labels) < len(classes):
        raise ValueError(
            f"stratification infeasible: fraction {fraction} of {len(labels)} samples "
            f"cannot cover {len(classes)} classes"
        )
    chosen = []
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        k = max(1, int(round(fraction * len(members))))
        picked = rng.choice(members, size=min(k, len(members)), replace=False)
        chosen.append(np.sort(picked))
    return np.concatenate(chosen)


def linear_probe(
    features: np.ndarray,
    labels: Sequence[int],
    fraction: float,
    seed: int,
    *,
    test_features: np.ndarray,
    test_labels: Sequence[int],
    metric: str = "ACC",
    dataset: str = "probe",
    modality: ModalityTag = ModalityTag.OTHER,
) -> EvalResult:
    """Fit a linear head on a stratified fraction of frozen embeddings and
    score it on the held-out test split with the dataset's metric."""
    features = np.asarray(features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    test_labels = np.asarray(test_labels, dtype=int)
    if not np.isfinite(features).all() or not np.isfinite(test_features).all():
        raise ValueError("probe features must be finite")

    rng = np.random.default_rng(seed)
    subset = stratified_subsample(labels, fraction, rng)
    n_classes = int(labels.max()) + 1
    w, b = _fit_logistic_head(features[subset], labels[subset], n_classes)

    logits = test_features @ w + b
    if metric == "ACC":
        value = compute_accuracy(logits.argmax(axis=1), test_labels)
    elif metric == "AUC":
        if n_classes != 2:
            raise ValueError("AUC probing requires exactly two classes")
        probs = _softmax_rows(logits)
        value = compute_auc(probs[:, 1], test_labels)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return EvalResult(
        dataset=dataset, modality=modality, metric=metric, value=value, n=len(test_labels)
    )


@dataclass(frozen=True)
class ModalityReport:
    """Unweighted per-modality means plus the dataset-level grand average."""

    modality_means: Mapping[ModalityTag, float]
    grand_average: float
    n_datasets: int

    def to_markdown(self) -> str:
        lines = ["| modality | mean | datasets |", "| --- | ---: | ---: |"]
        for tag in sorted(self.modality_means, key=lambda t: t.value):
            lines.append(f"| {tag.value} | {self.modality_means[tag]:.2f} | |")
        lines.append(f"| **average** | **{self.grand_average:.2f}** | {self.n_datasets} |")
        return "\n".join(lines) + "\n"


def modality_report(results: Sequence[EvalResult]) -> ModalityReport:
    """Average metric values per modality and across all datasets.

    The grand average weights every dataset equally, regardless of its
    modality group's size.
    """
    by_modality: dict[ModalityTag, list[float]] = {}
    for result in results:
        by_modality.setdefault(result.modality, []).append(result.value)
    means = {tag: sum(vals) / len(vals) for tag, vals in by_modality.items()}
    grand = sum(r.value for r in results) / len(results) if results else 0.0
    return ModalityReport(
        modality_means=means, grand_average=grand, n_datasets=len(results)
    )


# ---------------------------------------------------------------------------
# Dataset registry
# ---------------------------------------------------------------------------

_HUMAN_MODALITY = {
    ModalityTag.XRAY: "X-ray",
    ModalityTag.CT: "CT",
    ModalityTag.MRI: "MRI",
    ModalityTag.US: "ultrasound",
    ModalityTag.HISTOPATHOLOGY: "histopathology",
    ModalityTag.FUNDUS: "fundus",
    ModalityTag.OTHER: "medical",
}


def default_templates(modality: ModalityTag) -> list[str]:
    """Fallback prompt templates when a registry entry lists none."""
    return [f"A medical {_HUMAN_MODALITY[modality]} image showing {{}}."]


@dataclass(frozen=True)
class DatasetRegistryEntry:
    """One evaluation dataset: where its splits live and how to score it."""

    name: str
    modality: ModalityTag
    metric: str
    classes: tuple[str, ...]
    test_split_uri: str
    train_split_uri: str
    templates: tuple[str, ...] = ()

    def effective_templates(self, template_count: Optional[int] = None) -> list[str]:
        templates = list(self.templates) or default_templates(self.modality)
        if template_count is not None:
            if template_count < 1:
                raise ValueError("template_count must be >= 1")
            templates = templates[:template_count]
        return templates


def load_registry(path: Union[str, Path]) -> list[DatasetRegistryEntry]:
    """Load the evaluation dataset registry (a JSON array of entries)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load dataset registry {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: registry must be a JSON array")
    allowed = {
        "name", "modality", "metric", "classes", "test_split_uri", "train_split_uri",
        "templates",
    }
    entries = []
    for i, obj in enumerate(doc):
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"{path}: entry {i}: unknown keys {sorted(unknown)}")
        try:
            entries.append(
                DatasetRegistryEntry(
                    name=obj["name"],
                    modality=ModalityTag(obj["modality"]),
                    metric=obj["metric"],
                    classes=tuple(obj["classes"]),
                    test_split_uri=obj["test_split_uri"],
                    train_split_uri=obj["train_split_uri"],
                    templates=tuple(obj.get("templates", ())),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: entry {i}: {exc}") from exc
        if entries[-1].metric not in ("ACC", "AUC"):
            raise ConfigError(f"{path}: entry {i}: metric must be ACC or AUC")
    return entries
