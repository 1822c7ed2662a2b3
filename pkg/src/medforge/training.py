"""Dual-encoder contrastive training.

The objective is a symmetric cross-entropy over the image-text cosine
similarity matrix scaled by a temperature: each direction (image-to-text
and text-to-image) averages -log softmax at the matched diagonal with a
1/(2N) factor, and the total loss is their sum. Gradients are computed
analytically in closed form, so training needs no autodiff framework.

Determinism contract: every random stream (epoch shuffles, per-batch
caption draws) is derived from the run seed and the (epoch, batch)
coordinates, never from mutable generator state carried across steps.
That makes a seeded run bit-reproducible and lets checkpoint resume
replay the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .encoders import ToyDualEncoder
from .errors import IntegrityError, TrainingError
from .manifest import BankRef, CaptionBank, DatasetManifest, InlineCaption, SampleRecord

TEMPERATURE_MIN = 1e-2
TEMPERATURE_MAX = 1e2

_CHECKPOINT_MAGIC = b"MEDFORGE"


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one training run.

    Defaults mirror the reference recipe this pipeline scales down from:
    learning rate 5e-5 with a 2k-iteration linear warmup, 10 epochs, and
    128 pairs per step. ``source_exclusions`` removes whole source
    datasets before batching, which is how modality-dropout experiments
    are expressed.
    """

    batch_size: int = 128
    learning_rate: float = 5e-5
    warmup_iters: int = 2000
    epochs: int = 10
    temperature_init: float = 0.07
    temperature_learnable: bool = True
    seed: int = 0
    source_exclusions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        object.__setattr__(self, "source_exclusions", tuple(self.source_exclusions))

    def config_hash(self) -> str:
        doc = dataclasses.asdict(self)
        doc["source_exclusions"] = list(doc["source_exclusions"])
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class EmbeddingBatch:
    """Row-aligned image and text embeddings for one batch of pairs."""

    image_embeddings: np.ndarray
    text_embeddings: np.ndarray

    def __post_init__(self):
        v, t = np.asarray(self.image_embeddings), np.asarray(self.text_embeddings)
        if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
            raise ValueError(
                f"embedding matrices must share an (n, dim) shape, got {v.shape} and {t.shape}"
            )
        self.image_embeddings = v.astype(np.float64)
        self.text_embeddings = t.astype(np.float64)

    @property
    def n(self) -> int:
        return self.image_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.image_embeddings.shape[1]


def sample_caption(
    record: SampleRecord, bank: Optional[CaptionBank], rng: np.random.Generator
) -> str:
    """Resolve a record's caption: inline text as-is, bank entries by a
    uniform draw over the entry's captions. Inline records leave the rng
    untouched."""
    if isinstance(record.payload, InlineCaption):
        return record.payload.caption
    if bank is None:
        raise ValueError(
            f"record {record.record_id!r} references a caption bank but none was supplied"
        )
    captions = bank.captions_for(record.payload.triplet_key)
    return captions[int(rng.integers(len(captions)))]


def l2_normalize_rows(matrix: np.ndarray, *, what: str = "embedding") -> np.ndarray:
    """Scale every row to unit L2 norm; zero rows are an error."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm raw {what} at batch index {int(zero[0])}")
    return matrix / norms[:, None]


def embed_and_normalize(image_features: np.ndarray, captions: Sequence[str], encoders) -> EmbeddingBatch:
    """Run both encoders and L2-normalize the embeddings row-wise.

    Accepts anything exposing ``f_vision``/``f_text`` (an EncoderPair) or
    the trainable reference encoders.
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    if image_features.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if image_features.shape[0] != len(captions):
        raise ValueError(
            f"batch has {image_features.shape[0]} images but {len(captions)} captions"
        )
    if hasattr(encoders, "f_vision"):
        raw_v = encoders.f_vision(image_features)
        raw_t = encoders.f_text(list(captions))
    else:
        raw_v, _ = encoders.vision_forward(image_features)
        raw_t, _ = encoders.text_forward(list(captions))
    return EmbeddingBatch(
        image_embeddings=l2_normalize_rows(raw_v, what="image embedding"),
        text_embeddings=l2_normalize_rows(raw_t, what="text embedding"),
    )


def _check_loss_inputs(batch: EmbeddingBatch, temperature: float, norm_tolerance: float) -> None:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    for name, rows in (
        ("image", batch.image_embeddings),
        ("text", batch.text_embeddings),
    ):
        deviation = np.abs(np.linalg.norm(rows, axis=1) - 1.0)
        if deviation.max(initial=0.0) > norm_tolerance:
            raise ValueError(
                f"{name} embedding rows are not unit-normalized "
                f"(max deviation {deviation.max():.3e} > {norm_tolerance:g})"
            )


def _log_softmax_rows(scaled: np.ndarray) -> np.ndarray:
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def contrastive_loss(
    batch: EmbeddingBatch, temperature: float, *, norm_tolerance: float = 1e-6
) -> tuple[float, np.ndarray]:
    """Symmetric contrastive loss and the raw similarity matrix.

    similarity[i, j] is the dot product of image row i with text row j
    (cosine similarity, since rows are unit). Each direction contributes
    -(1/2N) * sum_i log softmax(similarity/temperature) at the diagonal,
    and the returned loss is the sum of the two directions.
    """
    _check_loss_inputs(batch, temperature, norm_tolerance)
    similarity = batch.image_embeddings @ batch.text_embeddings.T
    scaled = similarity / temperature
    n = batch.n
    diag = np.arange(n)
    image_to_text = -_log_softmax_rows(scaled)[diag, diag].sum() / (2 * n)
    text_to_image = -_log_softmax_rows(scaled.T)[diag, diag].sum() / (2 * n)
    # + 0.0 folds a possible -0.0 (perfectly aligned case) into +0.0
    return float(image_to_text + text_to_image) + 0.0, similarity


@dataclass
class LossGrads:
    """Analytic gradients of the contrastive loss."""

    loss: float
    similarity: np.ndarray
    d_image_embeddings: np.ndarray
    d_text_embeddings: np.ndarray
    d_log_temperature: float


def contrastive_grads(
    batch: EmbeddingBatch, temperature: float, *, norm_tolerance: float = 1e-6
) -> LossGrads:
    """Closed-form gradients w.r.t. both embedding matrices and log-temperature.

    With P = row softmax of scaled similarities, Q likewise on the
    transpose, and G = (P - I + (Q - I)^T) / 2N the gradient on the scaled
    matrix, the chain rule gives d/dV = (G/tau) T, d/dT = (G/tau)^T V, and
    d/d(log tau) = -sum(G * similarity) / tau.
    """
    _check_loss_inputs(batch, temperature, norm_tolerance)
    v, t = batch.image_embeddings, batch.text_embeddings
    n = batch.n
    similarity = v @ t.T
    scaled = similarity / temperature

    log_p = _log_softmax_rows(scaled)
    log_q = _log_softmax_rows(scaled.T)
    diag = np.arange(n)
    loss = -(log_p[diag, diag].sum() + log_q[diag, diag].sum()) / (2 * n)

    eye = np.eye(n)
    g = (np.exp(log_p) - eye + (np.exp(log_q) - eye).T) / (2 * n)
    d_scaled = g / temperature
    return LossGrads(
        loss=float(loss) + 0.0,
        similarity=similarity,
        d_image_embeddings=d_scaled @ t,
        d_text_embeddings=d_scaled.T @ v,
        d_log_temperature=float(-(g * similarity).sum() / temperature),
    )


def normalization_backward(
    raw: np.ndarray, normalized: np.ndarray, d_normalized: np.ndarray
) -> np.ndarray:
    """Backprop through row-wise L2 normalization."""
    norms = np.linalg.norm(np.asarray(raw, dtype=np.float64), axis=1, keepdims=True)
    inner = (d_normalized * normalized).sum(axis=1, keepdims=True)
    return (d_normalized - inner * normalized) / norms


def lr_at_step(step: int, config: TrainingConfig, total_steps: int) -> float:
    """Linear warmup to the configured rate, then cosine decay to zero."""
    if total_steps < config.warmup_iters:
        raise ValueError(
            f"total_steps {total_steps} is smaller than warmup_iters {config.warmup_iters}"
        )
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if config.warmup_iters > 0 and step < config.warmup_iters:
        return config.learning_rate * step / config.warmup_iters
    span = total_steps - config.warmup_iters
    if span == 0:
        return 0.0 if step == total_steps else config.learning_rate
    progress = (step - config.warmup_iters) / span
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class _Adam:
    """Plain Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float):
        self.t += 1
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class Checkpoint:
    """Full training state: parameters, optimizer moments, step, seed."""

    step: int
    config_hash: str
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng_seed: int

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented

        def same(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
            return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)

        return (
            self.step == other.step
            and self.config_hash == other.config_hash
            and self.adam_t == other.adam_t
            and self.rng_seed == other.rng_seed
            and same(self.params, other.params)
            and same(self.adam_m, other.adam_m)
            and same(self.adam_v, other.adam_v)
        )


def save_checkpoint(state: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint as magic + JSON header + checksummed payload."""
    path = Path(path)
    payload = pickle.dumps(
        {
            "params": state.params,
            "adam_m": state.adam_m,
            "adam_v": state.adam_v,
            "adam_t": state.adam_t,
            "rng_seed": state.rng_seed,
        },
        protocol=4,
    )
    header = json.dumps(
        {
            "step": state.step,
            "config_hash": state.config_hash,
            "checksum": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(4, "big"))
        fh.write(header)
        fh.write(payload)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint back, verifying magic and payload checksum."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(_CHECKPOINT_MAGIC) + 4 or not blob.startswith(_CHECKPOINT_MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    offset = len(_CHECKPOINT_MAGIC)
    header_len = int.from_bytes(blob[offset : offset + 4], "big")
    offset += 4
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint header: {exc}") from exc
    payload = blob[offset + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise IntegrityError(f"{path}: checkpoint payload checksum mismatch")
    state = pickle.loads(payload)
    return Checkpoint(
        step=int(header["step"]),
        config_hash=header["config_hash"],
        params=state["params"],
        adam_m=state["adam_m"],
        adam_v=state["adam_v"],
        adam_t=int(state["adam_t"]),
        rng_seed=int(state["rng_seed"]),
    )


def _stream_rng(seed: int, *coords) -> np.random.Generator:
    """Independent generator for a named point in the training schedule."""
    tag = "|".join(str(c) for c in (seed, *coords))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


@dataclass
class TrainResult:
    """Trained encoders plus the per-step metrics log."""

    encoders: ToyDualEncoder
    metrics: list[dict]
    final_checkpoint: Checkpoint
    total_steps: int


def train_loop(
    manifest: DatasetManifest,
    bank: Optional[CaptionBank],
    encoders: ToyDualEncoder,
    config: TrainingConfig,
    features,
    *,
    checkpoint_every: Optional[int] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    resume_from: Optional[Checkpoint] = None,
) -> TrainResult:
    """Run seeded contrastive training over a manifest.

    Bank-backed records draw a fresh caption every epoch (per-batch
    streams derived from the run seed), so the same image meets varied
    text across epochs. Incomplete trailing batches are dropped. Emits a
    {step, lr, loss, temperature} metrics row per step; aborts on
    non-finite loss.
    """
    records = [r for r in manifest.records if r.source_dataset not in config.source_exclusions]
    if not records:
        raise TrainingError("empty post-exclusion manifest")
    for record in records:
        if isinstance(record.payload, BankRef):
            if bank is None:
                raise TrainingError(
                    "manifest contains bank-backed records but no caption bank was supplied"
                )
            bank.captions_for(record.payload.triplet_key)

    steps_per_epoch = len(records) // config.batch_size
    if steps_per_epoch == 0:
        raise TrainingError(
            f"batch_size {config.batch_size} exceeds usable record count {len(records)}"
        )
    total_steps = config.epochs * steps_per_epoch

    params: dict[str, np.ndarray] = dict(encoders.params)
    params["log_temperature"] = np.array(math.log(config.temperature_init))
    adam = _Adam(params)
    start_step = 0

    if resume_from is not None:
        if resume_from.config_hash != config.config_hash():
            raise TrainingError("checkpoint was produced under a different training config")
        for name, value in resume_from.params.items():
            if name == "log_temperature":
                params[name] = np.array(value, dtype=np.float64)
            else:
                encoders.load_state({name: value})
        params.update({k: v for k, v in encoders.params.items()})
        adam.m = {k: np.array(v) for k, v in resume_from.adam_m.items()}
        adam.v = {k: np.array(v) for k, v in resume_from.adam_v.items()}
        adam.t = resume_from.adam_t
        start_step = resume_from.step
        if start_step > total_steps:
            raise TrainingError(
                f"checkpoint step {start_step} is beyond total_steps {total_steps}"
            )

    log_clamp = math.log(TEMPERATURE_MAX)
    metrics: list[dict] = []
    metrics_fh = None
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "w", encoding="utf-8", newline="\n")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            step=step,
            config_hash=config.config_hash(),
            params={k: np.array(v) for k, v in params.items()},
            adam_m={k: np.array(v) for k, v in adam.m.items()},
            adam_v={k: np.array(v) for k, v in adam.v.items()},
            adam_t=adam.t,
            rng_seed=config.seed,
        )

    try:
        current_epoch = -1
        order = None
        for step in range(start_step, total_steps):
            epoch, batch_idx = divmod(step, steps_per_epoch)
            if epoch != current_epoch:
                order = _stream_rng(config.seed, "shuffle", epoch).permutation(len(records))
                current_epoch = epoch
            indices = order[batch_idx * config.batch_size : (batch_idx + 1) * config.batch_size]
            batch_records = [records[i] for i in indices]

            caption_rng = _stream_rng(config.seed, "caption", epoch, batch_idx)
            texts = [sample_caption(r, bank, caption_rng) for r in batch_records]
            image_features = np.stack(
                [np.asarray(features[r.image_uri], dtype=np.float64) for r in batch_records]
            )

            raw_v, cache_v = encoders.vision_forward(image_features)
            raw_t, cache_t = encoders.text_forward(texts)
            normalized_v = l2_normalize_rows(raw_v, what="image embedding")
            normalized_t = l2_normalize_rows(raw_t, what="text embedding")
            temperature = float(np.exp(params["log_temperature"]))

            batch = EmbeddingBatch(normalized_v, normalized_t)
            grads_out = contrastive_grads(batch, temperature)
            if not math.isfinite(grads_out.loss):
                raise TrainingError(f"non-finite loss at step {step}")

            d_raw_v = normalization_backward(raw_v, normalized_v, grads_out.d_image_embeddings)
            d_raw_t = normalization_backward(raw_t, normalized_t, grads_out.d_text_embeddings)
            grads = encoders.grads(cache_v, cache_t, d_raw_v, d_raw_t)
            if config.temperature_learnable:
                grads["log_temperature"] = np.array(grads_out.d_log_temperature)

            lr = lr_at_step(step, config, total_steps)
            adam.update(params, grads, lr)
            params["log_temperature"][...] = np.clip(
                params["log_temperature"], -log_clamp, log_clamp
            )

            row = {
                "step": step,
                "lr": lr,
                "loss": grads_out.loss,
                "temperature": temperature,
            }
            metrics.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")

            done = step + 1
            if checkpoint_every and checkpoint_dir is not None and done % checkpoint_every == 0:
                save_checkpoint(snapshot(done), checkpoint_dir / f"step_{done:06d}.ckpt")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    return TrainResult(
        encoders=encoders,
        metrics=metrics,
        final_checkpoint=snapshot(total_steps),
        total_steps=total_steps,
    )
