"""Dual-encoder abstraction and dependency-light reference encoders.

The reference pair keeps the test suite self-contained: the vision side
is an affine map over precomputed per-image feature vectors, the text
side an affine map over a hashed bag-of-words vector of the caption.
Real encoder backends plug in behind the same EncoderPair surface.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_TOKEN = re.compile(r"[a-z0-9]+")


def hashed_bow(texts: Sequence[str], buckets: int) -> np.ndarray:
    """Hash lowercase alphanumeric tokens into a fixed-width count vector.

    Uses crc32 so the bucket assignment is stable across processes and
    platforms.
    """
    out = np.zeros((len(texts), buckets), dtype=np.float64)
    for i, text in enumerate(texts):
        for token in _TOKEN.findall(text.lower()):
            out[i, zlib.crc32(token.encode("utf-8")) % buckets] += 1.0
    return out


@dataclass
class EncoderPair:
    """Pluggable vision/text encoders emitting a shared embedding dimension.

    ``f_vision`` maps an (n, feature_dim) array to raw (n, dim) embeddings;
    ``f_text`` maps a sequence of caption strings likewise. Outputs are raw:
    normalization happens downstream.
    """

    f_vision: Callable[[np.ndarray], np.ndarray]
    f_text: Callable[[Sequence[str]], np.ndarray]
    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dimension must be >= 2")


class ToyDualEncoder:
    """Trainable affine reference encoders over features and hashed BoW.

    Parameters live in ``params`` as plain float64 arrays so the training
    loop can update them in place; forward passes return caches for
    backprop. Initialization is deterministic given the seed.
    """

    def __init__(self, feature_dim: int, embed_dim: int = 32, buckets: int = 256, seed: int = 0):
        if embed_dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.buckets = buckets
        self.params = {
            "w_vision": rng.standard_normal((feature_dim, embed_dim)) / np.sqrt(feature_dim),
            "b_vision": np.zeros(embed_dim),
            "w_text": rng.standard_normal((buckets, embed_dim)) / np.sqrt(buckets),
            "b_text": np.zeros(embed_dim),
        }

    def vision_forward(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw image embeddings plus the input cache for backprop."""
        features = np.asarray(features, dtype=np.float64)
        return features @ self.params["w_vision"] + self.params["b_vision"], features

    def text_forward(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Raw text embeddings plus the bag-of-words cache for backprop."""
        bow = hashed_bow(texts, self.buckets)
        return bow @ self.params["w_text"] + self.params["b_text"], bow

    def grads(
        self,
        vision_cache: np.ndarray,
        text_cache: np.ndarray,
        d_raw_vision: np.ndarray,
        d_raw_text: np.ndarray,
    ) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on raw embeddings."""
        return {
            "w_vision": vision_cache.T @ d_raw_vision,
            "b_vision": d_raw_vision.sum(axis=0),
            "w_text": text_cache.T @ d_raw_text,
            "b_text": d_raw_text.sum(axis=0),
        }

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self.params:
                raise KeyError(f"unknown encoder parameter {name!r}")
            if self.params[name].shape != value.shape:
                raise ValueError(
                    f"parameter {name!r} shape {value.shape} does not match "
                    f"expected {self.params[name].shape}"
                )
            self.params[name] = np.array(value, dtype=np.float64)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ToyDualEncoder":
        """Rebuild an encoder whose shapes are implied by saved parameters."""
        w_vision, w_text = state["w_vision"], state["w_text"]
        enc = cls(
            feature_dim=w_vision.shape[0],
            embed_dim=w_vision.shape[1],
            buckets=w_text.shape[0],
            seed=0,
        )
        enc.load_state(state)
        return enc

    def as_pair(self) -> EncoderPair:
        return EncoderPair(
            f_vision=lambda feats: self.vision_forward(feats)[0],
            f_text=lambda texts: self.text_forward(texts)[0],
            dim=self.embed_dim,
        )
