"""medforge: desk-scale medical vision-language pipeline.

Converts label-only tables into multi-caption image-text manifests,
trains a dual-encoder contrastive model with per-epoch caption sampling,
and evaluates it via prompt-ensembled zero-shot classification and
linear probing.
"""

from .manifest import (
    BankRef,
    CaptionBank,
    DatasetManifest,
    InlineCaption,
    LabelInfoTriplet,
    ModalityTag,
    SampleRecord,
    compute_stats,
    merge_manifests,
    read_manifest,
    write_manifest,
)

__all__ = [
    "BankRef",
    "CaptionBank",
    "DatasetManifest",
    "InlineCaption",
    "LabelInfoTriplet",
    "ModalityTag",
    "SampleRecord",
    "compute_stats",
    "merge_manifests",
    "read_manifest",
    "write_manifest",
]

__version__ = "0.1.0"
