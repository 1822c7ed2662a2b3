"""Build a ready-to-run demo workspace from the synthetic fixture.

``python -m medforge.demo <directory>`` writes three label-only sources
(one per modality) with feature files, held-out evaluation splits, a
dataset registry, and a TOML run config. The pipeline then runs entirely
offline:

    forge ingest  --config <directory>/run.toml
    forge caption --config <directory>/run.toml
    forge train   --config <directory>/run.toml
    forge eval    --config <directory>/run.toml
    forge stats   --config <directory>/run.toml
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .ingest import generate_fixture, write_fixture_sources

MODALITIES = ["xray", "ct", "mri"]

_CONFIG_TEMPLATE = """\
output_dir = "out"
seed = 7

{sources}

[caption]
M = 10
mode = "offline"

[training]
batch_size = 36
learning_rate = 0.05
warmup_iters = 10
epochs = 20
temperature_init = 0.07

[evaluation]
registry = "registry.json"
fractions = [0.1, 1.0]
"""

_SOURCE_TEMPLATE = """\
[[sources]]
path = "data/{source}.csv"
kind = "label_only"
features = "data/{source}.f32"
[sources.schema]
source = "{source}"
image_column = "image"
label_column = "label"
modality_column = "modality"
anatomy_column = "anatomy"
"""


def build_workspace(root: Path) -> Path:
    """Write fixture sources, eval splits, registry, and config under root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data_dir = root / "data"

    train_fixture = generate_fixture(MODALITIES, 3, 40, seed=11, noise=0.1)
    write_fixture_sources(train_fixture, data_dir, seed=11)
    eval_test = generate_fixture(MODALITIES, 3, 15, seed=99, noise=0.1)
    write_fixture_sources(eval_test, data_dir / "eval_test", seed=99)
    eval_train = generate_fixture(MODALITIES, 3, 40, seed=55, noise=0.1)
    write_fixture_sources(eval_train, data_dir / "eval_train", seed=55)

    entries = []
    for source in train_fixture.sources:
        modality = source.split("_")[1].upper()
        classes = sorted({r["label"] for r in train_fixture.rows_for_source(source)})
        entries.append(
            {
                "name": f"{source}_eval",
                "modality": modality,
                "metric": "ACC",
                "classes": classes,
                "test_split_uri": f"data/eval_test/{source}.csv",
                "train_split_uri": f"data/eval_train/{source}.csv",
                "templates": [
                    f"A medical {modality} image showing {{}}.",
                    "An imaging study demonstrating {}.",
                ],
            }
        )
    with open(root / "registry.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")

    sources_toml = "\n".join(
        _SOURCE_TEMPLATE.format(source=s) for s in train_fixture.sources
    )
    config_path = root / "run.toml"
    config_path.write_text(_CONFIG_TEMPLATE.format(sources=sources_toml), encoding="utf-8")
    return config_path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m medforge.demo <directory>", file=sys.stderr)
        return 2
    config_path = build_workspace(Path(argv[0]))
    print(f"demo workspace ready: forge ingest --config {config_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
