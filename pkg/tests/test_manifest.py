"""Data model and manifest format tests."""

import json
from collections import Counter

import pytest

from medforge.errors import IntegrityError, ManifestError
from medforge.manifest import (
    BankRef,
    CaptionBank,
    DatasetManifest,
    InlineCaption,
    LabelInfoTriplet,
    ModalityTag,
    compute_stats,
    merge_manifests,
    parse_modality,
    read_manifest,
    resolve_bank_refs,
    write_manifest,
)


def record(i, modality=ModalityTag.XRAY, source="src", caption="a chest film", uri=None):
    return __import__("medforge").SampleRecord(
        record_id=f"{source}/{i:06d}",
        image_uri=uri or f"img/{i}.png",
        source_dataset=source,
        modality=modality,
        payload=InlineCaption(caption=caption),
    )


def bank_record(i, key, modality=ModalityTag.MRI, source="bank_src"):
    return __import__("medforge").SampleRecord(
        record_id=f"{source}/{i:06d}",
        image_uri=f"img/{i}.png",
        source_dataset=source,
        modality=modality,
        payload=BankRef(triplet_key=key),
    )


class TestLabelInfoTriplet:
    def test_key_is_case_and_whitespace_insensitive(self):
        a = LabelInfoTriplet("Pneumonia", "chest X-ray", "lungs")
        b = LabelInfoTriplet("  pneumonia ", "Chest x-RAY", " Lungs ")
        assert a == b
        assert hash(a) == hash(b)

    def test_anatomy_changes_key(self):
        with_anatomy = LabelInfoTriplet("edema", "xray", "chest")
        without = LabelInfoTriplet("edema", "xray")
        assert with_anatomy != without

    def test_blank_anatomy_treated_as_absent(self):
        assert LabelInfoTriplet("edema", "xray", "  ") == LabelInfoTriplet("edema", "xray")

    def test_empty_fields_rejected(self):
        with pytest.raises(ValueError):
            LabelInfoTriplet("  ", "xray")
        with pytest.raises(ValueError):
            LabelInfoTriplet("edema", "")

    def test_separator_prevents_collisions(self):
        # "a b" + "c" must not collide with "a" + "b c"
        assert LabelInfoTriplet("a b", "c") != LabelInfoTriplet("a", "b c")


class TestModalityParsing:
    @pytest.mark.parametrize(
        "text,tag",
        [
            ("fundus", ModalityTag.FUNDUS),
            ("X-Ray", ModalityTag.XRAY),
            ("ULTRASOUND", ModalityTag.US),
            ("pathology", ModalityTag.HISTOPATHOLOGY),
        ],
    )
    def test_aliases(self, text, tag):
        assert parse_modality(text) is tag

    def test_unknown_rejected(self):
        with pytest.raises(ValueError, match="petct"):
            parse_modality("petct")


class TestWriteRead:
    def test_empty_manifest_header_only(self, tmp_path):
        manifest = DatasetManifest.from_records([])
        path = write_manifest(manifest, tmp_path / "empty.jsonl")
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        header = json.loads(lines[0])
        assert header["counts"] == {}
        assert sum(header["counts"].values()) == 0

    def test_header_counts_match_recount_of_written_file(self, tmp_path):
        manifest = DatasetManifest.from_records(
            [record(0), record(1), record(2, modality=ModalityTag.CT)]
        )
        path = write_manifest(manifest, tmp_path / "m.jsonl")
        lines = path.read_text().splitlines()
        assert len(lines) == 4
        header = json.loads(lines[0])
        # independent recount straight off the file
        recount = Counter(json.loads(line)["modality"] for line in lines[1:])
        assert header["counts"] == {"XRAY": 2, "CT": 1}
        assert header["counts"] == dict(recount)

    def test_write_twice_byte_identical(self, tmp_path):
        manifest = DatasetManifest.from_records([record(i) for i in range(5)])
        a = write_manifest(manifest, tmp_path / "a.jsonl")
        b = write_manifest(manifest, tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_structural_equality(self, tmp_path):
        manifest = DatasetManifest.from_records(
            [record(0), bank_record(1, "edema\x1fmri"), record(2, modality=ModalityTag.FUNDUS)]
        )
        path = write_manifest(manifest, tmp_path / "m.jsonl")
        assert read_manifest(path) == manifest

    def test_missing_destination_dir(self, tmp_path):
        manifest = DatasetManifest.from_records([record(0)])
        with pytest.raises(ManifestError, match="destination directory"):
            write_manifest(manifest, tmp_path / "nope" / "m.jsonl")

    def test_invalid_record_rejected_with_id(self, tmp_path):
        bad = record(0, caption="")
        manifest = DatasetManifest.from_records([bad])
        with pytest.raises(ManifestError, match="src/000000"):
            write_manifest(manifest, tmp_path / "m.jsonl")

    def test_header_count_mismatch_is_integrity_error(self, tmp_path):
        manifest = DatasetManifest.from_records([record(i) for i in range(4)])
        path = write_manifest(manifest, tmp_path / "m.jsonl")
        lines = path.read_text().splitlines()
        lines[0] = json.dumps({"version": 1, "counts": {"XRAY": 5}})
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(IntegrityError):
            read_manifest(path)

    def test_empty_image_uri_names_line_number(self, tmp_path):
        manifest = DatasetManifest.from_records([record(0), record(1)])
        path = write_manifest(manifest, tmp_path / "m.jsonl")
        lines = path.read_text().splitlines()
        obj = json.loads(lines[2])
        obj["image_uri"] = ""
        lines[2] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="line 3"):
            read_manifest(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        manifest = DatasetManifest.from_records([record(0)])
        path = write_manifest(manifest, tmp_path / "m.jsonl")
        path.write_text(path.read_text() + "{not json\n")
        with pytest.raises(ManifestError, match="line 3"):
            read_manifest(path)


class TestMerge:
    def test_merge_with_empty_is_identity(self):
        m = DatasetManifest.from_records([record(0), record(1)])
        empty = DatasetManifest.from_records([])
        assert merge_manifests([m, empty]) == m

    def test_counts_are_elementwise_sum(self):
        a = DatasetManifest.from_records([record(i, source="a") for i in range(2)])
        b = DatasetManifest.from_records(
            [record(0, source="b", modality=ModalityTag.XRAY)]
            + [record(i + 1, source="b", modality=ModalityTag.FUNDUS) for i in range(3)]
        )
        merged = merge_manifests([a, b])
        # recount oracle
        recount = Counter(r.modality for r in merged.records)
        assert merged.per_modality_counts == {ModalityTag.XRAY: 3, ModalityTag.FUNDUS: 3}
        assert merged.per_modality_counts == dict(recount)
        assert [r.record_id for r in merged.records] == (
            [r.record_id for r in a.records] + [r.record_id for r in b.records]
        )

    def test_collision_names_record_id(self):
        a = DatasetManifest.from_records([record(1, source="s")])
        with pytest.raises(ManifestError, match="s/000001"):
            merge_manifests([a, a])

    def test_merge_associativity(self):
        parts = [
            DatasetManifest.from_records([record(i, source=f"s{k}") for i in range(3)])
            for k in range(3)
        ]
        a, b, c = parts
        assert merge_manifests([merge_manifests([a, b]), c]) == merge_manifests(
            [a, merge_manifests([b, c])]
        )


class TestStats:
    def test_single_modality_distribution(self):
        manifest = DatasetManifest.from_records([record(i) for i in range(10)])
        stats = compute_stats(manifest)
        assert stats.modality_percentages == {ModalityTag.XRAY: 100.0}

    def test_mean_caption_words_hand_oracle(self):
        manifest = DatasetManifest.from_records(
            [
                record(0, caption="one two three four"),
                record(1, caption="one two three four five six"),
            ]
        )
        stats = compute_stats(manifest)
        assert stats.mean_caption_words == {"src": 5.0}

    def test_bank_backed_mean_over_bank_captions(self):
        bank = CaptionBank(
            entries={"edema\x1fmri": ("two words", "three whole words")},
            generator="t", created="1970-01-01T00:00:00+00:00", m=2,
        )
        manifest = DatasetManifest.from_records([bank_record(0, "edema\x1fmri")])
        stats = compute_stats(manifest, bank)
        assert stats.mean_caption_words == {"bank_src": 2.5}

    def test_percentages_sum_to_100(self):
        import numpy as np

        rng = np.random.default_rng(0)
        for _ in range(20):
            tags = list(ModalityTag)
            records = [
                record(i, modality=tags[int(rng.integers(len(tags)))])
                for i in range(int(rng.integers(1, 40)))
            ]
            stats = compute_stats(DatasetManifest.from_records(records))
            assert abs(sum(stats.modality_percentages.values()) - 100.0) < 0.01

    def test_unresolvable_key_named(self):
        bank = CaptionBank(
            entries={"other\x1fkey": ("a caption here",)},
            generator="t", created="1970-01-01T00:00:00+00:00", m=1,
        )
        manifest = DatasetManifest.from_records([bank_record(0, "missing\x1fkey")])
        with pytest.raises(KeyError, match="missing"):
            compute_stats(manifest, bank)

    def test_bank_required_when_bankrefs_present(self):
        manifest = DatasetManifest.from_records([bank_record(0, "k\x1fm")])
        with pytest.raises(ValueError, match="caption bank"):
            compute_stats(manifest)
        # but the ingest-stage report mode degrades gracefully
        stats = compute_stats(manifest, require_bank=False)
        assert stats.sources_pending_bank == ("bank_src",)

    def test_resolve_bank_refs_validates(self):
        bank = CaptionBank(
            entries={"k\x1fm": ("a caption",)},
            generator="t", created="1970-01-01T00:00:00+00:00", m=1,
        )
        manifest = DatasetManifest.from_records([bank_record(0, "k\x1fm")])
        resolve_bank_refs(manifest, bank)
        bad = DatasetManifest.from_records([bank_record(0, "nope\x1fm")])
        with pytest.raises(KeyError):
            resolve_bank_refs(bad, bank)


class TestCaptionBankFormat:
    def test_save_load_round_trip(self, tmp_path):
        bank = CaptionBank(
            entries={"edema\x1fmri\x1fbrain": ("cap one here now", "cap two here now")},
            generator="offline-template-engine",
            created="1970-01-01T00:00:00+00:00",
            m=2,
        )
        path = bank.save(tmp_path / "bank.json")
        assert CaptionBank.load(path) == bank
        doc = json.loads(path.read_text())
        assert set(doc) == {"metadata", "entries"}
        assert doc["metadata"]["M"] == 2

    def test_save_byte_stable(self, tmp_path):
        bank = CaptionBank(
            entries={"b\x1fm": ("x y z w",), "a\x1fm": ("p q r s",)},
            generator="g", created="1970-01-01T00:00:00+00:00", m=1,
        )
        a = bank.save(tmp_path / "a.json")
        b = bank.save(tmp_path / "b.json")
        assert a.read_bytes() == b.read_bytes()

    def test_empty_entry_rejected(self):
        with pytest.raises(ValueError):
            CaptionBank(entries={"k": ()}, generator="g", created="now", m=1)
        with pytest.raises(ValueError):
            CaptionBank(entries={"k": ("", "ok")}, generator="g", created="now", m=2)
