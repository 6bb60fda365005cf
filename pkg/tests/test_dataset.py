import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nailguard import dataset
from nailguard.dataset import (
    CANONICAL_CATEGORIES,
    DatasetError,
    DatasetManifest,
    LabelTaxonomy,
    ManifestEntry,
    SplitAssignment,
    category_distribution,
    ingest,
    split,
)

from conftest import solid_image, write_png


def make_manifest(sizes):
    """Synthetic manifest with `sizes[i]` entries in category i."""
    entries = []
    for cat, n in enumerate(sizes):
        for i in range(n):
            entries.append(ManifestEntry(f"c{cat}/img{i:04d}.png", f"c{cat}/img{i:04d}.png", cat, f"sum{cat}-{i}"))
    return DatasetManifest(taxonomy=LabelTaxonomy(), entries=entries, source_root="/nowhere")


class TestTaxonomy:
    def test_canonical_order(self):
        tax = LabelTaxonomy()
        assert tax.categories == CANONICAL_CATEGORIES
        assert tax.index("acral_lentiginous_melanoma") == 0
        assert tax.index("pitting") == 5

    def test_case_and_separator_insensitive(self):
        tax = LabelTaxonomy()
        assert tax.index("Blue Finger") == 3
        assert tax.index("HEALTHY_NAIL") == 1

    def test_rejects_wrong_count(self):
        with pytest.raises(DatasetError):
            LabelTaxonomy(("a", "b"))
        with pytest.raises(DatasetError):
            LabelTaxonomy(("a",) * 6)


class TestIngest:
    def test_tiny_tree(self, tiny_tree, tiny_manifest):
        # oracle: independent filesystem scan
        found = {p.relative_to(tiny_tree).as_posix() for p in tiny_tree.rglob("*.png")}
        assert tiny_manifest.total == 12
        assert {e.sample_id for e in tiny_manifest.entries} == found
        assert len(set(tiny_manifest.sample_ids())) == 12

    def test_sorted_and_idempotent(self, tiny_tree, tiny_manifest):
        keys = [(e.category, e.relative_path) for e in tiny_manifest.entries]
        assert keys == sorted(keys)
        again = ingest(tiny_tree)
        assert again.to_json() == tiny_manifest.to_json()

    def test_empty_categories_ok(self, tmp_path):
        for cat in CANONICAL_CATEGORIES:
            (tmp_path / cat).mkdir()
        manifest = ingest(tmp_path)
        assert manifest.total == 0

    def test_unknown_subdirectory_is_hard_error(self, tmp_path):
        for cat in CANONICAL_CATEGORIES:
            (tmp_path / cat).mkdir()
        (tmp_path / "mystery_condition").mkdir()
        with pytest.raises(DatasetError, match="mystery_condition"):
            ingest(tmp_path)

    def test_missing_category_is_error(self, tmp_path):
        (tmp_path / CANONICAL_CATEGORIES[0]).mkdir()
        with pytest.raises(DatasetError, match="missing"):
            ingest(tmp_path)

    def test_undecodable_file_lands_in_skip_report(self, tmp_path):
        for cat in CANONICAL_CATEGORIES:
            (tmp_path / cat).mkdir()
        write_png(tmp_path / "pitting" / "good.png", solid_image((10, 20, 30)))
        (tmp_path / "pitting" / "broken.png").write_bytes(b"not an image at all")
        manifest = ingest(tmp_path)
        assert manifest.total == 1
        assert [p for p, _ in manifest.skipped] == ["pitting/broken.png"]

    def test_checksums_change_with_content(self, tmp_path):
        for cat in CANONICAL_CATEGORIES:
            (tmp_path / cat).mkdir()
        write_png(tmp_path / "clubbing" / "a.png", solid_image((1, 2, 3)))
        first = ingest(tmp_path).entries[0].checksum
        write_png(tmp_path / "clubbing" / "a.png", solid_image((9, 9, 9)))
        second = ingest(tmp_path).entries[0].checksum
        assert first != second
        assert len(first) == 64  # sha-256 hex

    def test_json_roundtrip(self, tiny_manifest, tmp_path):
        path = tmp_path / "manifest.json"
        tiny_manifest.save(path)
        loaded = DatasetManifest.load(path, source_root=tiny_manifest.source_root)
        assert loaded.to_json() == tiny_manifest.to_json()
        doc = json.loads(path.read_text())
        assert set(doc) == {"taxonomy", "entries", "total"}


class TestSplit:
    def test_ratios_recorded(self):
        assignment = split(make_manifest([10] * 6), seed=7)
        assert assignment.ratios == (0.7, 0.2, 0.1)

    def test_ten_samples_split_7_2_1(self):
        manifest = make_manifest([10, 0, 0, 0, 0, 0])
        assignment = split(manifest, seed=0)
        parts = list(assignment.assignment.values())
        assert parts.count("train") == 7
        assert parts.count("val") == 2
        assert parts.count("test") == 1

    def test_six_categories_of_100(self):
        manifest = make_manifest([100] * 6)
        assignment = split(manifest, seed=3)
        # oracle: brute-force count over the assignment mapping
        for cat in range(6):
            ids = [e.sample_id for e in manifest.entries if e.category == cat]
            counts = {"train": 0, "val": 0, "test": 0}
            for sid in ids:
                counts[assignment.assignment[sid]] += 1
            assert counts == {"train": 70, "val": 20, "test": 10}

    def test_partition_property(self):
        manifest = make_manifest([13, 57, 8, 100, 31, 4])
        assignment = split(manifest, seed=11)
        assert set(assignment.assignment) == set(manifest.sample_ids())
        assert all(v in ("train", "val", "test") for v in assignment.assignment.values())

    def test_same_seed_byte_identical(self):
        manifest = make_manifest([37, 12, 50, 9, 3, 81])
        a = split(manifest, seed=123).to_json_bytes()
        b = split(manifest, seed=123).to_json_bytes()
        assert a == b
        c = split(manifest, seed=124).to_json_bytes()
        assert a != c

    def test_tiny_category_goes_to_train(self):
        manifest = make_manifest([2, 10, 10, 10, 10, 10])
        assignment = split(manifest, seed=5)
        cat0 = [assignment.assignment[e.sample_id] for e in manifest.entries if e.category == 0]
        assert cat0 == ["train", "train"]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(min_value=3, max_value=500), min_size=6, max_size=6), st.integers(0, 2**31))
    def test_floor_rule_property(self, sizes, seed):
        manifest = make_manifest(sizes)
        assignment = split(manifest, seed=seed)
        for cat, n in enumerate(sizes):
            ids = [e.sample_id for e in manifest.entries if e.category == cat]
            counts = {"train": 0, "val": 0, "test": 0}
            for sid in ids:
                counts[assignment.assignment[sid]] += 1
            assert counts["test"] == n // 10
            assert counts["val"] == n // 5
            assert counts["train"] == n - n // 10 - n // 5

    def test_empty_manifest_rejected(self):
        with pytest.raises(DatasetError):
            split(make_manifest([0] * 6), seed=0)

    def test_json_roundtrip(self, tmp_path):
        assignment = split(make_manifest([20] * 6), seed=9)
        path = tmp_path / "split.json"
        assignment.save(path)
        loaded = SplitAssignment.load(path)
        assert loaded.assignment == assignment.assignment
        assert loaded.seed == 9


class TestCategoryDistribution:
    def test_empty(self):
        manifest = make_manifest([0] * 6)
        assert all(v == 0 for v in category_distribution(manifest).values())

    def test_tiny_tree(self, tiny_manifest):
        dist = category_distribution(tiny_manifest)
        assert all(v == 2 for v in dist.values())
        assert sum(dist.values()) == tiny_manifest.total

    def test_sums_to_total(self):
        manifest = make_manifest([5, 8, 0, 13, 2, 7])
        assert sum(category_distribution(manifest).values()) == manifest.total == 35
