"""Dataset ingestion, manifest bookkeeping, and stratified train/val/test splits."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

CANONICAL_CATEGORIES = (
    "acral_lentiginous_melanoma",
    "healthy_nail",
    "onychogryphosis",
    "blue_finger",
    "clubbing",
    "pitting",
)

SPLIT_RATIOS = (0.7, 0.2, 0.1)
PARTITIONS = ("train", "val", "test")


class DatasetError(Exception):
    """Raised for unrecoverable dataset layout or content problems."""


def normalize_category_name(name: str) -> str:
    """Lowercase and collapse whitespace/hyphens to underscores for matching."""
    out = name.strip().lower()
    for ch in (" ", "\t", "-"):
        out = out.replace(ch, "_")
    while "__" in out:
        out = out.replace("__", "_")
    return out


@dataclass(frozen=True)
class LabelTaxonomy:
    """Fixed ordered list of the six nail categories."""

    categories: tuple[str, ...] = CANONICAL_CATEGORIES

    def __post_init__(self):
        if len(self.categories) != 6 or len(set(self.categories)) != 6:
            raise DatasetError(f"taxonomy needs exactly 6 distinct categories, got {self.categories}")

    def index(self, name: str) -> int:
        normalized = normalize_category_name(name)
        for i, cat in enumerate(self.categories):
            if normalize_category_name(cat) == normalized:
                return i
        raise KeyError(name)

    def name(self, index: int) -> str:
        return self.categories[index]

    def __len__(self) -> int:
        return 6


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    relative_path: str
    category: int
    checksum: str


@dataclass
class DatasetManifest:
    taxonomy: LabelTaxonomy
    entries: list[ManifestEntry]
    source_root: str
    # files that could not be decoded: (relative_path, reason); not part of the JSON schema
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.entries)

    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def category_of(self, sample_id: str) -> int:
        return self._index()[sample_id].category

    def path_of(self, sample_id: str) -> str:
        return os.path.join(self.source_root, self._index()[sample_id].relative_path)

    def _index(self) -> dict[str, ManifestEntry]:
        if not hasattr(self, "_by_id"):
            self._by_id = {e.sample_id: e for e in self.entries}
        return self._by_id

    def to_json(self) -> dict:
        return {
            "taxonomy": list(self.taxonomy.categories),
            "entries": [
                {"id": e.sample_id, "path": e.relative_path, "category": e.category, "checksum": e.checksum}
                for e in self.entries
            ],
            "total": self.total,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, doc: dict, source_root: str = "") -> "DatasetManifest":
        taxonomy = LabelTaxonomy(tuple(doc["taxonomy"]))
        entries = [
            ManifestEntry(e["id"], e["path"], int(e["category"]), e["checksum"]) for e in doc["entries"]
        ]
        manifest = cls(taxonomy=taxonomy, entries=entries, source_root=source_root)
        if doc.get("total") != manifest.total:
            raise DatasetError(f"manifest total {doc.get('total')} != entry count {manifest.total}")
        return manifest

    @classmethod
    def load(cls, path: str | Path, source_root: str | None = None) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        root = source_root if source_root is not None else str(Path(path).parent)
        return cls.from_json(doc, source_root=root)


def _decodable(data: bytes) -> tuple[bool, str]:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.convert("RGB")
        return True, ""
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        return False, str(exc)


def ingest(root_dir: str | Path, taxonomy: LabelTaxonomy | None = None) -> DatasetManifest:
    """Walk a category-per-subdirectory image tree into a checksummed manifest.

    Subdirectory names are matched to taxonomy categories case-insensitively
    after whitespace/underscore normalization. An unknown subdirectory is a
    hard error; an undecodable file is recorded in ``manifest.skipped``.
    Entries are sorted by (category, relative_path) so two runs over an
    unchanged tree produce identical manifests.
    """
    taxonomy = taxonomy or LabelTaxonomy()
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")

    known = {normalize_category_name(c): i for i, c in enumerate(taxonomy.categories)}
    seen: dict[int, Path] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        idx = known.get(normalize_category_name(sub.name))
        if idx is None:
            raise DatasetError(f"unknown category subdirectory: {sub.name!r}")
        seen[idx] = sub
    missing = [taxonomy.name(i) for i in range(6) if i not in seen]
    if missing:
        raise DatasetError(f"missing category subdirectories: {missing}")

    entries: list[ManifestEntry] = []
    skipped: list[tuple[str, str]] = []
    for idx in range(6):
        sub = seen[idx]
        for file in sorted(p for p in sub.rglob("*") if p.is_file()):
            rel = file.relative_to(root).as_posix()
            data = file.read_bytes()
            ok, reason = _decodable(data)
            if not ok:
                skipped.append((rel, reason))
                continue
            checksum = hashlib.sha256(data).hexdigest()
            entries.append(ManifestEntry(sample_id=rel, relative_path=rel, category=idx, checksum=checksum))

    entries.sort(key=lambda e: (e.category, e.relative_path))
    if skipped:
        log.warning("ingest skipped %d undecodable files under %s", len(skipped), root)
    return DatasetManifest(taxonomy=taxonomy, entries=entries, source_root=str(root), skipped=skipped)


@dataclass
class SplitAssignment:
    assignment: dict[str, str]  # sample_id -> "train" | "val" | "test"
    seed: int
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def ids(self, partition: str) -> list[str]:
        if partition not in PARTITIONS:
            raise DatasetError(f"unknown partition {partition!r}")
        return [sid for sid, part in self.assignment.items() if part == partition]

    def to_json(self) -> dict:
        return {"seed": self.seed, "ratios": list(self.ratios), "assignment": self.assignment}

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json(), indent=2, sort_keys=True).encode()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_json_bytes())

    @classmethod
    def from_json(cls, doc: dict) -> "SplitAssignment":
        return cls(assignment=dict(doc["assignment"]), seed=int(doc["seed"]), ratios=tuple(doc["ratios"]))

    @classmethod
    def load(cls, path: str | Path) -> "SplitAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


def _category_shuffle_seed(seed: int, category: str) -> int:
    digest = hashlib.sha256(f"{seed}:{category}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def split(manifest: DatasetManifest, seed: int) -> SplitAssignment:
    """Deterministic stratified split: per category of size n, test gets
    floor(0.1n), val gets floor(0.2n), train the remainder."""
    if manifest.total == 0:
        raise DatasetError("cannot split an empty manifest")

    assignment: dict[str, str] = {}
    for idx, name in enumerate(manifest.taxonomy.categories):
        ids = sorted(e.sample_id for e in manifest.entries if e.category == idx)
        n = len(ids)
        if n == 0:
            continue
        rng = random.Random(_category_shuffle_seed(seed, name))
        rng.shuffle(ids)
        if n < 3:
            log.warning("category %s has only %d samples; all assigned to train", name, n)
            n_test = n_val = 0
        else:
            # integer arithmetic: exactly floor(0.1n) / floor(0.2n)
            n_test = n // 10
            n_val = n // 5
        for sid in ids[:n_test]:
            assignment[sid] = "test"
        for sid in ids[n_test : n_test + n_val]:
            assignment[sid] = "val"
        for sid in ids[n_test + n_val :]:
            assignment[sid] = "train"
    return SplitAssignment(assignment=assignment, seed=seed)


def category_distribution(manifest: DatasetManifest) -> dict[str, int]:
    counts = {name: 0 for name in manifest.taxonomy.categories}
    for e in manifest.entries:
        counts[manifest.taxonomy.name(e.category)] += 1
    return counts
