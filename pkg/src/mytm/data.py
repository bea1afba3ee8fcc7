"""Manifest-backed photo collections, age sampling and ingestion."""

from __future__ import annotations

import csv
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .backends import BackendBundle
from .errors import BackendError, DomainError, ManifestError, NoExtrapolationRangeError
from .images import load_image, save_image, verify_image
from .latent import AGE_MAX, AGE_MIN

logger = logging.getLogger(__name__)

SPLITS = ("train", "reference", "test")
Split = Literal["train", "reference", "test"]


class ManifestEntry(BaseModel):
    """One JSON-Lines manifest record."""

    model_config = ConfigDict(extra="forbid")

    path: str = Field(min_length=1)
    age_years: float = Field(ge=AGE_MIN, le=AGE_MAX)
    split: Split
    capture_date: Optional[date] = None


@dataclass(frozen=True)
class PhotoRecord:
    path: Path
    age_years: float
    split: str
    capture_date: Optional[date] = None

    def to_manifest_line(self, root: Optional[Path] = None) -> str:
        path = self.path.relative_to(root) if root is not None else self.path
        entry: Dict[str, object] = {"path": path.as_posix(), "age_years": self.age_years, "split": self.split}
        if self.capture_date is not None:
            entry["capture_date"] = self.capture_date.isoformat()
        return json.dumps(entry)


@dataclass
class AgedPhotoCollection:
    """Immutable set of photos of one person; decoded images are LRU-cached."""

    records: Tuple[PhotoRecord, ...]
    cache_max_entries: int = 512
    _cache: "OrderedDict[Tuple[str, str], torch.Tensor]" = field(default_factory=OrderedDict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.records = tuple(self.records)
        if not self.split("train"):
            raise ManifestError("collection has an empty train split")

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> List[PhotoRecord]:
        return [record for record in self.records if record.split == name]

    @property
    def train_ages(self) -> List[float]:
        return [record.age_years for record in self.split("train")]

    @property
    def age_min(self) -> float:
        return min(self.train_ages)

    @property
    def age_max(self) -> float:
        return max(self.train_ages)

    def load_image(self, record: PhotoRecord, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
        dtype = dtype or torch.float32
        key = (str(record.path), str(dtype))
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
                return cached
        image = load_image(record.path, dtype=dtype)
        with self._lock:
            self._cache[key] = image
            if len(self._cache) > self.cache_max_entries:
                self._cache.popitem(last=False)
        return image

    def with_records(self, records: Iterable[PhotoRecord]) -> "AgedPhotoCollection":
        return AgedPhotoCollection(tuple(records), cache_max_entries=self.cache_max_entries)


def load_manifest(path: Path, check_images: bool = True) -> AgedPhotoCollection:
    """Parse and validate a JSON-Lines manifest; relative paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: List[PhotoRecord] = []
    seen: Dict[Path, int] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            entry = ManifestEntry.model_validate_json(raw)
        except ValidationError as exc:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or 'line'}: {err['msg']}" for err in exc.errors()
            )
            raise ManifestError(f"{path}:{lineno}: invalid record ({problems})") from exc
        image_path = Path(entry.path)
        if not image_path.is_absolute():
            image_path = root / image_path
        if image_path in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {entry.path} (first on line {seen[image_path]})")
        seen[image_path] = lineno
        if check_images:
            if not image_path.is_file():
                raise ManifestError(f"{path}:{lineno}: image file not found: {entry.path}")
            try:
                verify_image(image_path)
            except DomainError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        records.append(PhotoRecord(image_path, entry.age_years, entry.split, entry.capture_date))
    if not any(record.split == "train" for record in records):
        raise ManifestError(f"{path}: train split is empty")
    collection = AgedPhotoCollection(tuple(records))
    logger.info(
        "Loaded manifest path=%s records=%s age_min=%s age_max=%s",
        path,
        len(records),
        collection.age_min,
        collection.age_max,
    )
    return collection


def sample_target_age(collection: AgedPhotoCollection, rng: np.random.Generator) -> float:
    return float(rng.uniform(collection.age_min, collection.age_max))


def extrapolation_lengths(collection: AgedPhotoCollection) -> Tuple[float, float]:
    return collection.age_min - AGE_MIN, AGE_MAX - collection.age_max


def sample_extrapolation_age(collection: AgedPhotoCollection, rng: np.random.Generator) -> float:
    """Uniform over [0, age_min) and (age_max, 100], weighted by interval length."""
    below, above = extrapolation_lengths(collection)
    if below <= 0 and above <= 0:
        raise NoExtrapolationRangeError("training ages cover [0, 100]; nothing to extrapolate to")
    u = float(rng.uniform(0.0, below + above))
    if u < below:
        return u
    # mirror onto (age_max, 100] so the open endpoint stays excluded
    return AGE_MAX - (u - below)


def subsample_collection(collection: AgedPhotoCollection, n: int, rng: np.random.Generator) -> AgedPhotoCollection:
    """Age-stratified subset of ``n`` train photos; other splits are kept whole.

    Train photos are bucketed by decade and shuffled within each bucket, then
    drawn round-robin across buckets in decade order.
    """
    train = collection.split("train")
    if n <= 0:
        raise DomainError("subset size must be positive; the train split cannot be empty")
    if n > len(train):
        raise DomainError(f"requested {n} train photos but only {len(train)} are available")
    buckets: "OrderedDict[int, List[PhotoRecord]]" = OrderedDict()
    for record in sorted(train, key=lambda r: r.age_years):
        buckets.setdefault(int(record.age_years // 10), []).append(record)
    queues = [[bucket[i] for i in rng.permutation(len(bucket))] for bucket in buckets.values()]
    chosen: List[PhotoRecord] = []
    while len(chosen) < n:
        for queue in queues:
            if queue and len(chosen) < n:
                chosen.append(queue.pop(0))
    keep = set(chosen)
    return collection.with_records(r for r in collection.records if r.split != "train" or r in keep)


def coverage_summary(collection: AgedPhotoCollection) -> Dict[str, Dict[str, int]]:
    """Photo counts per decade label (``"30-39"``) for every split."""
    summary: Dict[str, Dict[str, int]] = {split: {} for split in SPLITS}
    for record in sorted(collection.records, key=lambda r: r.age_years):
        decade = min(int(record.age_years // 10) * 10, 90)
        label = f"{decade}-{decade + 9}" if decade < 90 else "90-100"
        counts = summary.setdefault(record.split, {})
        counts[label] = counts.get(label, 0) + 1
    return summary


def uncovered_ages(
    collection: AgedPhotoCollection,
    grid: Sequence[float],
    window: int = 3,
    split: str = "reference",
) -> List[float]:
    ages = [record.age_years for record in collection.split(split)]
    return [age for age in grid if not any(abs(a - age) <= window for a in ages)]


@dataclass
class IngestReport:
    collection: Optional[AgedPhotoCollection]
    manifest: Path
    written: int
    skipped: int
    skipped_files: List[str] = field(default_factory=list)


def _read_ages_file(path: Path) -> List[Dict[str, str]]:
    if not path.is_file():
        raise ManifestError(f"ages file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = {"filename", "age_years"} - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        return list(reader)


def ingest_and_align(
    raw_dir: Path,
    manifest_out: Path,
    bundle: BackendBundle,
    ages_file: Optional[Path] = None,
) -> IngestReport:
    """Align raw photos listed in ``ages.csv`` and write a manifest next to them.

    Each photo is written to ``aligned/<source path>.png``, so sources that only
    differ by extension stay distinct. Output is sorted by filename so repeated
    runs write the same manifest bytes.
    Unreadable or face-less images are skipped and counted.
    """
    raw_dir = Path(raw_dir)
    manifest_out = Path(manifest_out)
    ages_file = Path(ages_file) if ages_file else raw_dir / "ages.csv"
    rows = _read_ages_file(ages_file)
    out_root = manifest_out.parent
    aligned_dir = out_root / "aligned"
    lines: List[str] = []
    skipped: List[str] = []
    has_train = False
    for lineno, row in sorted(enumerate(rows, start=2), key=lambda item: item[1]["filename"]):
        try:
            entry = ManifestEntry(
                path=row["filename"],
                age_years=float(row["age_years"]),
                split=row.get("split") or "train",
                capture_date=row.get("capture_date") or None,
            )
        except (ValidationError, ValueError) as exc:
            raise ManifestError(f"{ages_file}:{lineno}: invalid row ({exc})") from exc
        source = raw_dir / entry.path
        try:
            aligned = bundle.align_face(load_image(source, dtype=bundle.dtype))
        except DomainError as exc:
            skipped.append(entry.path)
            logger.warning("Skipping unreadable image file=%s skipped=%s (%s)", entry.path, len(skipped), exc)
            continue
        except BackendError as exc:
            skipped.append(entry.path)
            logger.warning("Skipping image without alignable face file=%s skipped=%s (%s)", entry.path, len(skipped), exc)
            continue
        target = aligned_dir / f"{entry.path}.png"
        save_image(aligned, target)
        record = PhotoRecord(target, entry.age_years, entry.split, entry.capture_date)
        lines.append(record.to_manifest_line(root=out_root))
        has_train = has_train or record.split == "train"
    manifest_out.parent.mkdir(parents=True, exist_ok=True)
    manifest_out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.info("Ingested images written=%s skipped=%s manifest=%s", len(lines), len(skipped), manifest_out)
    collection = load_manifest(manifest_out) if has_train else None
    return IngestReport(collection, manifest_out, len(lines), len(skipped), skipped)
