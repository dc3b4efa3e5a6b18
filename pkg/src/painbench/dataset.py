"""Corpus data model, manifest ingestion, merging and per-subject frame sampling."""

from __future__ import annotations

import csv
import enum
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from PIL import Image

from .errors import (
    DuplicateSample,
    LabelContradiction,
    MissingField,
    MissingImageFile,
    UnknownDatasetTag,
)

DATASET_TAGS = ("mint", "delaware", "unbc", "cppain", "synthetic")

# highest raw pain level per source; any level >= 1 is PAIN
RAW_LEVEL_MAX = {"mint": 4, "unbc": 4, "synthetic": 4, "delaware": 1, "cppain": 1}

MANIFEST_COLUMNS = (
    "dataset_tag",
    "local_id",
    "image_path",
    "raw_level",
    "pain_class",
    "frame_index",
    "stimulus",
)


class PainClass(str, enum.Enum):
    NO_PAIN = "no_pain"
    PAIN = "pain"

    @classmethod
    def parse(cls, text: str) -> "PainClass":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        if key in ("pain", "1"):
            return cls.PAIN
        if key in ("no_pain", "nopain", "0"):
            return cls.NO_PAIN
        raise ValueError(f"unrecognised pain class {text!r}")

    @property
    def index(self) -> int:
        """Position in the (NO_PAIN, PAIN) probability vector."""
        return 0 if self is PainClass.NO_PAIN else 1

    @classmethod
    def from_index(cls, i: int) -> "PainClass":
        return cls.NO_PAIN if i == 0 else cls.PAIN


class Stimulus(str, enum.Enum):
    INJECTION = "injection"
    STRETCHING = "stretching"
    OTHER = "other"
    UNKNOWN = "unknown"


@dataclass(frozen=True, order=True)
class SubjectID:
    dataset_tag: str
    local_id: str

    def __post_init__(self):
        if self.dataset_tag not in DATASET_TAGS:
            raise UnknownDatasetTag(
                f"unknown dataset tag {self.dataset_tag!r}; expected one of {DATASET_TAGS}"
            )

    def __str__(self) -> str:
        return f"{self.dataset_tag}:{self.local_id}"


@dataclass(frozen=True)
class ImageSample:
    subject: SubjectID
    image_path: Path
    pain_class: PainClass
    raw_level: Optional[int] = None
    frame_index: Optional[int] = None
    stimulus: Stimulus = Stimulus.UNKNOWN

    def __post_init__(self):
        if self.raw_level is not None:
            expected = PainClass.PAIN if self.raw_level >= 1 else PainClass.NO_PAIN
            if expected is not self.pain_class:
                raise LabelContradiction(
                    f"{self.subject} {self.image_path}: raw_level={self.raw_level} "
                    f"contradicts pain_class={self.pain_class.value}"
                )
        if self.frame_index is not None and self.frame_index < 0:
            raise ValueError(f"negative frame_index {self.frame_index}")

    @property
    def sample_id(self) -> str:
        frame = "-" if self.frame_index is None else str(self.frame_index)
        return f"{self.subject}:{frame}:{self.image_path.name}"

    def sort_key(self):
        frame = -1 if self.frame_index is None else self.frame_index
        return (self.subject.dataset_tag, self.subject.local_id, frame, str(self.image_path))

    def identity(self):
        return (self.subject, str(self.image_path), self.frame_index)


@dataclass(frozen=True)
class Corpus:
    """An immutable, deterministically ordered list of samples."""

    samples: tuple[ImageSample, ...]
    name: str = "corpus"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(sorted(self.samples, key=ImageSample.sort_key)))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def subjects(self) -> list[SubjectID]:
        return sorted({s.subject for s in self.samples})

    def by_id(self) -> dict[str, ImageSample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, sample_ids: Iterable[str], name: Optional[str] = None) -> "Corpus":
        index = self.by_id()
        return Corpus(tuple(index[i] for i in sample_ids), name or self.name)


@dataclass(frozen=True)
class SubjectClinicalRecord:
    subject: SubjectID
    gmfcs_level: Optional[int] = None
    cfcs_level: Optional[int] = None
    cp_subtype: Optional[str] = None

    def __post_init__(self):
        for name in ("gmfcs_level", "cfcs_level"):
            level = getattr(self, name)
            if level is not None and not 1 <= level <= 5:
                raise ValueError(f"{name}={level} outside 1..5")
        if self.cp_subtype is not None and self.cp_subtype not in (
            "spastic",
            "dyskinetic",
            "ataxic",
            "mixed",
        ):
            raise ValueError(f"unknown cerebral palsy subtype {self.cp_subtype!r}")


def _blank(value: Optional[str]) -> bool:
    return value is None or value.strip() == ""


def _check_image(path: Path) -> None:
    if not path.is_file():
        raise MissingImageFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of types here
        raise MissingImageFile(f"image does not decode: {path} ({exc})") from exc


def load_manifest(path: os.PathLike | str, name: Optional[str] = None, check_images: bool = True) -> Corpus:
    """Read a manifest CSV into a :class:`Corpus`.

    Image paths are resolved relative to the manifest's directory. Rows may
    carry ``raw_level``, ``pain_class`` or both; when both are given they are
    cross-checked.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingField(f"manifest not found: {path}")
    base = path.parent
    samples = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("dataset_tag", "local_id", "image_path"):
            if required not in header:
                raise MissingField(f"{path}: manifest lacks column {required!r}")
        for lineno, row in enumerate(reader, start=2):
            samples.append(_parse_row(row, base, f"{path}:{lineno}", check_images))
    return Corpus(tuple(samples), name or path.stem)


def _parse_row(row: dict, base: Path, where: str, check_images: bool) -> ImageSample:
    for key in ("dataset_tag", "local_id", "image_path"):
        if _blank(row.get(key)):
            raise MissingField(f"{where}: empty {key}")
    raw_text, class_text = row.get("raw_level"), row.get("pain_class")
    if _blank(raw_text) and _blank(class_text):
        raise MissingField(f"{where}: row needs raw_level or pain_class")

    tag = row["dataset_tag"].strip()
    subject = SubjectID(tag, row["local_id"].strip())
    raw_level = None if _blank(raw_text) else int(raw_text)
    if raw_level is not None and not 0 <= raw_level <= RAW_LEVEL_MAX[tag]:
        raise LabelContradiction(f"{where}: raw_level {raw_level} outside 0..{RAW_LEVEL_MAX[tag]} for {tag}")
    if _blank(class_text):
        pain_class = PainClass.PAIN if raw_level >= 1 else PainClass.NO_PAIN
    else:
        pain_class = PainClass.parse(class_text)
    frame_text = row.get("frame_index")
    stim_text = row.get("stimulus")

    image_path = (base / row["image_path"].strip()).resolve()
    if check_images:
        _check_image(image_path)
    try:
        return ImageSample(
            subject=subject,
            image_path=image_path,
            pain_class=pain_class,
            raw_level=raw_level,
            frame_index=None if _blank(frame_text) else int(frame_text),
            stimulus=Stimulus.UNKNOWN if _blank(stim_text) else Stimulus(stim_text.strip().lower()),
        )
    except LabelContradiction as exc:
        raise LabelContradiction(f"{where}: {exc}") from None


def write_manifest(corpus: Corpus, path: os.PathLike | str) -> Path:
    """Write ``corpus`` as a manifest CSV with paths relative to ``path``'s directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for s in corpus:
            writer.writerow(
                [
                    s.subject.dataset_tag,
                    s.subject.local_id,
                    os.path.relpath(s.image_path, base),
                    "" if s.raw_level is None else s.raw_level,
                    s.pain_class.value,
                    "" if s.frame_index is None else s.frame_index,
                    s.stimulus.value,
                ]
            )
    return path


def uniform_indices(n: int, k: int) -> list[int]:
    """Indices of ``k`` evenly spaced picks out of ``n`` ordered items."""
    if k <= 0 or n <= 0:
        return []
    k = min(n, k)
    if k == 1:
        return [(n - 1) // 2]
    # half-up rounding; Python's round() is banker's
    return [int(math.floor(i * (n - 1) / (k - 1) + 0.5)) for i in range(k)]


def sample_frames(corpus: Corpus, budget: int = 20) -> Corpus:
    """Keep at most ``budget`` evenly spaced frames per (subject, class).

    Only video-derived samples (those with a frame index) are subsampled;
    still images pass through untouched.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    groups: dict[tuple, list[ImageSample]] = defaultdict(list)
    kept = []
    for s in corpus:
        if s.frame_index is None:
            kept.append(s)
        else:
            groups[(s.subject, s.pain_class)].append(s)
    for frames in groups.values():
        frames.sort(key=lambda s: (s.frame_index, str(s.image_path)))
        kept.extend(frames[i] for i in uniform_indices(len(frames), budget))
    return Corpus(tuple(kept), corpus.name)


def merge(corpora: Sequence[Corpus], name: str = "PAIN-DB") -> Corpus:
    if not corpora:
        raise ValueError("merge needs at least one corpus")
    seen = set()
    samples = []
    for c in corpora:
        for s in c:
            key = s.identity()
            if key in seen:
                raise DuplicateSample(f"sample appears twice: {s.subject} {s.image_path} frame={s.frame_index}")
            seen.add(key)
            samples.append(s)
    return Corpus(tuple(samples), name)


@dataclass(frozen=True)
class SummaryRow:
    dataset_tag: str
    subjects: int
    images: int
    pain: int
    no_pain: int
    levels: int


@dataclass(frozen=True)
class CorpusSummary:
    rows: tuple[SummaryRow, ...]
    total: SummaryRow

    def as_records(self) -> list[dict]:
        return [r.__dict__.copy() for r in (*self.rows, self.total)]

    def format_table(self) -> str:
        header = f"{'dataset':<12}{'subjects':>10}{'images':>10}{'pain':>8}{'no_pain':>9}{'levels':>8}"
        lines = [header, "-" * len(header)]
        for r in (*self.rows, self.total):
            lines.append(
                f"{r.dataset_tag:<12}{r.subjects:>10}{r.images:>10}{r.pain:>8}{r.no_pain:>9}{r.levels:>8}"
            )
        return "\n".join(lines)

    def to_csv(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(SummaryRow.__dataclass_fields__))
            writer.writeheader()
            writer.writerows(self.as_records())
        return path


def _summary_row(tag: str, samples: list[ImageSample]) -> SummaryRow:
    classes = Counter(s.pain_class for s in samples)
    raw = {s.raw_level for s in samples if s.raw_level is not None}
    return SummaryRow(
        dataset_tag=tag,
        subjects=len({s.subject for s in samples}),
        images=len(samples),
        pain=classes[PainClass.PAIN],
        no_pain=classes[PainClass.NO_PAIN],
        levels=len(raw) if raw else len(classes),
    )


def corpus_summary(corpus: Corpus) -> CorpusSummary:
    """Per-source subject/image/class counts plus totals.

    ``levels`` counts the distinct raw pain levels observed in a source (or
    the distinct classes when no raw levels are present); the total row
    always reports the two classes of the merged corpus.
    """
    by_tag: dict[str, list[ImageSample]] = defaultdict(list)
    for s in corpus:
        by_tag[s.subject.dataset_tag].append(s)
    rows = tuple(_summary_row(tag, by_tag[tag]) for tag in DATASET_TAGS if tag in by_tag)
    total = _summary_row("total", list(corpus))
    total = SummaryRow("total", total.subjects, total.images, total.pain, total.no_pain, 2 if len(corpus) else 0)
    return CorpusSummary(rows, total)
