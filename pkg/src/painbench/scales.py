"""Observational pain scales and the binary consensus label."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .dataset import PainClass
from .errors import InsufficientRaters, InvalidScore, MissingField, OutOfRangeAU, WrongItemCount

AU_NAMES = ("au4", "au6", "au7", "au9", "au10", "au43")
WONG_BAKER_VALUES = (0, 2, 4, 6, 8, 10)
NCAPC_ITEMS = 18
NCAPC_COLUMNS = tuple(f"ncapc_{i:02d}" for i in range(1, NCAPC_ITEMS + 1))
SCORESHEET_STIMULI = ("injection", "stretching", "other")


@dataclass(frozen=True)
class AUIntensities:
    au4: int = 0
    au6: int = 0
    au7: int = 0
    au9: int = 0
    au10: int = 0
    au43: int = 0

    def __post_init__(self):
        for name in AU_NAMES:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= 5:
                raise OutOfRangeAU(f"{name}={value!r} outside 0..5")


def facs_pain_score(au: AUIntensities) -> int:
    """AU4 + max(AU6, AU7) + max(AU9, AU10) + AU43, on 0..20."""
    return au.au4 + max(au.au6, au.au7) + max(au.au9, au.au10) + au.au43


def ncapc_total(items: Sequence[int]) -> int:
    if len(items) != NCAPC_ITEMS:
        raise WrongItemCount(f"NCAPC needs {NCAPC_ITEMS} items, got {len(items)}")
    for i, v in enumerate(items, start=1):
        if int(v) != v or v < 0:
            raise InvalidScore(f"NCAPC item {i} = {v!r} is not a non-negative integer")
    return int(sum(items))


@dataclass(frozen=True)
class RaterScoreSheet:
    rater_id: str
    recording_id: str
    stimulus: str
    facs: Optional[AUIntensities] = None
    wong_baker: Optional[int] = None
    ncapc_items: Optional[tuple[int, ...]] = None
    ncapc_total: Optional[int] = None

    def __post_init__(self):
        if self.stimulus not in SCORESHEET_STIMULI:
            raise InvalidScore(f"unknown stimulus {self.stimulus!r}; expected {SCORESHEET_STIMULI}")
        if self.wong_baker is not None and self.wong_baker not in WONG_BAKER_VALUES:
            raise InvalidScore(f"Wong-Baker score {self.wong_baker} not one of {WONG_BAKER_VALUES}")
        if self.ncapc_items is not None:
            total = ncapc_total(self.ncapc_items)
            if self.ncapc_total is None:
                object.__setattr__(self, "ncapc_total", total)
            elif self.ncapc_total != total:
                raise InvalidScore(
                    f"{self.rater_id}/{self.recording_id}: NCAPC total {self.ncapc_total} != item sum {total}"
                )

    def score(self, scale: str) -> Optional[int]:
        """Scale score by name: ``facs``, ``wong_baker`` or ``ncapc``."""
        if scale == "facs":
            return None if self.facs is None else facs_pain_score(self.facs)
        if scale == "wong_baker":
            return self.wong_baker
        if scale == "ncapc":
            return self.ncapc_total
        raise KeyError(scale)


SCALES = ("wong_baker", "facs", "ncapc")


@dataclass(frozen=True)
class ConsensusLabel:
    recording_id: str
    pain_class: PainClass
    per_rater_scores: tuple[tuple[str, float], ...]


def binarize_consensus(scores: Sequence[tuple[str, float]], recording_id: str = "") -> ConsensusLabel:
    """NO_PAIN only when every rater scored exactly zero."""
    if len({r for r, _ in scores}) < 2:
        raise InsufficientRaters(f"recording {recording_id!r}: need at least two raters, got {len(scores)}")
    pain_class = PainClass.NO_PAIN if all(s == 0 for _, s in scores) else PainClass.PAIN
    return ConsensusLabel(recording_id, pain_class, tuple((r, s) for r, s in scores))


def _opt_int(row: dict, key: str) -> Optional[int]:
    v = row.get(key)
    if v is None or v.strip() == "":
        return None
    return int(v)


def load_scoresheets(path: os.PathLike | str) -> list[RaterScoreSheet]:
    """Parse a scoresheet CSV, one row per (rater, recording)."""
    path = Path(path)
    sheets = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for required in ("rater_id", "recording_id", "stimulus"):
            if required not in (reader.fieldnames or []):
                raise MissingField(f"{path}: scoresheet lacks column {required!r}")
        for lineno, row in enumerate(reader, start=2):
            aus = {name: _opt_int(row, name) for name in AU_NAMES}
            if all(v is None for v in aus.values()):
                facs = None
            elif any(v is None for v in aus.values()):
                raise MissingField(f"{path}:{lineno}: partial FACS coding")
            else:
                facs = AUIntensities(**aus)
            items = [_opt_int(row, c) for c in NCAPC_COLUMNS]
            if all(v is None for v in items):
                items = None
            elif any(v is None for v in items):
                raise WrongItemCount(f"{path}:{lineno}: NCAPC needs all {NCAPC_ITEMS} items")
            try:
                sheets.append(
                    RaterScoreSheet(
                        rater_id=row["rater_id"].strip(),
                        recording_id=row["recording_id"].strip(),
                        stimulus=row["stimulus"].strip().lower(),
                        facs=facs,
                        wong_baker=_opt_int(row, "wong_baker"),
                        ncapc_items=None if items is None else tuple(items),
                        ncapc_total=_opt_int(row, "ncapc_total"),
                    )
                )
            except (InvalidScore, OutOfRangeAU) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return sheets


def write_scoresheets(sheets: Sequence[RaterScoreSheet], path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["rater_id", "recording_id", "stimulus", *AU_NAMES, "wong_baker", *NCAPC_COLUMNS]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for s in sheets:
            aus = [getattr(s.facs, n) if s.facs else "" for n in AU_NAMES]
            items = list(s.ncapc_items) if s.ncapc_items else [""] * NCAPC_ITEMS
            wb = "" if s.wong_baker is None else s.wong_baker
            writer.writerow([s.rater_id, s.recording_id, s.stimulus, *aus, wb, *items])
    return path


def consensus_labels(sheets: Sequence[RaterScoreSheet], scale: str = "facs") -> list[ConsensusLabel]:
    """Binary consensus per recording on one scale (FACS labels the images by default)."""
    by_rec: dict[str, list[tuple[str, float]]] = {}
    for s in sheets:
        value = s.score(scale)
        if value is not None:
            by_rec.setdefault(s.recording_id, []).append((s.rater_id, value))
    return [binarize_consensus(sorted(v), rec) for rec, v in sorted(by_rec.items())]


def write_consensus_labels(labels: Sequence[ConsensusLabel], path: os.PathLike | str, scale: str = "facs") -> Path:
    """Consensus labels as CSV (recording_id, pain_class, scale, per-rater scores)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "pain_class", "scale", "rater_scores"])
        for lab in labels:
            scores = ";".join(f"{r}={s:g}" for r, s in lab.per_rater_scores)
            writer.writerow([lab.recording_id, lab.pain_class.value, scale, scores])
    return path


def read_consensus_labels(path: os.PathLike | str) -> dict[str, PainClass]:
    """recording_id -> consensus class, for use as a manifest label source."""
    with open(path, newline="") as fh:
        return {r["recording_id"]: PainClass.parse(r["pain_class"]) for r in csv.DictReader(fh)}
