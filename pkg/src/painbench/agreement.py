"""Inter-rater agreement: ICC(2,1), Fleiss categories and stimulus-stratified tables."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import PainClass
from .errors import DegenerateTable, InconsistentRaterSet, InsufficientRaters, InvalidScore, TooFewSubjects
from .scales import SCALES, SCORESHEET_STIMULI, RaterScoreSheet, binarize_consensus

SCALE_LABELS = {"wong_baker": "Wong-Baker", "facs": "FACS", "ncapc": "NCAPC"}
STIMULUS_LABELS = {
    "injection": "Intramuscular injection",
    "stretching": "Muscular stretching",
    "other": "Other",
    "overall": "Overall",
}


@dataclass(frozen=True)
class RatingsTable:
    matrix: np.ndarray  # n_subjects x n_raters
    scale_name: str = ""
    stimulus_labels: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ValueError(f"ratings must be a 2-D matrix, got shape {m.shape}")
        if m.shape[0] < 2:
            raise TooFewSubjects(f"need at least 2 subjects, got {m.shape[0]}")
        if m.shape[1] < 2:
            raise InsufficientRaters(f"need at least 2 raters, got {m.shape[1]}")
        if not np.all(np.isfinite(m)):
            raise ValueError("ratings table has missing or non-finite cells")
        object.__setattr__(self, "matrix", m)


def mean_squares(matrix: np.ndarray) -> tuple[float, float, float]:
    """Two-way ANOVA mean squares (rows, columns, error) without replication."""
    x = np.asarray(matrix, dtype=float)
    n, k = x.shape
    grand = x.mean()
    row_means = x.mean(axis=1, keepdims=True)
    col_means = x.mean(axis=0, keepdims=True)
    ms_rows = k * np.sum((row_means - grand) ** 2) / (n - 1)
    ms_cols = n * np.sum((col_means - grand) ** 2) / (k - 1)
    resid = x - row_means - col_means + grand
    ms_err = np.sum(resid**2) / ((n - 1) * (k - 1))
    return float(ms_rows), float(ms_cols), float(ms_err)


def icc(table: RatingsTable | np.ndarray) -> float:
    """ICC(2,1): two-way random effects, absolute agreement, single rater.

    Negative values are returned as computed.
    """
    if not isinstance(table, RatingsTable):
        table = RatingsTable(np.asarray(table, dtype=float))
    n, k = table.matrix.shape
    ms_r, ms_c, ms_e = mean_squares(table.matrix)
    scale = max(1.0, float(np.abs(table.matrix).max()) ** 2)
    if ms_r <= 1e-14 * scale and ms_e <= 1e-14 * scale:
        raise DegenerateTable("no between-subject or residual variance; ICC is 0/0")
    return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e))


def icc_category(value: float) -> str:
    """Fleiss bands, with boundaries closed upward: low <= 0.40 < fair_good <= 0.75 < excellent."""
    if value > 0.75:
        return "excellent"
    if value > 0.40:
        return "fair_good"
    return "low"


@dataclass(frozen=True)
class AgreementResult:
    icc: float
    category: str
    n_subjects: int
    n_raters: int


def agreement(table: RatingsTable) -> AgreementResult:
    value = icc(table)
    n, k = table.matrix.shape
    return AgreementResult(value, icc_category(value), n, k)


@dataclass
class AgreementReport:
    # (scale, stimulus) -> result; stimulus "overall" holds the per-scale value
    cells: dict[tuple[str, str], AgreementResult] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)  # scale -> {"no_pain": n, "pain": n}
    skipped: list[tuple[str, str, str]] = field(default_factory=list)
    raters: tuple[str, ...] = ()

    def mean_over_scales(self, stimulus: str) -> float:
        values = [r.icc for (s, st), r in self.cells.items() if st == stimulus]
        return float(np.mean(values)) if values else float("nan")

    def to_csv(self, path: os.PathLike | str, scales: Sequence[str] = SCALES) -> Path:
        """Table laid out as source-of-pain rows by measure columns, plus class-count rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_of_pain", *(SCALE_LABELS[s] for s in scales), "mean_of_scales"])
            for stim in (*SCORESHEET_STIMULI, "overall"):
                row = [STIMULUS_LABELS[stim]]
                for s in scales:
                    r = self.cells.get((s, stim))
                    row.append("" if r is None else f"{r.icc:.3f}")
                mean = self.mean_over_scales(stim)
                row.append("" if np.isnan(mean) else f"{mean:.3f}")
                writer.writerow(row)
            writer.writerow(['Videos rated as "no pain"', *(self.counts.get(s, {}).get("no_pain", 0) for s in scales), ""])
            writer.writerow(['Videos rated as "pain"', *(self.counts.get(s, {}).get("pain", 0) for s in scales), ""])
        return path

    def to_json(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "raters": list(self.raters),
            "cells": [
                {"scale": s, "stimulus": st, **asdict(r)} for (s, st), r in sorted(self.cells.items())
            ],
            "counts": self.counts,
            "skipped": [{"scale": s, "stimulus": st, "reason": why} for s, st, why in self.skipped],
        }
        path.write_text(json.dumps(blob, indent=1))
        return path

    def format_table(self, scales: Sequence[str] = SCALES) -> str:
        lines = [f"{'source of pain':<26}" + "".join(f"{SCALE_LABELS[s]:>12}" for s in scales)]
        for stim in (*SCORESHEET_STIMULI, "overall"):
            cells = []
            for s in scales:
                r = self.cells.get((s, stim))
                cells.append(f"{'-' if r is None else f'{r.icc:.3f}':>12}")
            lines.append(f"{STIMULUS_LABELS[stim]:<26}" + "".join(cells))
        for cls in ("no_pain", "pain"):
            lines.append(
                f"{'rated ' + cls:<26}" + "".join(f"{self.counts.get(s, {}).get(cls, 0):>12}" for s in scales)
            )
        return "\n".join(lines)


def stratified_agreement(sheets: Sequence[RaterScoreSheet], scales: Sequence[str] = SCALES) -> AgreementReport:
    """ICC per (scale, stimulus) and overall, plus consensus pain/no-pain counts per scale.

    Every recording must be scored by the same set of raters. A recording is
    left out of a scale's tables when any rater lacks that scale. Cells that
    cannot be computed (fewer than two recordings, zero variance) are listed
    in ``skipped``.
    """
    by_rec: dict[str, dict[str, RaterScoreSheet]] = {}
    stimulus: dict[str, str] = {}
    for s in sheets:
        recs = by_rec.setdefault(s.recording_id, {})
        if s.rater_id in recs:
            raise InvalidScore(f"rater {s.rater_id} scored recording {s.recording_id} twice")
        recs[s.rater_id] = s
        if stimulus.setdefault(s.recording_id, s.stimulus) != s.stimulus:
            raise InvalidScore(f"recording {s.recording_id} has conflicting stimulus tags")
    if not by_rec:
        raise TooFewSubjects("no scoresheets")
    rater_sets = {tuple(sorted(r)) for r in by_rec.values()}
    if len(rater_sets) != 1:
        raise InconsistentRaterSet(f"recordings are scored by different rater sets: {sorted(rater_sets)}")
    raters = rater_sets.pop()
    if len(raters) < 2:
        raise InsufficientRaters(f"need at least two raters, got {list(raters)}")

    report = AgreementReport(raters=raters)
    for scale in scales:
        rows, stims = [], []
        counts = {"no_pain": 0, "pain": 0}
        for rec in sorted(by_rec):
            values = [by_rec[rec][r].score(scale) for r in raters]
            if any(v is None for v in values):
                continue
            rows.append(values)
            stims.append(stimulus[rec])
            label = binarize_consensus(list(zip(raters, values)), rec)
            counts["no_pain" if label.pain_class is PainClass.NO_PAIN else "pain"] += 1
        report.counts[scale] = counts
        matrix = np.array(rows, dtype=float).reshape(-1, len(raters))
        stims = np.array(stims)
        for stim in (*SCORESHEET_STIMULI, "overall"):
            sub = matrix if stim == "overall" else matrix[stims == stim]
            try:
                report.cells[(scale, stim)] = agreement(RatingsTable(sub, scale))
            except (TooFewSubjects, DegenerateTable) as exc:
                report.skipped.append((scale, stim, str(exc)))
    return report
