import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from painbench.agreement import (
    RatingsTable,
    agreement,
    icc,
    icc_category,
    mean_squares,
    stratified_agreement,
)
from painbench.errors import DegenerateTable, InconsistentRaterSet, InsufficientRaters, TooFewSubjects
from painbench.scales import AUIntensities, RaterScoreSheet


def anova_oracle(x):
    """ICC(2,1) from sums of squares written out as explicit loops."""
    n, k = len(x), len(x[0])
    grand = sum(sum(r) for r in x) / (n * k)
    rows = [sum(r) / k for r in x]
    cols = [sum(x[i][j] for i in range(n)) / n for j in range(k)]
    ss_total = sum((x[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    ss_rows = k * sum((m - grand) ** 2 for m in rows)
    ss_cols = n * sum((m - grand) ** 2 for m in cols)
    ss_err = ss_total - ss_rows - ss_cols
    msr, msc, mse = ss_rows / (n - 1), ss_cols / (k - 1), ss_err / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n), (msr, msc, mse)


def test_oracle_equivalence(rng):
    for _ in range(50):
        n = int(rng.integers(3, 21))
        x = rng.integers(0, 11, size=(n, 2)).astype(float)
        if np.ptp(x) == 0:
            continue
        expected, ms = anova_oracle(x.tolist())
        assert abs(icc(x) - expected) < 1e-9
        assert np.allclose(mean_squares(x), ms, atol=1e-9)


def test_published_reference_value():
    # six targets rated by four judges; ICC(2,1) = 0.29 in the reliability literature
    x = np.array([[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]], float)
    assert icc(x) == pytest.approx(0.2898, abs=5e-4)


def test_identical_raters():
    x = np.array([[1, 1], [3, 3], [2, 2], [5, 5]], float)
    assert abs(icc(x) - 1.0) < 1e-9


def test_constant_table():
    with pytest.raises(DegenerateTable):
        icc(np.full((5, 2), 3.0))


def test_table_shape_errors():
    with pytest.raises(TooFewSubjects):
        RatingsTable(np.ones((1, 2)))
    with pytest.raises(InsufficientRaters):
        RatingsTable(np.ones((3, 1)))
    with pytest.raises(ValueError):
        RatingsTable(np.array([[1.0, np.nan], [2.0, 3.0]]))


def test_shifted_copy_below_one():
    a = np.array([1, 4, 2, 6, 3, 5], float)
    assert icc(np.column_stack([a, a + 1])) < 1.0


tables = arrays(float, st.tuples(st.integers(3, 12), st.integers(2, 4)), elements=st.integers(0, 10).map(float))


@settings(max_examples=100, deadline=None)
@given(tables, st.floats(-50, 50), st.floats(0.1, 20))
def test_affine_invariance(x, shift, scale):
    try:
        base = icc(x)
    except DegenerateTable:
        return
    assert icc(x * scale + shift) == pytest.approx(base, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(tables, st.randoms(use_true_random=False))
def test_row_permutation(x, rnd):
    try:
        base = icc(x)
    except DegenerateTable:
        return
    order = list(range(len(x)))
    rnd.shuffle(order)
    assert icc(x[order]) == pytest.approx(base, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(tables)
def test_icc_at_most_one(x):
    try:
        assert icc(x) <= 1.0 + 1e-12
    except DegenerateTable:
        pass


def test_categories():
    assert icc_category(0.751) == "excellent"
    assert icc_category(0.639) == "fair_good"
    assert icc_category(0.551) == "fair_good"
    assert icc_category(0.20) == "low"
    assert icc_category(0.40) == "low"
    assert icc_category(0.405) == "fair_good"
    assert icc_category(0.75) == "fair_good"
    assert icc_category(-0.3) == "low"


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_category_monotone(a, b):
    order = {"low": 0, "fair_good": 1, "excellent": 2}
    lo, hi = sorted((a, b))
    assert order[icc_category(lo)] <= order[icc_category(hi)]


def test_agreement_result():
    r = agreement(RatingsTable(np.array([[1, 2], [3, 3], [5, 4]], float)))
    assert (r.n_subjects, r.n_raters) == (3, 2)
    assert r.category == icc_category(r.icc)


def _sheet(rater, rec, stim, facs_score):
    return RaterScoreSheet(rater, rec, stim, facs=AUIntensities(facs_score, 0, 0, 0, 0, 0))


def test_single_stimulus_identical_raters():
    sheets = [_sheet(r, f"v{i}", "stretching", i % 5) for r in "AB" for i in range(6)]
    report = stratified_agreement(sheets, scales=("facs",))
    assert report.cells[("facs", "stretching")].icc == pytest.approx(1.0)
    assert ("facs", "injection", ) in {(s, st) for s, st, _ in report.skipped}


def test_stratified_ordering(rng):
    sheets = []
    for i in range(30):
        truth = int(rng.integers(0, 5))
        sheets += [_sheet("A", f"s{i}", "stretching", truth), _sheet("B", f"s{i}", "stretching", min(5, truth + int(rng.integers(0, 2))))]
        t2 = int(rng.integers(0, 5))
        sheets += [_sheet("A", f"j{i}", "injection", t2), _sheet("B", f"j{i}", "injection", int(rng.integers(0, 6)))]
    report = stratified_agreement(sheets, scales=("facs",))
    assert report.cells[("facs", "stretching")].icc > report.cells[("facs", "injection")].icc
    assert ("facs", "overall") in report.cells


def test_mean_over_scales_matches_hand_average():
    from painbench.agreement import AgreementReport, AgreementResult

    report = AgreementReport()
    for scale, v in zip(("wong_baker", "facs", "ncapc"), (0.845, 0.739, 0.891)):
        report.cells[(scale, "stretching")] = AgreementResult(v, icc_category(v), 32, 2)
    assert report.mean_over_scales("stretching") == pytest.approx(0.825, abs=5e-4)
    assert icc_category(report.mean_over_scales("stretching")) == "excellent"


def test_inconsistent_raters():
    sheets = [_sheet("A", "v1", "other", 1), _sheet("B", "v1", "other", 2), _sheet("A", "v2", "other", 1), _sheet("C", "v2", "other", 1)]
    with pytest.raises(InconsistentRaterSet):
        stratified_agreement(sheets)


def test_single_rater_sheets():
    with pytest.raises(InsufficientRaters):
        stratified_agreement([_sheet("A", f"v{i}", "other", i) for i in range(4)])


def test_report_files(tmp_path):
    from painbench.fixtures import synthetic_scoresheets
    import csv, json

    report = stratified_agreement(synthetic_scoresheets(seed=0))
    rows = list(csv.reader(report.to_csv(tmp_path / "a.csv").open()))
    assert rows[0][:4] == ["source_of_pain", "Wong-Baker", "FACS", "NCAPC"]
    assert [r[0] for r in rows[1:]] == [
        "Intramuscular injection", "Muscular stretching", "Other", "Overall",
        'Videos rated as "no pain"', 'Videos rated as "pain"',
    ]
    assert rows[5][1:4] == ["20", "19", "16"] and rows[6][1:4] == ["107", "108", "111"]
    blob = json.loads(report.to_json(tmp_path / "a.json").read_text())
    assert len(blob["cells"]) == 12
