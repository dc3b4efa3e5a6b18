import csv
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from painbench.dataset import (
    Corpus,
    ImageSample,
    PainClass,
    SubjectClinicalRecord,
    SubjectID,
    corpus_summary,
    load_manifest,
    merge,
    sample_frames,
    uniform_indices,
    write_manifest,
)
from painbench.errors import (
    DuplicateSample,
    LabelContradiction,
    MissingField,
    MissingImageFile,
    UnknownDatasetTag,
)

COLUMNS = ["dataset_tag", "local_id", "image_path", "raw_level", "pain_class", "frame_index", "stimulus"]


def _write_rows(tmp_path, rows, columns=COLUMNS, make_images=True):
    path = tmp_path / "manifest.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            if make_images and "image_path" in r:
                img = tmp_path / r["image_path"]
                img.parent.mkdir(parents=True, exist_ok=True)
                if not img.exists():
                    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(img)
            w.writerow(r)
    return path


def _row(tag="mint", local="s1", name="a.png", raw="", cls="", frame="", stim=""):
    return dict(dataset_tag=tag, local_id=local, image_path=f"img/{name}", raw_level=raw,
                pain_class=cls, frame_index=frame, stimulus=stim)


def _sample(tag="mint", local="s1", frame=0, cls=PainClass.PAIN, name=None):
    name = name or f"/data/{tag}/{local}/{cls.value}_{frame}.png"
    return ImageSample(SubjectID(tag, local), Path(name), cls, None, frame)


def test_manifest_three_rows(tmp_path):
    path = _write_rows(tmp_path, [_row(name="a.png", raw="0"), _row(name="b.png", raw="2"), _row(local="s2", name="c.png", cls="pain")])
    corpus = load_manifest(path)
    assert len(corpus) == 3
    assert [s.pain_class for s in corpus] == [PainClass.NO_PAIN, PainClass.PAIN, PainClass.PAIN]
    assert all(s.image_path.is_absolute() for s in corpus)


def test_label_contradiction(tmp_path):
    path = _write_rows(tmp_path, [_row(raw="2", cls="no_pain")])
    with pytest.raises(LabelContradiction):
        load_manifest(path)


def test_raw_zero_with_pain_contradicts(tmp_path):
    with pytest.raises(LabelContradiction):
        load_manifest(_write_rows(tmp_path, [_row(raw="0", cls="pain")]))


def test_missing_label_fields(tmp_path):
    with pytest.raises(MissingField):
        load_manifest(_write_rows(tmp_path, [_row()]))


def test_missing_column(tmp_path):
    cols = ["dataset_tag", "image_path", "raw_level"]
    path = _write_rows(tmp_path, [dict(dataset_tag="mint", image_path="img/a.png", raw_level="1")], cols)
    with pytest.raises(MissingField):
        load_manifest(path)


def test_missing_manifest_file(tmp_path):
    with pytest.raises(MissingField):
        load_manifest(tmp_path / "nope.csv")


def test_unknown_tag(tmp_path):
    with pytest.raises(UnknownDatasetTag):
        load_manifest(_write_rows(tmp_path, [_row(tag="affectnet", raw="1")]))


def test_missing_image(tmp_path):
    path = _write_rows(tmp_path, [_row(raw="1")], make_images=False)
    with pytest.raises(MissingImageFile):
        load_manifest(path)


def test_undecodable_image(tmp_path):
    path = _write_rows(tmp_path, [_row(raw="1")], make_images=False)
    (tmp_path / "img").mkdir()
    (tmp_path / "img" / "a.png").write_bytes(b"not an image")
    with pytest.raises(MissingImageFile):
        load_manifest(path)


def test_order_independent_of_row_order(tmp_path):
    rows = [_row(local=f"s{i % 3}", name=f"{i}.png", raw=str(i % 2), frame=str(i)) for i in range(9)]
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = load_manifest(_write_rows(tmp_path / "a", rows))
    b = load_manifest(_write_rows(tmp_path / "b", rows[::-1]))
    assert [s.sample_id for s in a] == [s.sample_id for s in b]
    assert [s.frame_index for s in a] == [0, 3, 6, 1, 4, 7, 2, 5, 8]


def test_manifest_roundtrip(face_corpus, tmp_path):
    path = write_manifest(face_corpus, tmp_path / "m.csv")
    again = load_manifest(path)
    assert [s.identity() for s in again] == [s.identity() for s in face_corpus]
    assert corpus_summary(again).total.images == len(face_corpus)


def _spacing_oracle(n, k):
    """Exact rational evaluation of round(i(n-1)/(k-1)) with halves rounded up."""
    if k == 1:
        return [(n - 1) // 2]
    return [math.floor(Fraction(i * (n - 1), k - 1) + Fraction(1, 2)) for i in range(k)]


def test_uniform_indices_formula():
    oracle = _spacing_oracle
    for n in range(1, 60):
        for k in range(1, n + 1):
            assert uniform_indices(n, k) == oracle(n, k)


def _video(n_pain, n_no_pain, local="s1", tag="mint"):
    samples = [_sample(tag, local, f, PainClass.PAIN) for f in range(n_pain)]
    samples += [_sample(tag, local, f, PainClass.NO_PAIN) for f in range(n_no_pain)]
    return Corpus(tuple(samples), "v")


def test_sample_frames_100_to_20():
    out = sample_frames(_video(100, 0), 20)
    frames = [s.frame_index for s in out]
    assert frames == _spacing_oracle(100, 20)
    assert len(frames) == 20 and frames[0] == 0 and frames[-1] == 99


def test_sample_frames_small_groups():
    assert len(sample_frames(_video(12, 3), 20)) == 15
    five = _video(5, 0)
    assert [s.identity() for s in sample_frames(five, 5)] == [s.identity() for s in five]


def test_sample_frames_single_takes_middle():
    assert [s.frame_index for s in sample_frames(_video(7, 0), 1)] == [3]


def test_sample_frames_stills_untouched():
    stills = Corpus(tuple(ImageSample(SubjectID("delaware", "d1"), Path(f"/x/{i}.png"), PainClass.PAIN, 1, None) for i in range(30)), "d")
    assert len(sample_frames(stills, 20)) == 30


@settings(max_examples=60, deadline=None)
@given(
    groups=st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), min_size=1, max_size=5),
    budget=st.integers(1, 25),
)
def test_sample_frames_properties(groups, budget):
    samples = []
    for i, (p, n) in enumerate(groups):
        samples += list(_video(p, n, local=f"s{i}"))
    corpus = Corpus(tuple(samples), "v")
    once = sample_frames(corpus, budget)
    assert [s.identity() for s in sample_frames(once, budget)] == [s.identity() for s in once]
    assert [s.identity() for s in sample_frames(corpus, budget)] == [s.identity() for s in once]
    for i, (p, n) in enumerate(groups):
        for cls, count in ((PainClass.PAIN, p), (PainClass.NO_PAIN, n)):
            got = [s for s in once if s.subject.local_id == f"s{i}" and s.pain_class is cls]
            assert len(got) == min(count, budget)


def test_merge_single_and_duplicates():
    a = _video(3, 2)
    assert [s.identity() for s in merge([a])] == [s.identity() for s in a]
    with pytest.raises(DuplicateSample):
        merge([a, Corpus((a.samples[0],), "dup")])


def test_merge_preserves_counts():
    a, b = _video(3, 2, local="s1"), _video(4, 1, local="s2", tag="unbc")
    assert len(merge([a, b])) == 10


def test_merge_empty_list():
    with pytest.raises(ValueError):
        merge([])


def test_summary_empty():
    s = corpus_summary(Corpus((), "empty"))
    assert (s.total.subjects, s.total.images, s.total.pain, s.total.no_pain) == (0, 0, 0, 0)


def test_summary_class_counts():
    s = corpus_summary(_video(4, 6))
    assert (s.total.pain, s.total.no_pain, s.total.images, s.total.subjects) == (4, 6, 10, 1)


def test_table2_replica_summary(table2_corpus, tmp_path):
    s = corpus_summary(table2_corpus)
    rows = {r.dataset_tag: (r.subjects, r.images) for r in s.rows}
    assert rows == {"mint": (20, 800), "delaware": (240, 803), "unbc": (25, 980)}
    assert (s.total.subjects, s.total.images) == (285, 2583)
    assert s.total.levels == 2
    path = s.to_csv(tmp_path / "summary.csv")
    assert "285" in path.read_text() and "2583" in path.read_text()


def test_subject_ids():
    assert str(SubjectID("unbc", "042")) == "unbc:042"
    with pytest.raises(UnknownDatasetTag):
        SubjectID("ck+", "1")
    assert SubjectID("mint", "a") != SubjectID("unbc", "a")


def test_clinical_record_levels():
    SubjectClinicalRecord(SubjectID("cppain", "p1"), 3, 5, "spastic")
    with pytest.raises(ValueError):
        SubjectClinicalRecord(SubjectID("cppain", "p1"), 6, None, None)
    with pytest.raises(ValueError):
        SubjectClinicalRecord(SubjectID("cppain", "p1"), None, None, "unknown")


def test_pain_class_parse():
    assert PainClass.parse("Pain") is PainClass.PAIN
    assert PainClass.parse("no pain") is PainClass.NO_PAIN
    assert PainClass.from_index(1) is PainClass.PAIN
