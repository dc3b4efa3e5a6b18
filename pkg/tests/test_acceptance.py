"""Acceptance criteria 1-11, one test each.

Every test records a PASS/FAIL line (printed inline and repeated in the
terminal summary) before asserting, so a failing criterion still reports.
"""

import itertools
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from painbench.dataset import Corpus, ImageSample, PainClass, SubjectID, sample_frames


def _run(acceptance, number, checks):
    """Evaluate ``checks`` (name -> callable returning (ok, detail)); record and assert."""
    failures, details = [], []
    for name, fn in checks.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported with its type
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        details.append(f"{name}={detail}")
        if not ok:
            failures.append(name)
    acceptance(number, not failures, "; ".join(details))
    assert not failures, f"criterion {number} failed checks: {failures}"


# ---------------------------------------------------------------- 1. FACS


def test_criterion_01_facs_exhaustive(acceptance):
    from painbench.scales import AUIntensities, facs_pain_score

    def exhaustive():
        start = time.perf_counter()
        scores = {}
        for v in itertools.product(range(6), repeat=6):
            s = facs_pain_score(AUIntensities(*v))
            if s != v[0] + max(v[1], v[2]) + max(v[3], v[4]) + v[5] or not 0 <= s <= 20:
                return False, f"bad score at {v}"
            scores[v] = s
        for v, s in scores.items():
            for i in range(6):
                if v[i] < 5:
                    up = v[:i] + (v[i] + 1,) + v[i + 1 :]
                    if scores[up] < s:
                        return False, f"not monotone at {v}, axis {i}"
        elapsed = time.perf_counter() - start
        return len(scores) == 46656 and elapsed < 5, f"{len(scores)} vectors in {elapsed:.2f}s"

    _run(acceptance, 1, {"exhaustive": exhaustive})


# ---------------------------------------------------------------- 2. ICC


def _anova_oracle(x):
    n, k = len(x), len(x[0])
    grand = sum(map(sum, x)) / (n * k)
    ss_rows = k * sum((sum(r) / k - grand) ** 2 for r in x)
    ss_cols = n * sum((sum(x[i][j] for i in range(n)) / n - grand) ** 2 for j in range(k))
    ss_tot = sum((x[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = (ss_tot - ss_rows - ss_cols) / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def test_criterion_02_icc(acceptance):
    from painbench.agreement import icc
    from painbench.errors import DegenerateTable

    def oracle():
        rng = np.random.default_rng(2)
        worst, done = 0.0, 0
        while done < 50:
            n = int(rng.integers(3, 21))
            x = rng.normal(5, 2, size=(n, 2)).round(1)
            worst = max(worst, abs(icc(x) - _anova_oracle(x.tolist())))
            done += 1
        return worst < 1e-9, f"max |diff| {worst:.1e} over 50 tables"

    def identical():
        col = np.arange(8, dtype=float)
        v = icc(np.stack([col, col], axis=1))
        return v == pytest.approx(1.0, abs=1e-12), f"{v}"

    def constant():
        try:
            icc(np.full((6, 2), 3.0))
        except DegenerateTable:
            return True, "raises DegenerateTable"
        return False, "no error"

    _run(acceptance, 2, {"oracle": oracle, "identical": identical, "constant": constant})


# ---------------------------------------------------------------- 3. Fleiss


def test_criterion_03_fleiss(acceptance):
    from painbench.agreement import icc_category

    def published():
        got = {v: icc_category(v) for v in (0.751, 0.639, 0.551)}
        want = {0.751: "excellent", 0.639: "fair_good", 0.551: "fair_good"}
        return got == want, str(got)

    _run(acceptance, 3, {"published": published})


# ---------------------------------------------------------------- 4. splits


def test_criterion_04_splits(acceptance, table2_corpus):
    from painbench.experiments import make_splits

    by_id = table2_corpus.by_id()

    def subject_folds():
        folds = make_splits(table2_corpus, "subject_centric_cv", 5, 0).folds
        tests = [{by_id[i].subject for i in f.test_ids} for f in folds]
        sizes = [len(t) for t in tests]
        disjoint = all(not (a & b) for a, b in itertools.combinations(tests, 2))
        return disjoint and sizes == [57] * 5, f"{len({s.subject for s in table2_corpus})} subjects, test sizes {sizes}"

    def image_folds():
        folds = make_splits(table2_corpus, "image_centric_cv", 5, 0).folds
        sizes = sorted(len(f.test_ids) for f in folds)
        cover = sorted(i for f in folds for i in f.test_ids) == sorted(by_id)
        return cover and sizes == [516, 516, 517, 517, 517] and len(by_id) == 2583, f"{len(by_id)} images, {sizes}"

    def leakage():
        rng = np.random.default_rng(4)
        leaks = 0
        for trial in range(1000):
            n, per, k = int(rng.integers(5, 30)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
            samples = tuple(
                ImageSample(SubjectID("synthetic", f"s{i}"), Path(f"/v/{i}_{j}.png"), PainClass.from_index(j % 2), None, j)
                for i in range(n)
                for j in range(per)
            )
            corpus = Corpus(samples, "prop")
            ids = corpus.by_id()
            for f in make_splits(corpus, "subject_centric_cv", k, trial).folds:
                leaks += bool({ids[i].subject for i in f.test_ids} & {ids[i].subject for i in f.train_ids})
        return leaks == 0, f"{leaks} leaks in 1000 trials"

    _run(acceptance, 4, {"subject": subject_folds, "image": image_folds, "leakage": leakage})


# ---------------------------------------------------------------- 5. frames


def test_criterion_05_frame_sampling(acceptance):
    counts = [1, 5, 19, 20, 21, 24, 37, 100]
    samples = tuple(
        ImageSample(SubjectID("unbc", f"u{i}"), Path(f"/v/u{i}/{c.value}_{j}.png"), c, 1 if c is PainClass.PAIN else 0, j)
        for i, n in enumerate(counts)
        for c in PainClass
        for j in range(n + (c is PainClass.PAIN))
    )
    corpus = Corpus(samples, "frames")

    def per_group():
        out = sample_frames(corpus, 20)
        got = {}
        for s in out:
            got[(s.subject, s.pain_class)] = got.get((s.subject, s.pain_class), 0) + 1
        want = {}
        for s in corpus:
            want[(s.subject, s.pain_class)] = want.get((s.subject, s.pain_class), 0) + 1
        ok = all(got[key] == min(n, 20) for key, n in want.items())
        return ok, f"{len(want)} groups, sizes {sorted(set(got.values()))}"

    def idempotent():
        once = sample_frames(corpus, 20)
        return sample_frames(once, 20) == once, "second pass unchanged"

    def deterministic():
        return sample_frames(corpus, 20) == sample_frames(corpus, 20), "repeat identical"

    _run(acceptance, 5, {"counts": per_group, "idempotent": idempotent, "deterministic": deterministic})


# ---------------------------------------------------------------- 6. metrics


def test_criterion_06_metrics(acceptance):
    from painbench.experiments import compute_metrics

    def oracle():
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(1, 80))
            t, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
            m = compute_metrics(t.tolist(), p.tolist())
            if m.accuracy != sum(int(a == b) for a, b in zip(t, p)) / n:
                return False, "accuracy mismatch"
            for c, cls in ((0, PainClass.NO_PAIN), (1, PainClass.PAIN)):
                tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
                fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
                fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
                prec = tp / (tp + fp) if tp + fp else 0.0
                rec = tp / (tp + fn) if tp + fn else 0.0
                f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
                got = m.per_class[cls]
                if (got.precision, got.recall, got.f1) != (prec, rec, f1):
                    return False, f"class {cls.value} mismatch"
        return True, "100 vectors exact"

    def worked():
        t = [1] * 5 + [0] * 5
        p = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0]
        m = compute_metrics(t, p).per_class[PainClass.PAIN]
        ok = abs(m.precision - 0.75) < 1e-4 and abs(m.recall - 0.6) < 1e-4 and abs(m.f1 - 0.6667) < 1e-4
        return ok, f"P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f}"

    _run(acceptance, 6, {"oracle": oracle, "worked_example": worked})


# ---------------------------------------------------------------- 7. preprocessing


def test_criterion_07_preprocessing(acceptance, face_corpus, ground_truth):
    from painbench.models.registry import get_spec
    from painbench.preprocess import WHITE, Preprocessor, load_rgb

    pre = Preprocessor()

    def square():
        bad = []
        for arch in ("tiny_cnn", "songnet", "vgg16"):
            side = get_spec(arch).input_side
            for s in list(face_corpus)[:6]:
                px = pre.process(s, arch).pixels
                if px.shape != (side, side, 3):
                    bad.append((arch, px.shape))
        return not bad, "all square at registered side" if not bad else str(bad)

    def masked_white_and_crop():
        white = total = 0
        contained = 0
        for s in face_corpus:
            clean, mask, prov = pre.crop_and_clean(load_rgb(s.image_path))
            bg = clean[mask == 0]
            total += len(bg)
            white += int(np.all(bg == WHITE, axis=1).sum())
            left, top, side = prov["crop"]
            x, y, w, h = ground_truth[s.image_path].box
            contained += left <= x and top <= y and left + side >= x + w and top + side >= y + h
        ok = white == total and contained == len(face_corpus)
        return ok, f"{white}/{total} background px white, {contained}/{len(face_corpus)} crops contain the box"

    def deterministic():
        a = [Preprocessor().process(s, "tiny_cnn").pixels.tobytes() for s in list(face_corpus)[:5]]
        b = [Preprocessor().process(s, "tiny_cnn").pixels.tobytes() for s in list(face_corpus)[:5]]
        return a == b, "byte identical"

    _run(acceptance, 7, {"square": square, "background": masked_white_and_crop, "determinism": deterministic})


# ---------------------------------------------------------------- 8. training


def test_criterion_08_training(acceptance, tiny_images):
    import torch

    from painbench.models.zoo import TrainConfig, build, gradient_check, predict, train

    def fit():
        cfg = TrainConfig(seed=0)
        start = time.perf_counter()
        rec = train(build("tiny_cnn", seed=0), tiny_images, cfg)
        elapsed = time.perf_counter() - start
        acc = np.mean([predict(rec, im).predicted is im.source_sample.pain_class for im in tiny_images])
        ok = len(tiny_images) == 40 and cfg.epochs == 30 and cfg.learning_rate == 0.001 and acc >= 0.95 and elapsed < 300
        return ok, f"train acc {acc:.3f} after {cfg.epochs} epochs in {elapsed:.1f}s"

    def same_seed():
        cfg = TrainConfig(epochs=4, seed=21)
        a = train(build("tiny_cnn", seed=21), tiny_images, cfg)
        b = train(build("tiny_cnn", seed=21), tiny_images, cfg)
        sa, sb = a.module.state_dict(), b.module.state_dict()
        return a.training_log == b.training_log and all(torch.equal(sa[k], sb[k]) for k in sa), "logs identical"

    def gradcheck():
        clf = build("tiny_cnn", seed=0)
        pixels = np.stack([im.pixels for im in tiny_images[:8]])
        labels = [im.source_sample.pain_class.index for im in tiny_images[:8]]
        err = gradient_check(clf, pixels, labels, n_params=20)
        return len(err) == 20 and err.max() < 1e-3, f"max rel err {err.max():.1e} on {len(err)} params"

    _run(acceptance, 8, {"fit": fit, "same_seed": same_seed, "gradcheck": gradcheck})


# ---------------------------------------------------------------- 9. LIME


def _region_image():
    img = np.full((64, 64, 3), 128, dtype=np.uint8)
    img[8:24, 8:24] = (230, 20, 20)
    img[40:56, 36:60] = (20, 20, 230)
    return img


def _region_model(batch):
    red = (batch[:, 8:24, 8:24, 0] > 200).mean(axis=(1, 2))
    return np.stack([1 - red, red], axis=1)


def test_criterion_09_lime(acceptance):
    from painbench.explain import LimeParams, lime_explain

    params = LimeParams(n_segments=30, n_perturbations=400)
    img = _region_image()

    def constant():
        exp = lime_explain(lambda b: np.tile([0.4, 0.6], (len(b), 1)), img, PainClass.PAIN, params)
        w = np.abs(exp.segment_weights).max()
        return w < 1e-6, f"max |w| {w:.1e}"

    def region():
        exp = lime_explain(_region_model, img, PainClass.PAIN, params)
        top = exp.segments.grid == int(np.argmax(exp.segment_weights))
        inside = top[8:24, 8:24].sum() / top.sum()
        return inside > 0.5 and exp.surrogate_r2 >= 0.9, f"top segment {inside:.0%} in region, R2 {exp.surrogate_r2:.3f}"

    def seeded():
        a = lime_explain(_region_model, img, PainClass.PAIN, params)
        b = lime_explain(_region_model, img, PainClass.PAIN, params)
        return np.array_equal(a.segment_weights, b.segment_weights) and np.array_equal(a.mask, b.mask), "identical"

    _run(acceptance, 9, {"constant": constant, "region": region, "seed": seeded})


# ---------------------------------------------------------------- 10. heatmaps


def _blob(side, cx, cy, r):
    ys, xs = np.mgrid[0:side, 0:side] + 0.5
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r**2))


def test_criterion_10_heatmaps(acceptance):
    from painbench.explain import CANONICAL_LANDMARKS, LocalExplanation, SegmentMap, aggregate_heatmap, warp_to_canonical

    lm = CANONICAL_LANDMARKS * 100

    def exp(mask, sid):
        return LocalExplanation(sid, PainClass.PAIN, np.zeros(1), 1.0, mask.astype(np.uint8), SegmentMap(np.zeros(mask.shape, np.int32), 1))

    def range_and_permutation():
        rng = np.random.default_rng(10)
        items = [(exp(rng.random((100, 100)) > 0.5, str(i)), lm + rng.normal(0, 3, (3, 2))) for i in range(7)]
        a = aggregate_heatmap(items, "m", PainClass.PAIN, "d")
        b = aggregate_heatmap([items[i] for i in rng.permutation(7)], "m", PainClass.PAIN, "d")
        ok = a.grid.min() >= 0 and a.grid.max() <= 1 and np.array_equal(a.grid, b.grid)
        return ok, f"range [{a.grid.min():.2f}, {a.grid.max():.2f}], permutation exact"

    def shifted():
        base = _blob(120, 50, 75, 8) + _blob(120, 30, 35, 5)
        moved = np.roll(base, (10, 10), axis=(0, 1))
        mad = np.abs(warp_to_canonical(base, lm) - warp_to_canonical(moved, lm + 10)).mean()
        return mad < 0.05, f"MAD {mad:.2e}"

    def mass():
        big = _blob(200, 100, 120, 14)
        out = warp_to_canonical(big, CANONICAL_LANDMARKS * 200, 100)
        rel = abs(out.sum() - big.sum() / 4) / (big.sum() / 4)
        return rel < 0.02, f"mass error {rel:.2%}"

    _run(acceptance, 10, {"range_perm": range_and_permutation, "shift": shifted, "mass": mass})


# ---------------------------------------------------------------- 11. end to end


@pytest.mark.slow
def test_criterion_11_end_to_end(acceptance, tmp_path):
    ws = tmp_path / "ws"
    run = ws / "run"
    cli = [sys.executable, "-m", "painbench.cli"]
    start = time.perf_counter()
    fixtures = subprocess.run([*cli, "fixtures", "--out", str(ws)], capture_output=True, text=True)
    proc = subprocess.run(
        [*cli, "run", "--config", str(ws / "painbench.toml"), "--run-dir", str(run)], capture_output=True, text=True
    )
    elapsed = time.perf_counter() - start

    def cli_ok():
        ok = fixtures.returncode == 0 and proc.returncode == 0
        return ok, f"exit {proc.returncode} in {elapsed:.0f}s" + ("" if ok else f": {proc.stderr[-400:]}")

    def trainings():
        plan = json.loads((run / "plan.json").read_text())
        done = sorted(p.parent.relative_to(run).as_posix() for p in run.glob("*/*/fold*/predictions.csv"))
        return len(plan["jobs"]) == 30 and len(done) == 30, f"{len(done)}/{len(plan['jobs'])} trainings"

    def charts():
        figs = run / "reports" / "figures"
        names = sorted(p.name for p in figs.glob("*.png"))
        want = {"accuracy_f1_by_scenario.png"} | {
            f"precision_recall_by_class_{s}.png" for s in ("image_centric_cv", "subject_centric_cv", "external_test")
        }
        return want <= set(names), ", ".join(names)

    def tables():
        summary = (run / "corpus" / "summary.csv").read_text().splitlines()
        agreement = (run / "agreement" / "agreement.csv").read_text().splitlines()
        ok = summary[0].startswith("dataset_tag") and len(summary) >= 4 and len(agreement) >= 4
        return ok, f"summary {len(summary) - 1} rows, agreement {len(agreement) - 1} rows"

    def heatmaps():
        grid = run / "explain" / "heatmaps.png"
        panels = list((run / "explain").glob("*/*/*/heatmap.npy"))
        return grid.is_file() and len(panels) == 8, f"{len(panels)} panels"

    def full_plan():
        out = subprocess.run(
            [*cli, "run", "--config", str(ws / "painbench_full.toml"), "--run-dir", str(tmp_path / "full"), "--plan-only"],
            capture_output=True, text=True,
        )
        jobs = json.loads((tmp_path / "full" / "plan.json").read_text())["jobs"] if out.returncode == 0 else []
        return len(jobs) == 150, f"{len(jobs)} planned trainings"

    def runtime():
        return elapsed < 1800, f"{elapsed:.0f}s"

    _run(
        acceptance,
        11,
        {"cli": cli_ok, "trainings": trainings, "charts": charts, "tables": tables, "heatmaps": heatmaps,
         "plan150": full_plan, "runtime": runtime},
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
