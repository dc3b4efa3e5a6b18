"""Training scenarios, evaluation metrics and fold-averaged reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .dataset import Corpus, PainClass
from .errors import EmptyTestSet, TooFewImages, TooFewSubjects

log = logging.getLogger(__name__)

SCENARIOS = ("image_centric_cv", "subject_centric_cv", "external_test")
CLASSES = (PainClass.NO_PAIN, PainClass.PAIN)


@dataclass(frozen=True)
class Fold:
    index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int


@dataclass(frozen=True)
class SplitPlan:
    scenario: str
    folds: tuple[Fold, ...]
    k: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {"index": f.index, "seed": f.seed, "train": list(f.train_ids), "test": list(f.test_ids)}
                for f in self.folds
            ],
        }


def make_splits(
    corpus: Corpus,
    scenario: str,
    k: int = 5,
    seed: int = 0,
    external: Optional[Corpus] = None,
) -> SplitPlan:
    """Fold structure for one scenario.

    ``image_centric_cv`` shuffles images and cuts them into ``k`` contiguous
    chunks; ``subject_centric_cv`` does the same with subjects, so no subject
    straddles train and test; ``external_test`` trains on all of ``corpus``
    and tests on all of ``external`` ``k`` times with seeds ``seed + i``.
    """
    rng = np.random.default_rng(seed)
    ids = [s.sample_id for s in corpus]
    if scenario == "image_centric_cv":
        if k < 2:
            raise ValueError("cross-validation needs k >= 2")
        if len(ids) < k:
            raise TooFewImages(f"{len(ids)} images cannot fill {k} folds")
        chunks = np.array_split(rng.permutation(len(ids)), k)
        folds = []
        for i, chunk in enumerate(chunks):
            test = set(chunk.tolist())
            folds.append(
                Fold(
                    i,
                    tuple(ids[j] for j in range(len(ids)) if j not in test),
                    tuple(ids[j] for j in sorted(test)),
                    seed + i,
                )
            )
    elif scenario == "subject_centric_cv":
        if k < 2:
            raise ValueError("cross-validation needs k >= 2")
        subjects = corpus.subjects
        if len(subjects) < k:
            raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {k} folds")
        chunks = np.array_split(rng.permutation(len(subjects)), k)
        folds = []
        for i, chunk in enumerate(chunks):
            test_subjects = {subjects[j] for j in chunk}
            train = tuple(s.sample_id for s in corpus if s.subject not in test_subjects)
            test = tuple(s.sample_id for s in corpus if s.subject in test_subjects)
            folds.append(Fold(i, train, test, seed + i))
    elif scenario == "external_test":
        if external is None or len(external) == 0:
            raise TooFewImages("external_test needs a non-empty external corpus")
        if k < 1:
            raise ValueError("external_test needs k >= 1 replicas")
        test = tuple(s.sample_id for s in external)
        folds = [Fold(i, tuple(ids), test, seed + i) for i in range(k)]
    else:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return SplitPlan(scenario, tuple(folds), k, seed)


# --- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: float


@dataclass(frozen=True)
class FoldMetrics:
    accuracy: float
    per_class: dict[PainClass, ClassMetrics]
    macro_f1: float
    confusion: tuple[tuple[float, float], tuple[float, float]]  # rows: true, cols: predicted; NO_PAIN first

    def flat(self) -> dict[str, float]:
        out = {"accuracy": self.accuracy, "macro_f1": self.macro_f1}
        for cls in CLASSES:
            m = self.per_class[cls]
            for name in ("precision", "recall", "f1", "support"):
                out[f"{name}_{cls.value}"] = getattr(m, name)
        (tn, fp), (fn, tp) = self.confusion
        out.update(tn=tn, fp=fp, fn=fn, tp=tp)
        return out


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


def compute_metrics(y_true: Sequence[PainClass | int], y_pred: Sequence[PainClass | int]) -> FoldMetrics:
    """Accuracy, per-class precision/recall/F1 and macro F1; zero denominators give 0."""
    t = np.array([y.index if isinstance(y, PainClass) else int(y) for y in y_true])
    p = np.array([y.index if isinstance(y, PainClass) else int(y) for y in y_pred])
    if len(t) == 0:
        raise EmptyTestSet("no test predictions")
    if len(t) != len(p):
        raise ValueError("label and prediction vectors differ in length")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (t, p), 1)
    per_class = {}
    for cls in CLASSES:
        c = cls.index
        tp = cm[c, c]
        precision = _ratio(tp, cm[:, c].sum())
        recall = _ratio(tp, cm[c, :].sum())
        per_class[cls] = ClassMetrics(precision, recall, f1_score(precision, recall), int(cm[c, :].sum()))
    return FoldMetrics(
        accuracy=float(np.trace(cm) / cm.sum()),
        per_class=per_class,
        macro_f1=(per_class[PainClass.NO_PAIN].f1 + per_class[PainClass.PAIN].f1) / 2,
        confusion=((int(cm[0, 0]), int(cm[0, 1])), (int(cm[1, 0]), int(cm[1, 1]))),
    )


def average_metrics(folds: Sequence[FoldMetrics], reducer: Callable = np.mean) -> FoldMetrics:
    """Component-wise reduction (mean by default) across folds."""

    def red(values):
        return float(reducer(np.array(values, dtype=float)))

    per_class = {
        cls: ClassMetrics(
            *(red([getattr(f.per_class[cls], name) for f in folds]) for name in ("precision", "recall", "f1", "support"))
        )
        for cls in CLASSES
    }
    confusion = tuple(
        tuple(red([f.confusion[i][j] for f in folds]) for j in range(2)) for i in range(2)
    )
    return FoldMetrics(
        accuracy=red([f.accuracy for f in folds]),
        per_class=per_class,
        macro_f1=red([f.macro_f1 for f in folds]),
        confusion=confusion,
    )


@dataclass
class EvaluationReport:
    architecture: str
    scenario: str
    per_fold: list[FoldMetrics]
    averaged: FoldMetrics = field(init=False)
    std: FoldMetrics = field(init=False)

    def __post_init__(self):
        self.averaged = average_metrics(self.per_fold)
        self.std = average_metrics(self.per_fold, np.std)


@dataclass(frozen=True)
class PredictionRow:
    sample_id: str
    label: PainClass
    p_no_pain: float
    p_pain: float
    predicted: PainClass


def evaluate(record, test_images: Sequence) -> tuple[FoldMetrics, list[PredictionRow]]:
    """Metrics and per-sample predictions of a trained model on preprocessed test images."""
    from .models.zoo import Prediction, predict_proba

    if len(test_images) == 0:
        raise EmptyTestSet("no test images")
    probs = predict_proba(record, np.stack([im.pixels for im in test_images]))
    rows = []
    for im, p in zip(test_images, probs):
        pred = Prediction((float(p[0]), float(p[1])))
        s = im.source_sample
        rows.append(PredictionRow(s.sample_id, s.pain_class, pred.probs[0], pred.probs[1], pred.predicted))
    return compute_metrics([r.label for r in rows], [r.predicted for r in rows]), rows


def write_predictions(rows: Sequence[PredictionRow], path: os.PathLike | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label", "p_no_pain", "p_pain", "predicted"])
        for r in rows:
            writer.writerow([r.sample_id, r.label.value, repr(r.p_no_pain), repr(r.p_pain), r.predicted.value])


def read_predictions(path: os.PathLike | str) -> list[PredictionRow]:
    with open(path, newline="") as fh:
        return [
            PredictionRow(
                r["sample_id"], PainClass(r["label"]), float(r["p_no_pain"]), float(r["p_pain"]), PainClass(r["predicted"])
            )
            for r in csv.DictReader(fh)
        ]


# --- scenario execution -----------------------------------------------------------


@dataclass(frozen=True)
class Job:
    scenario: str
    architecture: str
    fold: int
    seed: int
    n_train: int
    n_test: int

    @property
    def relpath(self) -> str:
        return f"{self.scenario}/{self.architecture}/fold{self.fold}"


def plan_jobs(plans: Sequence[SplitPlan], architectures: Sequence[str]) -> list[Job]:
    """One training job per (scenario, architecture, fold)."""
    return [
        Job(plan.scenario, arch, f.index, f.seed, len(f.train_ids), len(f.test_ids))
        for plan in plans
        for arch in architectures
        for f in plan.folds
    ]


def write_plan(jobs: Sequence[Job], path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"n_jobs": len(jobs), "jobs": [asdict(j) for j in jobs]}, indent=1))
    return path


def _job_fingerprint(arch: str, config_dict: dict, train_fp: str, test_ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"arch": arch, "config": config_dict}, sort_keys=True).encode())
    h.update(train_fp.encode())
    for i in sorted(test_ids):
        h.update(i.encode())
    return h.hexdigest()


@dataclass
class _JobPayload:
    architecture: str
    config_dict: dict
    train_images: list
    test_images: list
    out_dir: Optional[str]
    fingerprint: str
    weights_directory: Optional[str]
    require_weights: bool


def _execute(payload: _JobPayload) -> list[PredictionRow]:
    from .models.zoo import TrainConfig, build, train

    config = TrainConfig.from_dict(payload.config_dict)
    classifier = build(payload.architecture, config.seed, payload.weights_directory, payload.require_weights)
    record = train(classifier, payload.train_images, config)
    _, rows = evaluate(record, payload.test_images)
    if payload.out_dir is not None:
        out = Path(payload.out_dir)
        record.save(out)
        write_predictions(rows, out / "predictions.csv")
        (out / "job.json").write_text(json.dumps({"fingerprint": payload.fingerprint}))
    return rows


def run_scenario(
    plan: SplitPlan,
    architectures: Sequence[str],
    config,
    images_for: Callable[[str], Mapping[str, object]],
    run_dir: Optional[os.PathLike | str] = None,
    jobs: int = 1,
    weights_directory: Optional[str] = None,
    require_weights: bool = True,
) -> list[EvaluationReport]:
    """Train and evaluate one model per (architecture, fold).

    ``images_for(arch)`` maps sample ids to images preprocessed for that
    architecture; ids absent from the mapping (preprocessing failures) are
    dropped with a warning. With ``run_dir`` set, each job writes
    ``<run_dir>/<scenario>/<arch>/fold<i>/`` and completed jobs whose
    fingerprint matches are reloaded instead of retrained. Each fold trains
    with ``config`` re-seeded to the fold's seed.
    """
    from .models.zoo import fingerprint_images

    payloads: list[tuple[str, int, _JobPayload]] = []
    done: dict[tuple[str, int], list[PredictionRow]] = {}
    for arch in architectures:
        images = images_for(arch)
        for fold in plan.folds:
            train_imgs = [images[i] for i in fold.train_ids if i in images]
            test_imgs = [images[i] for i in fold.test_ids if i in images]
            dropped = len(fold.train_ids) + len(fold.test_ids) - len(train_imgs) - len(test_imgs)
            if dropped:
                log.warning("%s/%s fold %d: %d samples lack preprocessed images", plan.scenario, arch, fold.index, dropped)
            config_dict = {**config.to_dict(), "seed": fold.seed}
            fp = _job_fingerprint(arch, config_dict, fingerprint_images(train_imgs), [im.source_sample.sample_id for im in test_imgs])
            out_dir = None
            if run_dir is not None:
                out_dir = Path(run_dir) / plan.scenario / arch / f"fold{fold.index}"
                marker = out_dir / "job.json"
                if marker.is_file() and (out_dir / "predictions.csv").is_file():
                    if json.loads(marker.read_text()).get("fingerprint") == fp:
                        log.info("skipping completed job %s", out_dir)
                        done[(arch, fold.index)] = read_predictions(out_dir / "predictions.csv")
                        continue
            payloads.append(
                (arch, fold.index, _JobPayload(arch, config_dict, train_imgs, test_imgs,
                                               None if out_dir is None else str(out_dir), fp,
                                               weights_directory, require_weights))
            )

    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_execute, [p for _, _, p in payloads]))
    else:
        results = [_execute(p) for _, _, p in payloads]
    for (arch, fold_index, _), rows in zip(payloads, results):
        done[(arch, fold_index)] = rows

    reports = []
    for arch in architectures:
        folds = [
            compute_metrics([r.label for r in done[(arch, f.index)]], [r.predicted for r in done[(arch, f.index)]])
            for f in plan.folds
        ]
        reports.append(EvaluationReport(arch, plan.scenario, folds))
    return reports


# --- reporting -------------------------------------------------------------------

METRIC_COLUMNS = (
    "accuracy", "macro_f1",
    "precision_no_pain", "recall_no_pain", "f1_no_pain", "support_no_pain",
    "precision_pain", "recall_pain", "f1_pain", "support_pain",
    "tn", "fp", "fn", "tp",
)


def write_metrics_csv(reports: Sequence[EvaluationReport], path: os.PathLike | str) -> Path:
    """One row per fold plus ``mean`` and ``std`` rows per (scenario, architecture)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "architecture", "fold", *METRIC_COLUMNS])
        for rep in reports:
            entries = [(str(i), f) for i, f in enumerate(rep.per_fold)]
            entries += [("mean", rep.averaged), ("std", rep.std)]
            for fold, metrics in entries:
                flat = metrics.flat()
                writer.writerow([rep.scenario, rep.architecture, fold, *(repr(float(flat[c])) for c in METRIC_COLUMNS)])
    return path


def read_metrics_csv(path: os.PathLike | str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in METRIC_COLUMNS:
            r[c] = float(r[c])
    return rows


SCENARIO_LABELS = {
    "image_centric_cv": "image-centric CV",
    "subject_centric_cv": "subject-centric CV",
    "external_test": "external test",
}


def _grouped_bars(ax, groups: Sequence[str], series: dict[str, Sequence[float]], ylabel: str):
    n = len(series)
    width = 0.8 / max(n, 1)
    x = np.arange(len(groups))
    for i, (label, values) in enumerate(series.items()):
        ax.bar(x + (i - (n - 1) / 2) * width, values, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")


def figure_scenario_metrics(reports: Sequence[EvaluationReport], metrics=("accuracy", "macro_f1")):
    """Fold-averaged metrics by network, one bar per scenario, one panel per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    archs = list(dict.fromkeys(r.architecture for r in reports))
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    index = {(r.scenario, r.architecture): r for r in reports}
    fig, axes = plt.subplots(len(metrics), 1, figsize=(max(6, 1.2 * len(archs) + 3), 3.2 * len(metrics)), squeeze=False)
    for ax, metric in zip(axes[:, 0], metrics):
        series = {
            SCENARIO_LABELS.get(s, s): [
                index[(s, a)].averaged.flat()[metric] if (s, a) in index else 0.0 for a in archs
            ]
            for s in scenarios
        }
        _grouped_bars(ax, archs, series, "F1" if metric == "macro_f1" else metric)
    fig.tight_layout()
    return fig


def figure_per_class(reports: Sequence[EvaluationReport], scenario: str = "external_test"):
    """Per-class precision (top) and recall (bottom) by network for one scenario."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    chosen = [r for r in reports if r.scenario == scenario]
    archs = [r.architecture for r in chosen]
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 1.2 * len(archs) + 3), 6.4), squeeze=False)
    for ax, metric in zip(axes[:, 0], ("precision", "recall")):
        series = {
            cls.value.replace("_", " "): [getattr(r.averaged.per_class[cls], metric) for r in chosen]
            for cls in (PainClass.PAIN, PainClass.NO_PAIN)
        }
        _grouped_bars(ax, archs, series, metric)
    fig.tight_layout()
    return fig


def render_report(reports: Sequence[EvaluationReport], out_dir: os.PathLike | str) -> dict[str, Path]:
    """Write metrics.csv, the accuracy/F1 chart and one per-class precision/recall chart per scenario."""
    import matplotlib.pyplot as plt

    if not reports:
        raise ValueError("no reports to render")
    out_dir = Path(out_dir)
    figures = out_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": write_metrics_csv(reports, out_dir / "metrics.csv")}
    fig = figure_scenario_metrics(reports)
    paths["scenario_metrics"] = figures / "accuracy_f1_by_scenario.png"
    fig.savefig(paths["scenario_metrics"], dpi=100)
    plt.close(fig)
    for scenario in dict.fromkeys(r.scenario for r in reports):
        fig = figure_per_class(reports, scenario)
        paths[f"per_class_{scenario}"] = figures / f"precision_recall_by_class_{scenario}.png"
        fig.savefig(paths[f"per_class_{scenario}"], dpi=100)
        plt.close(fig)
    return paths
