"""Deterministic synthetic face corpora with recorded ground truth.

Faces are schematic: a skin-toned head ellipse over a clothed torso on a
tinted, slightly noisy background. The pain class is encoded in the mouth
region (open dark grimace vs. thin closed line) together with lowered brows
and squeezed eyes, so the two classes are separable by the fraction of dark
pixels inside the recorded ``mouth_box``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .dataset import (
    DATASET_TAGS,
    Corpus,
    ImageSample,
    PainClass,
    Stimulus,
    SubjectID,
    merge,
    sample_frames,
    write_manifest,
)
from .errors import InvalidParams

# background tint per source, RGB; all fail the skin-colour rule
_BACKGROUNDS = {
    "mint": (70, 140, 190),
    "delaware": (90, 170, 150),
    "unbc": (60, 110, 170),
    "cppain": (110, 150, 200),
    "synthetic": (80, 150, 200),
}
_CLOTHING = (45, 55, 85)
_DARK = (35, 22, 22)
_BROW = (130, 90, 70)


@dataclass(frozen=True)
class SyntheticFaceParams:
    seed: int = 0
    n_subjects: int = 10
    frames_per_subject_per_class: int = 20
    image_side: int = 128
    dataset_tag: str = "synthetic"
    video: bool = True
    # (subject_index, "pain" | "no_pain", count) entries replacing the default count
    count_overrides: tuple[tuple[int, str, int], ...] = ()
    stimulus: str = "unknown"

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise InvalidParams(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.frames_per_subject_per_class < 0:
            raise InvalidParams("frames_per_subject_per_class must be >= 0")
        if self.image_side < 32:
            raise InvalidParams(f"image_side must be >= 32, got {self.image_side}")
        if self.dataset_tag not in DATASET_TAGS:
            raise InvalidParams(f"unknown dataset tag {self.dataset_tag!r}")
        for idx, cls, count in self.count_overrides:
            if not 0 <= idx < self.n_subjects or count < 0:
                raise InvalidParams(f"bad count override {(idx, cls, count)}")
            PainClass.parse(cls)

    def count_for(self, subject_index: int, pain_class: PainClass) -> int:
        for idx, cls, count in self.count_overrides:
            if idx == subject_index and PainClass.parse(cls) is pain_class:
                return count
        return self.frames_per_subject_per_class


@dataclass(frozen=True)
class FaceTruth:
    """Ground truth for one rendered image, in source-image pixel coordinates."""

    box: tuple[float, float, float, float]  # x, y, w, h of the head ellipse
    left_eye: tuple[float, float]
    right_eye: tuple[float, float]
    mouth: tuple[float, float]
    mouth_box: tuple[float, float, float, float]
    pain_class: str

    @property
    def landmarks(self) -> np.ndarray:
        return np.array([self.left_eye, self.right_eye, self.mouth], dtype=float)


def _subject_look(seed: int, tag: str, subject_index: int) -> dict:
    rng = np.random.default_rng([seed, DATASET_TAGS.index(tag), subject_index, 7])
    return {
        "skin": (int(rng.integers(185, 230)), int(rng.integers(125, 165)), int(rng.integers(90, 120))),
        "scale": float(rng.uniform(0.9, 1.08)),
        "dx": float(rng.uniform(-0.04, 0.04)),
        "dy": float(rng.uniform(-0.03, 0.03)),
        "bg_shift": rng.integers(-15, 16, size=3),
    }


def render_face(
    side: int,
    pain_class: PainClass,
    look: dict,
    rng: np.random.Generator,
    background: tuple[int, int, int] = _BACKGROUNDS["synthetic"],
    center: Optional[tuple[float, float]] = None,
) -> tuple[np.ndarray, FaceTruth]:
    """Draw one schematic face and return (uint8 RGB array, ground truth)."""
    bg = np.clip(np.array(background) + look.get("bg_shift", 0), 0, 255)
    noise = rng.integers(-5, 6, size=(side, side, 3))
    canvas = np.clip(bg[None, None, :] + noise, 0, 255).astype(np.uint8)
    im = Image.fromarray(canvas)
    draw = ImageDraw.Draw(im)

    jitter = rng.uniform(-0.012, 0.012, size=2) * side
    if center is None:
        cx = side * (0.5 + look["dx"]) + jitter[0]
        cy = side * (0.42 + look["dy"]) + jitter[1]
    else:
        cx, cy = center
    a = 0.22 * side * look["scale"]
    b = 0.28 * side * look["scale"]

    # torso and neck
    draw.rectangle([cx - 0.35 * side, cy + 0.85 * b, cx + 0.35 * side, side + 2], fill=_CLOTHING)
    draw.rectangle([cx - 0.35 * a, cy + 0.6 * b, cx + 0.35 * a, cy + 1.2 * b], fill=_CLOTHING)
    draw.ellipse([cx - a, cy - b, cx + a, cy + b], fill=look["skin"])

    pain = pain_class is PainClass.PAIN
    eye_y = cy - 0.15 * b
    eyes = [(cx - 0.4 * a, eye_y), (cx + 0.4 * a, eye_y)]
    for ex, ey in eyes:
        if pain:
            rx, ry = 0.15 * a, 0.05 * a
        else:
            rx = ry = 0.12 * a
        draw.ellipse([ex - rx, ey - ry, ex + rx, ey + ry], fill=_DARK)

    brow_w = max(1, round(0.035 * side))
    for sign, (ex, _) in zip((-1, 1), eyes):
        outer, inner = ex + sign * 0.18 * a, ex - sign * 0.18 * a
        if pain:
            y_out, y_in = cy - 0.36 * b, cy - 0.3 * b
        else:
            y_out = y_in = cy - 0.42 * b
        draw.line([(outer, y_out), (inner, y_in)], fill=_BROW, width=brow_w)

    mx, my = cx, cy + 0.52 * b
    if pain:
        mw, mh = 0.45 * a, 0.2 * b
    else:
        mw, mh = 0.4 * a, 0.035 * b
    draw.ellipse([mx - mw, my - mh, mx + mw, my + mh], fill=_DARK)

    truth = FaceTruth(
        box=(cx - a, cy - b, 2 * a, 2 * b),
        left_eye=eyes[0],
        right_eye=eyes[1],
        mouth=(mx, my),
        mouth_box=(mx - 0.5 * a, my - 0.25 * b, a, 0.5 * b),
        pain_class=pain_class.value,
    )
    return np.asarray(im), truth


def mouth_dark_fraction(image: np.ndarray, truth: FaceTruth) -> float:
    """The documented class feature: share of dark pixels inside the mouth box."""
    x, y, w, h = truth.mouth_box
    region = image[int(y) : int(np.ceil(y + h)), int(x) : int(np.ceil(x + w))]
    return float((region.mean(axis=2) < 80).mean())


def generate_corpus(params: SyntheticFaceParams, out_dir: os.PathLike | str) -> tuple[Corpus, dict]:
    """Render a synthetic corpus under ``out_dir``.

    Writes ``images/``, ``manifest.csv`` and ``ground_truth.json`` and returns
    the corpus plus the ground-truth mapping keyed by manifest-relative path.
    """
    params.validate()
    out_dir = Path(out_dir)
    tag = params.dataset_tag
    samples = []
    truth: dict[str, dict] = {}
    for si in range(params.n_subjects):
        local_id = f"{tag[:1]}{si:03d}"
        look = _subject_look(params.seed, tag, si)
        for pain_class in (PainClass.NO_PAIN, PainClass.PAIN):
            for j in range(params.count_for(si, pain_class)):
                rng = np.random.default_rng([params.seed, DATASET_TAGS.index(tag), si, pain_class.index, j])
                pixels, gt = render_face(params.image_side, pain_class, look, rng, _BACKGROUNDS[tag])
                rel = Path("images") / tag / local_id / f"{pain_class.value}_{j:04d}.png"
                path = out_dir / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(pixels).save(path, format="PNG")
                if pain_class is PainClass.PAIN:
                    raw_level = 1 + (j % 4) if tag in ("mint", "unbc", "synthetic") else 1
                else:
                    raw_level = 0
                samples.append(
                    ImageSample(
                        subject=SubjectID(tag, local_id),
                        image_path=path.resolve(),
                        pain_class=pain_class,
                        raw_level=raw_level,
                        frame_index=j if params.video else None,
                        stimulus=Stimulus(params.stimulus),
                    )
                )
                truth[rel.as_posix()] = asdict(gt)
    corpus = Corpus(tuple(samples), tag)
    write_manifest(corpus, out_dir / "manifest.csv")
    with (out_dir / "ground_truth.json").open("w") as fh:
        json.dump({"params": asdict(params), "images": truth}, fh, indent=1, sort_keys=True)
    return corpus, truth


def load_ground_truth(path: os.PathLike | str) -> dict[Path, FaceTruth]:
    """Map absolute image paths to :class:`FaceTruth` from a ground_truth.json."""
    path = Path(path)
    with path.open() as fh:
        data = json.load(fh)
    out = {}
    for rel, gt in data["images"].items():
        out[(path.parent / rel).resolve()] = FaceTruth(
            box=tuple(gt["box"]),
            left_eye=tuple(gt["left_eye"]),
            right_eye=tuple(gt["right_eye"]),
            mouth=tuple(gt["mouth"]),
            mouth_box=tuple(gt["mouth_box"]),
            pain_class=gt["pain_class"],
        )
    return out


def table2_replica(out_dir: os.PathLike | str, seed: int = 0, image_side: int = 48, raw_frames: int = 24) -> Corpus:
    """Bookkeeping replica of the merged three-source corpus (285 subjects, 2583 images).

    Video sources are rendered with ``raw_frames`` frames per subject and
    class and then reduced with :func:`sample_frames` to 20; two UNBC-like
    subjects have only 10 pain frames, giving 980 rather than 1000 images.
    """
    if raw_frames < 20:
        raise InvalidParams("raw_frames must be >= 20 to exercise frame sampling")
    out_dir = Path(out_dir)
    mint, _ = generate_corpus(
        SyntheticFaceParams(seed, 20, raw_frames, image_side, "mint"), out_dir / "mint"
    )
    delaware_overrides = tuple((i, "no_pain", 1) for i in range(240)) + tuple(
        (i, "pain", 3 if i < 83 else 2) for i in range(240)
    )
    delaware, _ = generate_corpus(
        SyntheticFaceParams(seed, 240, 2, image_side, "delaware", video=False, count_overrides=delaware_overrides),
        out_dir / "delaware",
    )
    unbc, _ = generate_corpus(
        SyntheticFaceParams(seed, 25, raw_frames, image_side, "unbc", count_overrides=((0, "pain", 10), (1, "pain", 10))),
        out_dir / "unbc",
    )
    merged = merge([sample_frames(c, 20) for c in (mint, delaware, unbc)], "PAIN-DB")
    write_manifest(merged, out_dir / "pain_db_manifest.csv")
    return merged


def render_two_faces(side: int = 160, seed: int = 0) -> tuple[np.ndarray, list[FaceTruth]]:
    """A fixture with two faces side by side; the right face is drawn partly occluded."""
    rng = np.random.default_rng(seed)
    look = {"skin": (210, 150, 110), "scale": 0.55, "dx": 0.0, "dy": 0.0, "bg_shift": np.zeros(3, int)}
    left, t1 = render_face(side, PainClass.NO_PAIN, look, rng, center=(0.27 * side, 0.4 * side))
    right, t2 = render_face(side, PainClass.PAIN, look, rng, center=(0.73 * side, 0.4 * side))
    image = left.copy()
    image[:, side // 2 :] = right[:, side // 2 :]
    # occlude a wedge of the right face to lower its shape score
    x, y, w, h = t2.box
    image[int(y) : int(y + h * 0.35), int(x + w * 0.6) : int(x + w) + 1] = _BACKGROUNDS["synthetic"]
    return image, [t1, t2]


# recordings per stimulus and consensus no-pain counts per scale, in the
# layout of the clinical agreement table
SCORESHEET_LAYOUT = {"injection": 77, "stretching": 32, "other": 18}
NO_PAIN_COUNTS = {"wong_baker": 20, "facs": 19, "ncapc": 16}
# per-stimulus rater noise (in latent units); familiar stimuli get less noise
RATER_NOISE = {"injection": 1.1, "stretching": 0.35, "other": 0.7}


def synthetic_scoresheets(
    seed: int = 0,
    layout: Optional[dict[str, int]] = None,
    no_pain_counts: Optional[dict[str, int]] = None,
    noise: Optional[dict[str, float]] = None,
    raters: tuple[str, ...] = ("rater_a", "rater_b"),
):
    """Two-rater scoresheets with a known consensus tally per scale.

    Each recording has a latent severity in [0.5, 4.5]. Raters see it with
    Gaussian noise whose scale depends on the stimulus, so agreement is
    ordered by ``noise``. For each scale the first ``no_pain_counts[scale]``
    recordings of a seeded permutation are scored zero by every rater; every
    other recording gets a nonzero score from the first rater.
    """
    from .scales import AU_NAMES, AUIntensities, RaterScoreSheet

    layout = layout or SCORESHEET_LAYOUT
    no_pain_counts = no_pain_counts or NO_PAIN_COUNTS
    noise = noise or RATER_NOISE
    rng = np.random.default_rng(seed)
    recordings = [(f"rec{i:03d}", stim) for i, stim in enumerate(s for s, n in layout.items() for _ in range(n))]
    n = len(recordings)
    if any(v > n for v in no_pain_counts.values()):
        raise InvalidParams("more no-pain recordings requested than recordings exist")
    order = rng.permutation(n)
    zero = {scale: set(order[:count].tolist()) for scale, count in no_pain_counts.items()}
    latent = rng.uniform(0.5, 4.5, size=n)
    au_profile = rng.uniform(0.6, 1.0, size=(n, len(AU_NAMES)))

    sheets = []
    for r_i, rater in enumerate(raters):
        for i, (rec, stim) in enumerate(recordings):
            sd = noise[stim]
            seen = latent[i] + rng.normal(0.0, sd)
            floor = 1 if r_i == 0 else 0
            if i in zero["facs"]:
                facs = AUIntensities(*([0] * len(AU_NAMES)))
            else:
                aus = np.clip(np.rint(seen * au_profile[i] + rng.normal(0, sd / 2, len(AU_NAMES))), 0, 5).astype(int)
                aus[0] = max(aus[0], floor)
                facs = AUIntensities(*aus.tolist())
            if i in zero["wong_baker"]:
                wb = 0
            else:
                wb = int(np.clip(2 * np.rint(seen * 1.1), 2 * floor, 10))
            if i in zero["ncapc"]:
                items = (0,) * 18
            else:
                base = np.clip(np.rint(seen / 1.5 + rng.normal(0, sd / 2, 18)), 0, 3).astype(int)
                base[0] = max(base[0], floor)
                items = tuple(base.tolist())
            sheets.append(RaterScoreSheet(rater, rec, stim, facs, wb, items))
    return sheets


_CONFIG_TEMPLATE = """\
# painbench run configuration (paths relative to this file)

[data]
manifests = {manifests}
external_manifests = ["cppain/manifest.csv"]
corpus_name = "PAIN-DB"
external_name = "CP-PAIN"
frame_budget = {budget}
scoresheets = "scoresheets.csv"

[preprocess]
margin = 0.2
confidence_floor = 0.9
min_coverage = 0.05

[experiment]
scenarios = ["image_centric_cv", "subject_centric_cv", "external_test"]
architectures = {architectures}
k = 5
seed = {seed}
jobs = 1
require_pretrained_weights = {require}

[train]
epochs = 30
learning_rate = 0.001
batch_size = 32
rotation_degrees = 15.0
mirror = true
contrast_range = [0.8, 1.2]

[explain]
enabled = true
scenario = "external_test"
n_segments = 50
n_perturbations = 1000
kernel_width = 0.25
top_k = 5
max_samples = {max_samples}
"""

FULL_ARCHITECTURES = (
    "alexnet", "songnet", "weinet", "vgg16", "vgg19",
    "resnet50", "resnet101v2", "inception_v3", "xception", "silnet",
)


def _toml_list(items) -> str:
    return "[" + ", ".join(f'"{i}"' for i in items) + "]"


def write_fixture_workspace(out_dir: os.PathLike | str, preset: str = "small", seed: int = 0) -> dict[str, Path]:
    """Synthetic corpora, external test set, scoresheets and run configs in one directory.

    ``small`` is sized for a full three-scenario run in minutes on a CPU;
    ``table2`` reproduces the bookkeeping of the merged three-source corpus.
    Writes ``painbench.toml`` (tiny_cnn and songnet) and
    ``painbench_full.toml`` (the ten published architectures).
    """
    from .scales import write_scoresheets

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if preset == "small":
        side = 96
        parts = {
            "mint": SyntheticFaceParams(seed, 5, 6, side, "mint"),
            "unbc": SyntheticFaceParams(seed, 5, 6, side, "unbc"),
            "delaware": SyntheticFaceParams(seed, 12, 1, side, "delaware", video=False),
        }
        manifests = []
        for tag, params in parts.items():
            generate_corpus(params, out / "pain_db" / tag)
            manifests.append(f"pain_db/{tag}/manifest.csv")
        budget, max_samples = 4, 6
        n_external = 8
    elif preset == "table2":
        side = 48
        table2_replica(out / "pain_db", seed, side)
        manifests = ["pain_db/pain_db_manifest.csv"]
        budget, max_samples = 20, 8
        n_external = 55
    else:
        raise InvalidParams(f"unknown preset {preset!r}; expected 'small' or 'table2'")
    generate_corpus(SyntheticFaceParams(seed + 1, n_external, 1, max(side, 64), "cppain", video=False), out / "cppain")
    write_scoresheets(synthetic_scoresheets(seed), out / "scoresheets.csv")

    paths = {"workspace": out}
    for name, archs, require in (
        ("painbench.toml", ("tiny_cnn", "songnet"), "true"),
        ("painbench_full.toml", FULL_ARCHITECTURES, "true"),
    ):
        text = _CONFIG_TEMPLATE.format(
            manifests=_toml_list(manifests),
            budget=budget,
            architectures=_toml_list(archs),
            seed=seed,
            require=require,
            max_samples=max_samples,
        )
        (out / name).write_text(text)
        paths[name] = out / name
    return paths
