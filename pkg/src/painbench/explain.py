"""LIME explanations and their aggregation into canonical-face heatmaps.

A local explanation fits a kernel-weighted ridge surrogate of one class
probability on random segment on/off vectors. Its top-k positive segments
form a binary mask; masks are warped into a canonical face frame through a
three-landmark similarity transform and averaged per (model, class, dataset).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataset import PainClass
from .errors import (
    DegenerateLandmarks,
    EmptyExplanationSet,
    LandmarksNotFound,
    SegmentationFailure,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

# canonical (x, y) of left eye, right eye, mouth in the unit square
CANONICAL_LANDMARKS = np.array([[0.3, 0.35], [0.7, 0.35], [0.5, 0.75]])
CANONICAL_SIDE = 100


@dataclass(frozen=True)
class LimeParams:
    n_segments: int = 50
    n_perturbations: int = 1000
    kernel_width: float = 0.25
    top_k: int = 5
    seed: int = 0
    ridge_alpha: float = 1.0
    compactness: float = 10.0
    batch_size: int = 100


@dataclass(frozen=True)
class SegmentMap:
    grid: np.ndarray
    n_segments: int

    def __post_init__(self):
        ids = np.unique(self.grid)
        if len(ids) != self.n_segments or ids[0] != 0 or ids[-1] != self.n_segments - 1:
            raise SegmentationFailure("segment ids must cover 0..n_segments-1 exactly")


@dataclass(frozen=True)
class LocalExplanation:
    sample_id: str
    target_class: PainClass
    segment_weights: np.ndarray
    surrogate_r2: float
    mask: np.ndarray
    segments: SegmentMap
    intercept: float = 0.0


@dataclass(frozen=True)
class GlobalHeatmap:
    grid: np.ndarray  # min-max normalised mean of canonical masks
    raw: np.ndarray  # un-normalised mean
    model: str
    pain_class: PainClass
    dataset: str
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise EmptyExplanationSet("heatmap needs at least one sample")
        if self.grid.min() < 0 or self.grid.max() > 1:
            raise ValueError("heatmap values must lie in [0, 1]")


def segment_image(image: np.ndarray, n_segments: int = 50, compactness: float = 10.0) -> SegmentMap:
    """SLIC superpixels, relabelled to 0..n-1."""
    from skimage.segmentation import relabel_sequential, slic

    labels = slic(image, n_segments=n_segments, compactness=compactness, start_label=0, channel_axis=-1)
    labels, _, _ = relabel_sequential(labels)
    labels = labels - labels.min()
    n = int(labels.max()) + 1
    if n < 2:
        raise SegmentationFailure(f"segmentation produced {n} segment(s)")
    return SegmentMap(labels.astype(np.int32), n)


def _classifier_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if callable(model) and not hasattr(model, "architecture") and not hasattr(model, "spec"):
        return model
    from .models.zoo import predict_proba

    return lambda batch: predict_proba(model, batch)


def _input_side(model) -> Optional[int]:
    spec = getattr(model, "architecture", None) or getattr(model, "spec", None)
    return None if spec is None else spec.input_side


def cosine_distance_to_ones(z: np.ndarray) -> np.ndarray:
    """Cosine distance between each on/off row and the all-on vector."""
    norms = np.linalg.norm(z, axis=1) * np.sqrt(z.shape[1])
    dots = z.sum(axis=1)
    out = np.ones(len(z))
    nz = norms > 0
    out[nz] = 1.0 - dots[nz] / norms[nz]
    return out


def weighted_ridge(x: np.ndarray, y: np.ndarray, w: np.ndarray, alpha: float) -> tuple[np.ndarray, float, float]:
    """Weighted ridge with unpenalised intercept; returns (coef, intercept, weighted R^2)."""
    wsum = w.sum()
    x_mean = (w[:, None] * x).sum(axis=0) / wsum
    y_mean = (w * y).sum() / wsum
    xc, yc = x - x_mean, y - y_mean
    xw = xc * w[:, None]
    coef = np.linalg.solve(xc.T @ xw + alpha * np.eye(x.shape[1]), xw.T @ yc)
    intercept = y_mean - x_mean @ coef
    resid = y - (x @ coef + intercept)
    ss_res = (w * resid**2).sum()
    ss_tot = (w * yc**2).sum()
    r2 = 1.0 if ss_tot <= 1e-18 else 1.0 - ss_res / ss_tot
    return coef, float(intercept), float(r2)


def lime_explain(
    model,
    image,
    target_class: PainClass,
    params: LimeParams = LimeParams(),
    sample_id: str = "",
) -> LocalExplanation:
    """Local explanation of ``model``'s ``target_class`` probability on one image.

    ``model`` may be a trained record, a built classifier, or any callable
    mapping a uint8 batch (N x H x W x 3) to (N x 2) probabilities ordered
    (NO_PAIN, PAIN). ``image`` is a preprocessed image or a uint8 array.
    Switched-off segments are filled with the image's mean colour.
    """
    pixels = getattr(image, "pixels", image)
    pixels = np.asarray(pixels, dtype=np.uint8)
    if not sample_id and getattr(image, "source_sample", None) is not None:
        sample_id = image.source_sample.sample_id
    side = _input_side(model)
    if side is not None and pixels.shape[:2] != (side, side):
        raise ShapeMismatch(f"model expects {side}x{side}, image is {pixels.shape[:2]}")
    classify = _classifier_fn(model)

    segments = segment_image(pixels, params.n_segments, params.compactness)
    n_seg = segments.n_segments
    rng = np.random.default_rng(params.seed)
    z = rng.integers(0, 2, size=(params.n_perturbations, n_seg)).astype(np.float64)
    z[0] = 1.0
    fill = pixels.reshape(-1, 3).mean(axis=0).round().astype(np.uint8)

    target = PainClass(target_class).index
    y = np.empty(len(z))
    grid = segments.grid
    for start in range(0, len(z), params.batch_size):
        chunk = z[start : start + params.batch_size]
        batch = np.repeat(pixels[None], len(chunk), axis=0)
        off = chunk[:, grid] == 0  # N x H x W
        batch[off] = fill
        y[start : start + len(chunk)] = np.asarray(classify(batch))[:, target]

    d = cosine_distance_to_ones(z)
    kernel = np.sqrt(np.exp(-(d**2) / params.kernel_width**2))
    coef, intercept, r2 = weighted_ridge(z, y, kernel, params.ridge_alpha)

    positive = np.flatnonzero(coef > 0)
    chosen = positive[np.argsort(-coef[positive], kind="stable")][: params.top_k]
    mask = np.isin(grid, chosen).astype(np.uint8)
    return LocalExplanation(sample_id, PainClass(target_class), coef, r2, mask, segments, intercept)


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares similarity (rotation, uniform scale, translation) with dst ~= A @ src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = (sc**2).sum() / len(src)
    cov = dc.T @ sc / len(src)
    u, sv, vt = np.linalg.svd(cov)
    sign = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[1, 1] = -1
    rot = u @ sign @ vt
    scale = np.trace(np.diag(sv) @ sign) / var_s
    a = scale * rot
    return a, mu_d - a @ mu_s


def check_landmarks(landmarks: Optional[np.ndarray]) -> np.ndarray:
    if landmarks is None:
        raise LandmarksNotFound("no landmarks for this image")
    lm = np.asarray(landmarks, dtype=float)
    if lm.shape != (3, 2) or not np.all(np.isfinite(lm)):
        raise LandmarksNotFound(f"expected 3 (x, y) landmarks, got shape {lm.shape}")
    if np.linalg.norm(lm[0] - lm[1]) < 1e-6:
        raise DegenerateLandmarks("eye landmarks coincide")
    u, v = lm[1] - lm[0], lm[2] - lm[0]
    area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
    if area < 1e-6 * max(1.0, np.ptp(lm) ** 2):
        raise DegenerateLandmarks("landmarks are collinear")
    return lm


def warp_to_canonical(grid: np.ndarray, landmarks: np.ndarray, side: int = CANONICAL_SIDE) -> np.ndarray:
    """Resample ``grid`` into the canonical face frame.

    ``landmarks`` are (x, y) of left eye, right eye and mouth in the grid's
    continuous pixel coordinates (pixel centres at +0.5). Values are
    resampled bilinearly; cells mapping outside the source are 0.
    """
    lm = check_landmarks(landmarks)
    a, t = fit_similarity(lm, CANONICAL_LANDMARKS * side)
    inv = np.linalg.inv(a)
    ys, xs = np.mgrid[0:side, 0:side] + 0.5
    q = np.stack([xs.ravel(), ys.ravel()]) - t[:, None]
    src = inv @ q
    coords = np.stack([src[1] - 0.5, src[0] - 0.5])
    out = ndimage.map_coordinates(np.asarray(grid, dtype=float), coords, order=1, mode="constant", cval=0.0)
    return out.reshape(side, side)


def _minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def aggregate_heatmap(
    items: Sequence[tuple[LocalExplanation, np.ndarray]],
    model: str,
    pain_class: PainClass,
    dataset: str,
    side: int = CANONICAL_SIDE,
) -> GlobalHeatmap:
    """Cell-wise mean of canonical masks, min-max normalised to [0, 1]."""
    if not items:
        raise EmptyExplanationSet(f"no explanations for {model}/{pain_class}/{dataset}")
    for exp, _ in items:
        if exp.target_class is not PainClass(pain_class):
            raise ValueError(f"explanation {exp.sample_id} targets {exp.target_class}, not {pain_class}")
    warped = np.stack([warp_to_canonical(exp.mask, lm, side) for exp, lm in items])
    # sorting along the sample axis makes the sum independent of input order
    raw = np.sort(warped, axis=0).sum(axis=0) / len(items)
    return GlobalHeatmap(_minmax(raw), raw, model, PainClass(pain_class), dataset, len(items))


def explain_images(
    record,
    images: Sequence,
    pain_class: PainClass,
    dataset: str,
    params: LimeParams = LimeParams(),
    max_samples: Optional[int] = None,
    landmark_detector=None,
) -> GlobalHeatmap:
    """Explain up to ``max_samples`` images of ``pain_class`` and aggregate them.

    Landmarks come from each image's preprocessing provenance or, failing
    that, from ``landmark_detector``; images without landmarks are skipped.
    """
    chosen = [im for im in images if im.source_sample.pain_class is PainClass(pain_class)]
    if max_samples is not None:
        chosen = chosen[:max_samples]
    items = []
    name = getattr(getattr(record, "architecture", None), "name", str(record))
    for i, im in enumerate(chosen):
        lm = im.landmarks
        if lm is None and landmark_detector is not None:
            try:
                lm = landmark_detector.detect(im.pixels)
            except LandmarksNotFound:
                lm = None
        if lm is None:
            log.warning("skipping %s: no landmarks", im.source_sample.sample_id)
            continue
        exp = lime_explain(record, im, pain_class, LimeParams(**{**params.__dict__, "seed": params.seed + i}))
        items.append((exp, lm))
    return aggregate_heatmap(items, name, pain_class, dataset)


# --- rendering -----------------------------------------------------------------

COLORMAP = "inferno"


def colormap_lut(name: str = COLORMAP) -> np.ndarray:
    import matplotlib

    return (matplotlib.colormaps[name](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)


def colorize(grid: np.ndarray, name: str = COLORMAP) -> np.ndarray:
    idx = np.clip(np.round(np.asarray(grid) * 255), 0, 255).astype(np.int64)
    return colormap_lut(name)[idx]


def invert_colormap(rgb: np.ndarray, name: str = COLORMAP) -> np.ndarray:
    """Nearest-colour lookup back to [0, 1] values."""
    lut = colormap_lut(name).astype(np.int32)
    flat = rgb.reshape(-1, 3).astype(np.int32)
    d = ((flat[:, None, :] - lut[None, :, :]) ** 2).sum(axis=2)
    return (d.argmin(axis=1) / 255.0).reshape(rgb.shape[:2])


def face_outline_mask(side: int = CANONICAL_SIDE) -> np.ndarray:
    """One-pixel canonical face ellipse plus eye and mouth ticks."""
    ys, xs = (np.mgrid[0:side, 0:side] + 0.5) / side
    r = ((xs - 0.5) / 0.36) ** 2 + ((ys - 0.5) / 0.46) ** 2
    ring = np.abs(r - 1.0) < (2.2 / side)
    for cx, cy in CANONICAL_LANDMARKS:
        ring |= (np.abs(xs - cx) < 0.5 / side + 0.03) & (np.abs(ys - cy) < 0.5 / side)
    return ring


@dataclass
class HeatmapGrid:
    image: np.ndarray  # uint8 RGB
    panels: dict[tuple[str, str, str], tuple[int, int]]  # (model, class, dataset) -> (top, left)
    panel_side: int
    outline: np.ndarray


def render_heatmaps(
    heatmaps: Sequence[GlobalHeatmap],
    path: Optional[os.PathLike | str] = None,
    label_height: int = 14,
    pad: int = 4,
) -> HeatmapGrid:
    """Rows are models, columns (class, dataset) pairs; the face outline is blended in white."""
    from PIL import Image, ImageDraw

    if not heatmaps:
        raise ValueError("no heatmaps to render")
    side = heatmaps[0].grid.shape[0]
    models = list(dict.fromkeys(h.model for h in heatmaps))
    columns = sorted({(h.pain_class.value, h.dataset) for h in heatmaps}, key=lambda c: (c[0] != "pain", c[1]))
    label_w = 80
    height = label_height + len(models) * (side + pad) + pad
    width = label_w + len(columns) * (side + pad) + pad
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    outline = face_outline_mask(side)
    panels = {}
    for h in heatmaps:
        r, c = models.index(h.model), columns.index((h.pain_class.value, h.dataset))
        top = label_height + pad + r * (side + pad)
        left = label_w + pad + c * (side + pad)
        panel = colorize(h.grid)
        panel[outline] = (panel[outline].astype(np.uint16) + 255) // 2
        canvas[top : top + side, left : left + side] = panel
        panels[(h.model, h.pain_class.value, h.dataset)] = (top, left)
    im = Image.fromarray(canvas)
    draw = ImageDraw.Draw(im)
    for c, (cls, ds) in enumerate(columns):
        draw.text((label_w + pad + c * (side + pad), 1), f"{cls}/{ds}", fill=(0, 0, 0))
    for r, m in enumerate(models):
        draw.text((2, label_height + pad + r * (side + pad) + side // 2 - 5), m, fill=(0, 0, 0))
    canvas = np.asarray(im).copy()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        im.save(path, format="PNG")
    return HeatmapGrid(canvas, panels, side, outline)


def save_heatmap(heatmap: GlobalHeatmap, root: os.PathLike | str) -> Path:
    """Persist grid/raw arrays (NPY and CSV) and a panel PNG under ``root/<model>/<class>/<dataset>/``."""
    from PIL import Image

    out = Path(root) / heatmap.model / heatmap.pain_class.value / heatmap.dataset
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "heatmap.npy", heatmap.grid)
    np.save(out / "raw_mean.npy", heatmap.raw)
    np.savetxt(out / "heatmap.csv", heatmap.grid, delimiter=",", fmt="%.10g")
    Image.fromarray(colorize(heatmap.grid)).save(out / "heatmap.png")
    (out / "n_samples.txt").write_text(f"{heatmap.n_samples}\n")
    return out
