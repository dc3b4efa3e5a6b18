"""Face cropping, background substitution and per-architecture resizing.

The face detector and person segmenter are black-box components behind small
protocols. The built-in implementations work on colour statistics and are
sufficient for the schematic fixtures; adapters for a cascaded CNN detector
and a TorchScript salient-object segmenter are provided for real imagery.

Thread safety: :class:`SkinFaceDetector`, :class:`BorderColorSegmenter` and
:class:`SchematicLandmarkDetector` are stateless and may be shared across
threads. The torch-backed adapters hold a model and should be instantiated
once per worker.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import Corpus, ImageSample
from .errors import DegenerateBox, LandmarksNotFound, MaskTooSparse, NoFaceDetected, ShapeMismatch
from .models.registry import ArchitectureSpec, get_spec

WHITE = np.array([255, 255, 255], dtype=np.uint8)
CONFIDENCE_FLOOR = 0.9
MIN_PERSON_COVERAGE = 0.05
DEFAULT_MARGIN = 0.2
PIPELINE_VERSION = "1"


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBox(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    def iou(self, other: Sequence[float]) -> float:
        ox, oy, ow, oh = other[:4]
        ix = max(0.0, min(self.x + self.w, ox + ow) - max(self.x, ox))
        iy = max(0.0, min(self.y + self.h, oy + oh) - max(self.y, oy))
        inter = ix * iy
        return inter / (self.w * self.h + ow * oh - inter)


@dataclass
class PreprocessedImage:
    pixels: np.ndarray  # uint8 side x side x 3
    side: int
    architecture: str
    source_sample: Optional[ImageSample] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.shape != (self.side, self.side, 3):
            raise ShapeMismatch(f"expected {(self.side, self.side, 3)}, got {self.pixels.shape}")

    @property
    def scaled(self) -> np.ndarray:
        """Pixels mapped to the architecture's input convention (float32, HWC)."""
        return get_spec(self.architecture).scale(self.pixels)

    @property
    def landmarks(self) -> Optional[np.ndarray]:
        lm = self.provenance.get("landmarks")
        return None if lm is None else np.asarray(lm, dtype=float)


class FaceDetector(Protocol):
    def detect_all(self, image: np.ndarray) -> list[FaceBox]: ...


class PersonSegmenter(Protocol):
    def segment(self, image: np.ndarray) -> np.ndarray: ...


def load_rgb(path: os.PathLike | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def skin_mask(image: np.ndarray) -> np.ndarray:
    """Explicit RGB skin-colour rule (daylight variant)."""
    rgb = image.astype(np.int16)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    spread = rgb.max(axis=2) - rgb.min(axis=2)
    return (r > 95) & (g > 40) & (b > 20) & (spread > 15) & (r - g > 15) & (r > b)


class SkinFaceDetector:
    """Detects face-like blobs: connected skin regions scored by ellipse fit.

    Confidence is 1 for a filled region whose area matches the inscribed
    ellipse of its bounding box with a face-like aspect ratio, and decays
    with deviation from that shape.
    """

    def __init__(self, min_area_fraction: float = 0.01):
        self.min_area_fraction = min_area_fraction

    def detect_all(self, image: np.ndarray) -> list[FaceBox]:
        mask = skin_mask(image)
        labels, n = ndimage.label(mask)
        min_area = self.min_area_fraction * mask.size
        boxes = []
        for i, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            region = ndimage.binary_fill_holes(labels[sl] == i)
            area = region.sum()
            if area < min_area:
                continue
            h, w = region.shape
            fill_ratio = area / (math.pi / 4 * w * h)
            aspect = h / w
            aspect_penalty = 0.0 if 0.9 <= aspect <= 1.8 else min(abs(aspect - 0.9), abs(aspect - 1.8))
            confidence = max(0.0, 1.0 - 2.5 * abs(1.0 - fill_ratio) - aspect_penalty)
            boxes.append(FaceBox(sl[1].start, sl[0].start, w, h, float(confidence)))
        return boxes


class MTCNNDetector:
    """Adapter for the cascaded CNN detector from ``facenet_pytorch`` (optional dependency)."""

    def __init__(self, device: str = "cpu"):
        try:
            from facenet_pytorch import MTCNN
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ImportError("MTCNNDetector needs the facenet-pytorch package") from exc
        self._mtcnn = MTCNN(keep_all=True, device=device)

    def detect_all(self, image: np.ndarray) -> list[FaceBox]:  # pragma: no cover
        boxes, probs = self._mtcnn.detect(Image.fromarray(image))
        if boxes is None:
            return []
        out = []
        for (x0, y0, x1, y1), p in zip(boxes, probs):
            x, y = int(math.floor(x0)), int(math.floor(y0))
            out.append(FaceBox(x, y, int(math.ceil(x1)) - x, int(math.ceil(y1)) - y, float(p)))
        return out


def detect_face(image: np.ndarray, detector: Optional[FaceDetector] = None, floor: float = CONFIDENCE_FLOOR) -> FaceBox:
    """Highest-confidence face at or above ``floor``."""
    detector = detector or SkinFaceDetector()
    boxes = [b for b in detector.detect_all(image) if b.confidence >= floor]
    if not boxes:
        raise NoFaceDetected(f"no face with confidence >= {floor}")
    return max(boxes, key=lambda b: b.confidence)


def crop_geometry(box: FaceBox, margin: float = DEFAULT_MARGIN) -> tuple[int, int, int]:
    """(left, top, side) of the square crop around ``box``."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    side = math.ceil((1 + margin) * max(box.w, box.h))
    if side <= 0:
        raise DegenerateBox("crop side is zero")
    cx, cy = box.center
    return math.floor(cx - side / 2), math.floor(cy - side / 2), side


def _paste(src: np.ndarray, left: int, top: int, side: int, fill) -> np.ndarray:
    h, w = src.shape[:2]
    out = np.empty((side, side) + src.shape[2:], dtype=src.dtype)
    out[...] = fill
    x0, y0 = max(left, 0), max(top, 0)
    x1, y1 = min(left + side, w), min(top + side, h)
    if x1 > x0 and y1 > y0:
        out[y0 - top : y1 - top, x0 - left : x1 - left] = src[y0:y1, x0:x1]
    return out


def square_crop(image: np.ndarray, box: FaceBox, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Square crop of side ceil((1+margin)*max(w,h)) centred on the box; outside is white."""
    left, top, side = crop_geometry(box, margin)
    return _paste(image, left, top, side, WHITE)


class BorderColorSegmenter:
    """Person/background split by colour distance from the dominant border colour.

    Pure white pixels (crop padding) count as background. The largest
    foreground component, hole-filled, is the person.
    """

    def __init__(self, threshold: float = 45.0):
        self.threshold = threshold

    def segment(self, image: np.ndarray) -> np.ndarray:
        rgb = image.astype(np.float32)
        white = np.all(image == 255, axis=2)
        border = np.concatenate([rgb[0], rgb[-1], rgb[:, 0], rgb[:, -1]])
        border_white = np.concatenate([white[0], white[-1], white[:, 0], white[:, -1]])
        candidates = border[~border_white]
        if len(candidates) == 0:
            return (~white).astype(np.uint8)
        bg = np.median(candidates, axis=0)
        fg = (np.linalg.norm(rgb - bg, axis=2) > self.threshold) & ~white
        fg = ndimage.binary_opening(fg, iterations=1)
        labels, n = ndimage.label(fg)
        if n == 0:
            return np.zeros(fg.shape, dtype=np.uint8)
        sizes = ndimage.sum(fg, labels, index=range(1, n + 1))
        person = labels == (int(np.argmax(sizes)) + 1)
        return ndimage.binary_fill_holes(person).astype(np.uint8)


class TorchScriptSegmenter:
    """Adapter for a TorchScript salient-object / human segmentation network.

    The network must map a 1x3xSxS ImageNet-normalised tensor to a 1x1xSxS
    (or 1xSxS) map of logits or probabilities.
    """

    def __init__(self, path: os.PathLike | str, input_side: int = 320, threshold: float = 0.5):
        import torch

        self._torch = torch
        self.model = torch.jit.load(str(path), map_location="cpu").eval()
        self.input_side = input_side
        self.threshold = threshold

    def segment(self, image: np.ndarray) -> np.ndarray:  # pragma: no cover - needs external weights
        torch = self._torch
        h, w = image.shape[:2]
        small = np.asarray(Image.fromarray(image).resize((self.input_side,) * 2, Image.BILINEAR))
        x = get_spec("vgg16").scale(small).transpose(2, 0, 1)[None]
        with torch.no_grad():
            out = self.model(torch.from_numpy(np.ascontiguousarray(x)))
        if isinstance(out, (tuple, list)):
            out = out[0]
        prob = out.reshape(self.input_side, self.input_side).numpy()
        if prob.min() < 0 or prob.max() > 1:
            prob = 1 / (1 + np.exp(-prob))
        prob = np.asarray(Image.fromarray(prob.astype(np.float32)).resize((w, h), Image.BILINEAR))
        return (prob >= self.threshold).astype(np.uint8)


def subtract_background(
    image: np.ndarray, mask: np.ndarray, min_coverage: float = MIN_PERSON_COVERAGE
) -> tuple[np.ndarray, float]:
    """Set background pixels (mask == 0) to white; returns (image, person coverage)."""
    if mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {image.shape[:2]}")
    person = mask.astype(bool)
    coverage = float(person.mean())
    if coverage < min_coverage:
        raise MaskTooSparse(f"person covers {coverage:.1%} of the crop (< {min_coverage:.0%})")
    out = image.copy()
    out[~person] = WHITE
    return out, coverage


def resize_for(image: np.ndarray, architecture: str | ArchitectureSpec, sample: Optional[ImageSample] = None) -> PreprocessedImage:
    spec = architecture if isinstance(architecture, ArchitectureSpec) else get_spec(architecture)
    side = spec.input_side
    if image.shape[:2] == (side, side):
        pixels = np.ascontiguousarray(image, dtype=np.uint8)
    else:
        pixels = np.asarray(Image.fromarray(image).resize((side, side), Image.BILINEAR))
    return PreprocessedImage(pixels=pixels, side=side, architecture=spec.name, source_sample=sample)


class SchematicLandmarkDetector:
    """Eye and mouth centres as the three largest dark blobs inside the face region.

    Works on the schematic fixtures and on white-background crops of them; real
    imagery needs a landmark model plugged in behind the same ``detect`` call.
    """

    def __init__(self, dark_threshold: float = 50.0):
        self.dark_threshold = dark_threshold

    def detect(self, image: np.ndarray) -> np.ndarray:
        skin = skin_mask(image)
        labels, n = ndimage.label(skin)
        if n == 0:
            raise LandmarksNotFound("no skin region")
        sizes = ndimage.sum(skin, labels, index=range(1, n + 1))
        face = ndimage.binary_fill_holes(labels == int(np.argmax(sizes)) + 1)
        dark = (image.astype(np.float32).mean(axis=2) < self.dark_threshold) & face
        blobs, m = ndimage.label(dark)
        if m < 3:
            raise LandmarksNotFound(f"found {m} dark facial blobs, need 3")
        areas = ndimage.sum(dark, blobs, index=range(1, m + 1))
        top = np.argsort(-areas, kind="stable")[:3] + 1
        centers = [ndimage.center_of_mass(dark, blobs, i) for i in top]
        pts = np.array([(c[1] + 0.5, c[0] + 0.5) for c in centers])  # (x, y), pixel-centre convention
        mouth_i = int(np.argmax(pts[:, 1]))
        eyes = np.delete(pts, mouth_i, axis=0)
        eyes = eyes[np.argsort(eyes[:, 0])]
        return np.array([eyes[0], eyes[1], pts[mouth_i]])


@dataclass
class Preprocessor:
    """Detect, square-crop, segment, whiten background, resize.

    Segmentation runs on the crop, not the full frame.
    """

    detector: FaceDetector = field(default_factory=SkinFaceDetector)
    segmenter: PersonSegmenter = field(default_factory=BorderColorSegmenter)
    landmark_detector: Optional[SchematicLandmarkDetector] = field(default_factory=SchematicLandmarkDetector)
    margin: float = DEFAULT_MARGIN
    confidence_floor: float = CONFIDENCE_FLOOR
    min_coverage: float = MIN_PERSON_COVERAGE

    def fingerprint(self) -> str:
        parts = [
            PIPELINE_VERSION,
            type(self.detector).__name__,
            type(self.segmenter).__name__,
            repr(self.margin),
            repr(self.confidence_floor),
            repr(self.min_coverage),
        ]
        return "|".join(parts)

    def crop_and_clean(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        box = detect_face(image, self.detector, self.confidence_floor)
        left, top, side = crop_geometry(box, self.margin)
        crop = _paste(image, left, top, side, WHITE)
        mask = self.segmenter.segment(crop)
        clean, coverage = subtract_background(crop, mask, self.min_coverage)
        provenance = {
            "box": [box.x, box.y, box.w, box.h],
            "confidence": box.confidence,
            "crop": [left, top, side],
            "margin": self.margin,
            "mask_coverage": coverage,
        }
        return clean, mask, provenance

    def process_array(self, image: np.ndarray, architecture: str, sample: Optional[ImageSample] = None) -> PreprocessedImage:
        clean, _, provenance = self.crop_and_clean(image)
        out = resize_for(clean, architecture, sample)
        if self.landmark_detector is not None:
            try:
                lm = self.landmark_detector.detect(clean) * (out.side / clean.shape[0])
                provenance["landmarks"] = lm.round(4).tolist()
            except LandmarksNotFound:
                provenance["landmarks"] = None
        provenance["architecture"] = architecture
        out.provenance = provenance
        return out

    def process(self, sample: ImageSample, architecture: str) -> PreprocessedImage:
        return self.process_array(load_rgb(sample.image_path), architecture, sample)


def _cache_key(sample: ImageSample, architecture: str, preprocessor: Preprocessor) -> str:
    h = hashlib.sha256()
    h.update(Path(sample.image_path).read_bytes())
    h.update(f"|{architecture}|{get_spec(architecture).input_side}|{preprocessor.fingerprint()}".encode())
    return h.hexdigest()[:20]


def default_cache_dir(run_dir: os.PathLike | str) -> Path:
    env = os.environ.get("PAINBENCH_CACHE")
    return Path(env) if env else Path(run_dir) / "preproc"


def preprocess_corpus(
    corpus: Corpus,
    architecture: str,
    cache_dir: Optional[os.PathLike | str] = None,
    preprocessor: Optional[Preprocessor] = None,
    skip_failures: bool = False,
) -> dict[str, PreprocessedImage]:
    """Preprocess every sample for ``architecture``; returns {sample_id: image}.

    With ``cache_dir`` set, outputs are stored as
    ``<cache_dir>/<dataset_tag>/<local_id>/<hash>.png`` with a JSON sidecar and
    reused on later calls. With ``skip_failures`` samples failing detection or
    segmentation are left out of the result instead of raising.
    """
    preprocessor = preprocessor or Preprocessor()
    out: dict[str, PreprocessedImage] = {}
    for sample in corpus:
        target = None
        if cache_dir is not None:
            key = _cache_key(sample, architecture, preprocessor)
            target = Path(cache_dir) / sample.subject.dataset_tag / sample.subject.local_id / f"{key}.png"
            sidecar = target.with_suffix(".json")
            if target.is_file() and sidecar.is_file():
                pixels = load_rgb(target)
                provenance = json.loads(sidecar.read_text())
                out[sample.sample_id] = PreprocessedImage(
                    pixels, pixels.shape[0], architecture, sample, provenance
                )
                continue
        try:
            image = preprocessor.process(sample, architecture)
        except (NoFaceDetected, MaskTooSparse, DegenerateBox):
            if skip_failures:
                continue
            raise
        if target is not None:
            target.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(image.pixels).save(target, format="PNG")
            provenance = dict(image.provenance, source=str(sample.image_path), sample_id=sample.sample_id)
            target.with_suffix(".json").write_text(json.dumps(provenance, indent=1, sort_keys=True))
            image.provenance = provenance
        out[sample.sample_id] = image
    return out
