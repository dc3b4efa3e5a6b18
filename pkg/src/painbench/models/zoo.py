"""Uniform classifier interface: build, train, predict, persist."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset import PainClass
from ..errors import EmptyCorpus, MissingPretrainedWeights, ShapeMismatch, SingleClassCorpus
from .architectures import construct
from .registry import IMAGENET_MEAN, IMAGENET_STD, ArchitectureSpec, get_spec

if TYPE_CHECKING:
    from ..preprocess import PreprocessedImage

# torchvision checkpoint file names, looked up in the torch hub cache
_TORCHVISION_FILES = {
    "vgg16": "vgg16-397923af.pth",
    "vgg19": "vgg19-dcbb9e9d.pth",
    "resnet50": "resnet50-11ad3fa6.pth",
    "inception_v3": "inception_v3_google-0cc3c7bd.pth",
}


@dataclass(frozen=True)
class Augmentation:
    rotation_degrees: float = 15.0
    mirror: bool = True
    contrast_range: tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 32
    seed: int = 0
    augmentation: Augmentation = field(default_factory=Augmentation)
    # re-estimate BatchNorm statistics on the un-augmented training set after the last epoch
    recalibrate_batchnorm: bool = True

    def __post_init__(self):
        lo, hi = self.augmentation.contrast_range
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"contrast range must satisfy 0 < lo <= 1 <= hi, got {(lo, hi)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        aug = data.pop("augmentation", {}) or {}
        if "contrast_range" in aug:
            aug["contrast_range"] = tuple(aug["contrast_range"])
        return cls(augmentation=Augmentation(**aug), **data)


@dataclass
class Classifier:
    spec: ArchitectureSpec
    module: nn.Module


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainedModelRecord:
    architecture: ArchitectureSpec
    config: TrainConfig
    weights_path: Optional[Path]
    train_corpus_fingerprint: str
    training_log: list[EpochLog]
    module: Optional[nn.Module] = field(default=None, repr=False, compare=False)

    def load_module(self) -> nn.Module:
        if self.module is None:
            module, _ = construct(self.architecture.name)
            module.load_state_dict(torch.load(self.weights_path, map_location="cpu", weights_only=True))
            self.module = module
        return self.module.eval()

    def save(self, out_dir: os.PathLike | str) -> Path:
        """Write weights.pt, log.csv and record.json into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        weights = out_dir / "weights.pt"
        torch.save(self.load_module().state_dict(), weights)
        self.weights_path = weights
        write_training_log(self.training_log, out_dir / "log.csv")
        meta = {
            "architecture": asdict(self.architecture),
            "config": self.config.to_dict(),
            "weights_path": weights.name,
            "train_corpus_fingerprint": self.train_corpus_fingerprint,
            "training_log": [asdict(e) for e in self.training_log],
        }
        (out_dir / "record.json").write_text(json.dumps(meta, indent=1))
        return out_dir

    @classmethod
    def load(cls, out_dir: os.PathLike | str) -> "TrainedModelRecord":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "record.json").read_text())
        return cls(
            architecture=ArchitectureSpec(**meta["architecture"]),
            config=TrainConfig.from_dict(meta["config"]),
            weights_path=out_dir / meta["weights_path"],
            train_corpus_fingerprint=meta["train_corpus_fingerprint"],
            training_log=[EpochLog(**e) for e in meta["training_log"]],
        )


@dataclass(frozen=True)
class Prediction:
    probs: tuple[float, float]  # (NO_PAIN, PAIN)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise ValueError(f"invalid probability vector {self.probs}")

    @property
    def predicted(self) -> PainClass:
        # ties go to NO_PAIN
        return PainClass.PAIN if self.probs[1] > self.probs[0] else PainClass.NO_PAIN


def write_training_log(log: Sequence[EpochLog], path: os.PathLike | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for e in log:
            writer.writerow([e.epoch, repr(e.loss), repr(e.accuracy)])


def weights_dir() -> Path:
    env = os.environ.get("PAINBENCH_WEIGHTS")
    return Path(env) if env else Path.home() / ".cache" / "painbench" / "weights"


def _find_weights(name: str, directory: Optional[Path]) -> Optional[Path]:
    candidates = [(directory or weights_dir()) / f"{name}.pth"]
    if name in _TORCHVISION_FILES:
        candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / _TORCHVISION_FILES[name])
    return next((p for p in candidates if p.is_file()), None)


def build(
    name: str,
    seed: int = 0,
    weights_directory: Optional[os.PathLike | str] = None,
    require_weights: bool = True,
) -> Classifier:
    """Two-class classifier for a registered architecture.

    Pretrained families load ImageNet parameters for every layer except the
    head from ``<weights_directory>/<name>.pth`` (default directory:
    ``$PAINBENCH_WEIGHTS`` or ``~/.cache/painbench/weights``) or from the torch
    hub cache. Without weights, ``MissingPretrainedWeights`` is raised unless
    ``require_weights`` is false, in which case the backbone stays random.
    """
    spec = get_spec(name)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module, head_prefix = construct(name)
    if spec.pretrained:
        path = _find_weights(name, Path(weights_directory) if weights_directory else None)
        if path is None:
            if require_weights:
                raise MissingPretrainedWeights(
                    f"no ImageNet weights for {name}; place them at {weights_dir() / (name + '.pth')}"
                )
        else:
            _load_backbone(module, head_prefix, path, name)
    spec = replace(spec, param_count=sum(p.numel() for p in module.parameters()))
    return Classifier(spec, module)


def _load_backbone(module: nn.Module, head_prefix: str, path: Path, name: str) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = module.state_dict()
    wanted = [k for k in own if not k.startswith(head_prefix)]
    missing = [k for k in wanted if k not in state or state[k].shape != own[k].shape]
    if missing:
        raise MissingPretrainedWeights(f"{path} lacks {len(missing)} backbone tensors for {name}, e.g. {missing[:3]}")
    module.load_state_dict({k: state[k] for k in wanted}, strict=False)


def fingerprint_images(images: Sequence[PreprocessedImage]) -> str:
    """Hash over (sample id, label, pixel bytes), order independent."""
    parts = []
    for im in images:
        s = im.source_sample
        pid = s.sample_id if s is not None else ""
        label = s.pain_class.value if s is not None else ""
        parts.append(f"{pid}|{label}|{hashlib.sha256(im.pixels.tobytes()).hexdigest()}")
    h = hashlib.sha256()
    for p in sorted(parts):
        h.update(p.encode())
    return h.hexdigest()


def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """uint8 NxHxWx3 -> float32 Nx3xHxW in [0, 1]."""
    return torch.from_numpy(np.array(pixels, dtype=np.uint8)).permute(0, 3, 1, 2).float().div_(255.0)


def _normalise(x: torch.Tensor, spec: ArchitectureSpec) -> torch.Tensor:
    if spec.input_convention == "imagenet":
        mean = torch.from_numpy(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.from_numpy(IMAGENET_STD).view(1, 3, 1, 1)
        return (x - mean) / std
    return x


def augment(x: torch.Tensor, aug: Augmentation, rng: np.random.Generator) -> torch.Tensor:
    """Random rotation (white fill), horizontal mirror and contrast on a [0,1] batch."""
    n = x.shape[0]
    angles = np.deg2rad(rng.uniform(-aug.rotation_degrees, aug.rotation_degrees, n))
    flips = rng.random(n) < 0.5 if aug.mirror else np.zeros(n, dtype=bool)
    contrast = rng.uniform(*aug.contrast_range, n)
    if aug.rotation_degrees > 0:
        cos, sin = np.cos(angles), np.sin(angles)
        theta = np.zeros((n, 2, 3), dtype=np.float32)
        theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
        theta[:, 1, 0], theta[:, 1, 1] = sin, cos
        grid = F.affine_grid(torch.from_numpy(theta), list(x.shape), align_corners=False)
        x = F.grid_sample(x - 1.0, grid, mode="bilinear", padding_mode="zeros", align_corners=False) + 1.0
    if flips.any():
        idx = torch.from_numpy(np.flatnonzero(flips))
        x[idx] = torch.flip(x[idx], dims=[3])
    mean = x.mean(dim=(2, 3), keepdim=True)
    c = torch.from_numpy(contrast.astype(np.float32)).view(n, 1, 1, 1)
    return ((x - mean) * c + mean).clamp_(0.0, 1.0)


def _stack(images: Sequence[PreprocessedImage], spec: ArchitectureSpec) -> np.ndarray:
    for im in images:
        if im.side != spec.input_side:
            raise ShapeMismatch(f"{spec.name} expects side {spec.input_side}, got {im.side}")
    return np.stack([im.pixels for im in images])


def train(
    classifier: Classifier,
    images: Sequence[PreprocessedImage],
    config: TrainConfig = TrainConfig(),
    labels: Optional[Sequence[PainClass]] = None,
) -> TrainedModelRecord:
    """Adam on two-class cross-entropy for exactly ``config.epochs`` epochs.

    Labels come from each image's source sample unless given explicitly. All
    randomness (batch order, augmentation, dropout) derives from
    ``config.seed``; the per-epoch log reports mean loss and accuracy over
    the augmented training batches.
    """
    if len(images) == 0:
        raise EmptyCorpus("no training images")
    if labels is None:
        labels = [im.source_sample.pain_class for im in images]
    y_all = np.array([PainClass(l).index for l in labels], dtype=np.int64)
    if len(set(y_all.tolist())) < 2:
        raise SingleClassCorpus("training data holds a single class")
    spec = classifier.spec
    x_all = _stack(images, spec)
    module = classifier.module
    rng = np.random.default_rng(config.seed)
    log: list[EpochLog] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        optimizer = torch.optim.Adam(module.parameters(), lr=config.learning_rate)
        module.train()
        n = len(y_all)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            total_loss, correct = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) == 1 and n > 1 and _has_batchnorm(module):
                    continue  # batch statistics undefined for a single sample
                xb = augment(_to_tensor(x_all[idx]), config.augmentation, rng)
                yb = torch.from_numpy(y_all[idx])
                logits = module(_normalise(xb, spec))
                loss = F.cross_entropy(logits, yb)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach()) * len(idx)
                correct += int((logits.detach().argmax(1) == yb).sum())
            log.append(EpochLog(epoch, total_loss / n, correct / n))
        if config.recalibrate_batchnorm and _has_batchnorm(module):
            _recalibrate_batchnorm(module, x_all, spec, config.batch_size)
    module.eval()
    return TrainedModelRecord(
        architecture=spec,
        config=config,
        weights_path=None,
        train_corpus_fingerprint=fingerprint_images(images),
        training_log=log,
        module=module,
    )


def _recalibrate_batchnorm(module: nn.Module, x_all: np.ndarray, spec: ArchitectureSpec, batch_size: int) -> None:
    """Replace running BN statistics by exact averages over the clean training images."""
    norms = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    module.train()
    with torch.no_grad():
        for start in range(0, len(x_all), batch_size):
            chunk = x_all[start : start + batch_size]
            if len(chunk) > 1:
                module(_normalise(_to_tensor(chunk), spec))
    for m, momentum in zip(norms, saved):
        m.momentum = momentum


def _has_batchnorm(module: nn.Module) -> bool:
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules())


def predict_proba(record: TrainedModelRecord | Classifier, pixels: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities (NO_PAIN, PAIN) for a uint8 batch N x side x side x 3."""
    if isinstance(record, Classifier):
        module, spec = record.module.eval(), record.spec
    else:
        module, spec = record.load_module(), record.architecture
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.shape[1:] != (spec.input_side, spec.input_side, 3):
        raise ShapeMismatch(f"{spec.name} expects {spec.input_side}x{spec.input_side}x3, got {pixels.shape[1:]}")
    out = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            x = _normalise(_to_tensor(pixels[start : start + batch_size]), spec)
            out.append(torch.softmax(module(x).double(), dim=1).numpy())
    probs = np.concatenate(out) if out else np.zeros((0, 2))
    return probs / probs.sum(axis=1, keepdims=True)


def predict(record: TrainedModelRecord | Classifier, image: PreprocessedImage) -> Prediction:
    p = predict_proba(record, image.pixels[None])[0]
    return Prediction((float(p[0]), float(p[1])))


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average used for the loss-trend sanity check."""
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def gradient_check(
    classifier: Classifier,
    pixels: np.ndarray,
    labels: Sequence[int],
    n_params: int = 20,
    eps: float = 1e-6,
    seed: int = 0,
) -> np.ndarray:
    """Relative errors between autograd and central finite differences.

    Runs in float64 on a deep copy of the module in eval mode, for ``n_params``
    randomly sampled scalar parameters.
    """
    import copy

    module = copy.deepcopy(classifier.module).double().eval()
    x = _normalise(_to_tensor(pixels), classifier.spec).double()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)

    def loss_fn():
        return F.cross_entropy(module(x), y)

    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_choices = rng.choice(sizes.sum(), size=n_params, replace=False)
    bounds = np.cumsum(sizes)
    errors = []
    with torch.no_grad():
        for flat in flat_choices:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            offset = int(flat - (bounds[pi - 1] if pi else 0))
            p = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[offset])
            orig = float(p[offset])
            p[offset] = orig + eps
            up = float(loss_fn())
            p[offset] = orig - eps
            down = float(loss_fn())
            p[offset] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            errors.append(abs(analytic - numeric) / denom)
    return np.array(errors)
