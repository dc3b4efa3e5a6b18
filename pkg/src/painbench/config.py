"""Run configuration loaded from a TOML file, with command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .experiments import SCENARIOS
from .explain import LimeParams
from .models.registry import architecture_names

_SECTIONS = {"data", "preprocess", "experiment", "train", "explain"}


@dataclass(frozen=True)
class RunConfig:
    manifests: tuple[Path, ...]
    external_manifests: tuple[Path, ...] = ()
    corpus_name: str = "PAIN-DB"
    external_name: str = "CP-PAIN"
    frame_budget: int = 20
    scoresheets: Optional[Path] = None
    scenarios: tuple[str, ...] = SCENARIOS
    architectures: tuple[str, ...] = ("tiny_cnn",)
    k: int = 5
    seed: int = 0
    jobs: int = 1
    run_dir: Optional[Path] = None
    require_pretrained_weights: bool = True
    weights_dir: Optional[Path] = None
    # preprocessing
    margin: float = 0.2
    confidence_floor: float = 0.9
    min_coverage: float = 0.05
    detector: str = "skin"
    segmenter_weights: Optional[Path] = None
    # training
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 32
    rotation_degrees: float = 15.0
    mirror: bool = True
    contrast_range: tuple[float, float] = (0.8, 1.2)
    # explanations
    explain: bool = True
    explain_scenario: Optional[str] = None
    explain_max_samples: int = 8
    lime: LimeParams = field(default_factory=LimeParams)
    source: Optional[Path] = None
    source_text: str = ""

    def validate(self) -> "RunConfig":
        if not self.manifests:
            raise ConfigError("config lists no manifests")
        known = set(architecture_names())
        for a in self.architectures:
            if a not in known:
                raise ConfigError(f"unknown architecture {a!r}; known: {sorted(known)}")
        if not self.architectures:
            raise ConfigError("config lists no architectures")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}; known: {list(SCENARIOS)}")
        if "external_test" in self.scenarios and not self.external_manifests:
            raise ConfigError("scenario external_test needs data.external_manifests")
        if self.k < 2 and any(s != "external_test" for s in self.scenarios):
            raise ConfigError("cross-validation scenarios need k >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.frame_budget < 1:
            raise ConfigError("frame_budget must be >= 1")
        if self.detector not in ("skin", "mtcnn"):
            raise ConfigError(f"unknown detector {self.detector!r}; expected 'skin' or 'mtcnn'")
        if self.explain_scenario is not None and self.explain_scenario not in self.scenarios:
            raise ConfigError(f"explain scenario {self.explain_scenario!r} is not among the run's scenarios")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def train_config(self):
        from .models.zoo import Augmentation, TrainConfig

        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
            augmentation=Augmentation(self.rotation_degrees, self.mirror, tuple(self.contrast_range)),
        )

    def preprocessor(self):
        from .preprocess import BorderColorSegmenter, MTCNNDetector, Preprocessor, SkinFaceDetector, TorchScriptSegmenter

        detector = MTCNNDetector() if self.detector == "mtcnn" else SkinFaceDetector()
        segmenter = BorderColorSegmenter() if self.segmenter_weights is None else TorchScriptSegmenter(self.segmenter_weights)
        return Preprocessor(
            detector=detector,
            segmenter=segmenter,
            margin=self.margin,
            confidence_floor=self.confidence_floor,
            min_coverage=self.min_coverage,
        )

    @property
    def explain_target(self) -> str:
        if self.explain_scenario is not None:
            return self.explain_scenario
        return "external_test" if "external_test" in self.scenarios else self.scenarios[0]

    def resolve_run_dir(self) -> Path:
        """Configured run directory, or ``runs/<UTC timestamp>`` next to the config file."""
        if self.run_dir is not None:
            return self.run_dir
        base = self.source.parent if self.source else Path.cwd()
        return base / "runs" / time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())

    def effective(self) -> dict:
        """Resolved settings after overrides, as JSON-friendly values."""
        out = {}
        for f in fields(self):
            if f.name in ("source", "source_text"):
                continue
            value = getattr(self, f.name)
            if isinstance(value, LimeParams):
                value = asdict(value)
            elif isinstance(value, tuple):
                value = [str(v) if isinstance(v, Path) else v for v in value]
            elif isinstance(value, Path):
                value = str(value)
            out[f.name] = value
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.effective(), sort_keys=True).encode()).hexdigest()


def _paths(base: Path, value) -> tuple[Path, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        value = [value]
    return tuple((base / v).resolve() for v in value)


def _take(section: dict, key: str, kind, where: str):
    value = section.pop(key)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, got {value!r}")
    return value


def parse_config(text: str, base: Path, source: Optional[Path] = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from None
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = dict(raw.get("data", {}))
    pre = dict(raw.get("preprocess", {}))
    exp = dict(raw.get("experiment", {}))
    tr = dict(raw.get("train", {}))
    ex = dict(raw.get("explain", {}))

    kw: dict = {"source": source, "source_text": text}
    if "manifests" not in data:
        raise ConfigError("data.manifests is required")
    kw["manifests"] = _paths(base, data.pop("manifests"))
    kw["external_manifests"] = _paths(base, data.pop("external_manifests", None))
    if "scoresheets" in data:
        kw["scoresheets"] = _paths(base, data.pop("scoresheets"))[0]
    for key, kind in (("corpus_name", str), ("external_name", str), ("frame_budget", int)):
        if key in data:
            kw[key] = _take(data, key, kind, "data")

    for key, kind in (("margin", float), ("confidence_floor", float), ("min_coverage", float), ("detector", str)):
        if key in pre:
            kw[key] = _take(pre, key, kind, "preprocess")
    if "segmenter_weights" in pre:
        kw["segmenter_weights"] = _paths(base, pre.pop("segmenter_weights"))[0]

    for key in ("scenarios", "architectures"):
        if key in exp:
            value = exp.pop(key)
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"experiment.{key} must be a list of names")
            kw[key] = tuple(value)
    for key, kind in (("k", int), ("seed", int), ("jobs", int), ("require_pretrained_weights", bool)):
        if key in exp:
            kw[key] = _take(exp, key, kind, "experiment")
    if "run_dir" in exp:
        kw["run_dir"] = _paths(base, exp.pop("run_dir"))[0]
    if "weights_dir" in exp:
        kw["weights_dir"] = _paths(base, exp.pop("weights_dir"))[0]

    for key, kind in (("epochs", int), ("learning_rate", float), ("batch_size", int), ("rotation_degrees", float), ("mirror", bool)):
        if key in tr:
            kw[key] = _take(tr, key, kind, "train")
    if "contrast_range" in tr:
        value = tr.pop("contrast_range")
        if not (isinstance(value, list) and len(value) == 2):
            raise ConfigError("train.contrast_range must be [lo, hi]")
        kw["contrast_range"] = (float(value[0]), float(value[1]))

    lime = {}
    for key, kind in (("n_segments", int), ("n_perturbations", int), ("kernel_width", float), ("top_k", int)):
        if key in ex:
            lime[key] = _take(ex, key, kind, "explain")
    if "enabled" in ex:
        kw["explain"] = _take(ex, "enabled", bool, "explain")
    if "scenario" in ex:
        kw["explain_scenario"] = _take(ex, "scenario", str, "explain")
    if "max_samples" in ex:
        kw["explain_max_samples"] = _take(ex, "max_samples", int, "explain")

    leftovers = [f"{sec}.{k}" for sec, d in (("data", data), ("preprocess", pre), ("experiment", exp), ("train", tr), ("explain", ex)) for k in d]
    if leftovers:
        raise ConfigError(f"unknown config keys: {leftovers}")
    kw["lime"] = LimeParams(seed=kw.get("seed", 0), **lime)
    return RunConfig(**kw).validate()


def load_config(path: os.PathLike | str) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent.resolve(), path.resolve())


def with_overrides(
    config: RunConfig,
    run_dir: Optional[os.PathLike | str] = None,
    architectures: Optional[list[str]] = None,
    scenarios: Optional[list[str]] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
) -> RunConfig:
    """Apply command-line flags on top of file values."""
    changes: dict = {}
    if run_dir is not None:
        changes["run_dir"] = Path(run_dir).resolve()
    if architectures:
        changes["architectures"] = tuple(architectures)
    if scenarios:
        changes["scenarios"] = tuple(scenarios)
        if config.explain_scenario is not None and config.explain_scenario not in scenarios:
            changes["explain_scenario"] = None
    if seed is not None:
        changes["seed"] = seed
        changes["lime"] = replace(config.lime, seed=seed)
    if jobs is not None:
        changes["jobs"] = jobs
    return replace(config, **changes).validate() if changes else config
