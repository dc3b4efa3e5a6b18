"""Architecture registry: names, input sides, pretraining flags and pixel conventions.

Kept free of torch so preprocessing can look up input sides without pulling
in the deep learning stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UnknownArchitecture

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_side: int
    pretrained: bool
    # "unit": RGB / 255; "imagenet": unit scaling then per-channel ImageNet standardisation
    input_convention: str = "unit"
    param_count: int = 0  # informational, filled in by the zoo once built
    note: str = ""

    def scale(self, pixels: np.ndarray) -> np.ndarray:
        """Map uint8 HxWx3 (or NxHxWx3) pixels to float32 model inputs."""
        x = np.asarray(pixels, dtype=np.float32) / 255.0
        if self.input_convention == "imagenet":
            x = (x - IMAGENET_MEAN) / IMAGENET_STD
        return x


PRETRAINED = frozenset({"vgg16", "vgg19", "resnet50", "resnet101v2", "xception", "inception_v3"})

_SPECS = {
    s.name: s
    for s in (
        ArchitectureSpec("alexnet", 227, False, note="Krizhevsky 2012 layer stack, trained from scratch"),
        ArchitectureSpec(
            "songnet", 32, False,
            note="reconstructed small smartphone FER CNN; input side and widths uncertain",
        ),
        ArchitectureSpec(
            "weinet", 96, False,
            note="reconstructed FER CNN; input side and layer widths uncertain",
        ),
        ArchitectureSpec("vgg16", 224, True, "imagenet"),
        ArchitectureSpec("vgg19", 224, True, "imagenet"),
        ArchitectureSpec("resnet50", 224, True, "imagenet"),
        ArchitectureSpec("resnet101v2", 224, True, "imagenet", note="pre-activation bottleneck ResNet-101"),
        ArchitectureSpec("inception_v3", 299, True, "imagenet"),
        ArchitectureSpec("xception", 299, True, "imagenet"),
        ArchitectureSpec(
            "silnet", 150, False,
            note="reconstructed cross-dataset FER CNN; input side and widths uncertain",
        ),
        ArchitectureSpec("tiny_cnn", 64, False, note="3-block reference CNN for desk-scale runs"),
    )
}

PUBLISHED_ARCHITECTURES = (
    "alexnet", "songnet", "weinet", "vgg16", "vgg19",
    "resnet50", "resnet101v2", "inception_v3", "xception", "silnet",
)


def architecture_names() -> tuple[str, ...]:
    return tuple(_SPECS)


def get_spec(name: str) -> ArchitectureSpec:
    try:
        return _SPECS[name]
    except KeyError:
        raise UnknownArchitecture(
            f"unknown architecture {name!r}; registered: {', '.join(_SPECS)}"
        ) from None
