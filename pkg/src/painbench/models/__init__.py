"""Model zoo. Torch-backed pieces live in :mod:`painbench.models.zoo`; the
registry is importable without torch."""

from .registry import PUBLISHED_ARCHITECTURES, ArchitectureSpec, architecture_names, get_spec

__all__ = ["PUBLISHED_ARCHITECTURES", "ArchitectureSpec", "architecture_names", "get_spec"]
