"""Flat parameter vector with a named-segment layout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Layout:
    """Maps segment names to (offset, shape) within a flat float64 vector.

    Segments are disjoint and cover [0, total).
    """

    segments: dict[str, tuple[int, tuple[int, ...]]]
    total: int

    @staticmethod
    def build(shapes: dict[str, tuple[int, ...]]) -> "Layout":
        segments: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            if size <= 0:
                raise ConfigError(f"segment {name!r} has zero size (shape {shape})")
            segments[name] = (offset, tuple(shape))
            offset += size
        return Layout(segments, offset)

    def to_json(self) -> dict:
        return {name: {"offset": off, "shape": list(shape)}
                for name, (off, shape) in self.segments.items()}

    @staticmethod
    def from_json(obj: dict) -> "Layout":
        shapes = {name: tuple(entry["shape"]) for name, entry in obj.items()}
        return Layout.build(shapes)


@dataclass
class Params:
    """Parameter vector.  ``segment(name)`` satisfies the reader protocol used
    by model code, so a Params can be passed anywhere a value-only reader is
    expected."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.total:
            raise ConfigError(
                f"parameter vector has length {self.values.size}, layout expects {self.layout.total}")

    def segment(self, name: str) -> np.ndarray:
        offset, shape = self.layout.segments[name]
        size = int(np.prod(shape))
        return self.values[offset:offset + size].reshape(shape)

    # Reader-protocol aliases (see autodiff.TapeReader).
    raw = segment

    def detached(self) -> "Params":
        return self

    def copy(self) -> "Params":
        return Params(self.values.copy(), self.layout)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass
class GradVector:
    """Gradient with the same flat layout as the Params it differentiates."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))
