"""Procedural toy images standing in for a real dataset.

``patterns``: each class has its own background intensity and an
axis-aligned bright/dark rectangle whose placement and size depend on the
class, plus per-pixel gaussian noise.

``constant``: every image is a single intensity drawn around the class
base level (no spatial structure), used to check sampler calibration.

Pixels live in [0, 1]; :func:`to_model_range` maps them to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng

GENERATORS = ("patterns", "constant")


@dataclass(frozen=True)
class ToyDataset:
    generator: str = "patterns"
    classes: int = 10
    image_side: int = 16
    noise: float = 0.05
    intensity_jitter: float = 0.1

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.classes < 1:
            raise ValueError("need at least one class")

    def base_intensity(self, cls: int) -> float:
        if self.generator == "constant":
            return 0.7 if self.classes == 1 else 0.15 + 0.7 * cls / (self.classes - 1)
        return 0.1 + 0.4 * cls / max(self.classes - 1, 1)

    def template(self, cls: int) -> np.ndarray:
        """Noiseless image of class ``cls``."""
        self._check_class(cls)
        s = self.image_side
        img = np.full((s, s), self.base_intensity(cls))
        if self.generator == "patterns":
            # class picks a corner-anchored rectangle; size grows with class
            h = s // 4 + (cls * 3) % (s // 2)
            w = s // 4 + (cls * 5) % (s // 2)
            r0 = (cls * 7) % (s - h + 1)
            c0 = (cls * 11) % (s - w + 1)
            img[r0:r0 + h, c0:c0 + w] = 0.95 if cls % 2 == 0 else 0.9 - self.base_intensity(cls)
        return img

    def sample(self, cls: int, seed: int) -> np.ndarray:
        self._check_class(cls)
        gen = Rng(seed).generator(f"toy/{self.generator}/{cls}")
        img = self.template(cls)
        if self.generator == "constant":
            img = img + self.intensity_jitter * gen.standard_normal()
        elif self.noise > 0:
            img = img + self.noise * gen.standard_normal(img.shape)
        return np.clip(img, 0.0, 1.0)

    def make(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` images with classes cycling 0..C-1, in pixel range."""
        classes = np.arange(n) % self.classes
        images = np.stack([self.sample(int(c), seed * 1_000_003 + i) for i, c in enumerate(classes)])
        return images, classes

    def model_mean(self, cls: int = 0) -> float:
        """Expected pixel value of class ``cls`` in model range (clipping ignored)."""
        return float(to_model_range(self.template(cls)).mean())

    def _check_class(self, cls: int) -> None:
        if not 0 <= cls < self.classes:
            raise ValueError(f"class {cls} outside [0, {self.classes})")


def to_model_range(images):
    return np.asarray(images) * 2.0 - 1.0


def to_pixel_range(images):
    return (np.asarray(images) + 1.0) / 2.0
