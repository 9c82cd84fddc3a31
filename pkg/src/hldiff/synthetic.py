"""Seeded synthetic image corpus with class-distinct color statistics.

Two-class color-and-texture images stand in for a real medical corpus in
tests and demos: each class has its own base palette and accent blob, so
channel statistics separate the classes cleanly and color drift under
fine-tuning is measurable.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .seeding import derive_seed
from .vsg import DatasetMeta


@dataclass(frozen=True)
class SyntheticClass:
    name: str
    base_rgb: tuple
    accent_rgb: tuple
    stripe_freq: float
    features: str
    # 1.0 = full blob/stripe randomness, 0.0 = fixed geometry (small models
    # can then memorize the class and sampling stays on-manifold)
    geometry_jitter: float = 1.0


DEFAULT_CLASSES = (
    SyntheticClass(
        name="crimson lesions",
        base_rgb=(0.62, 0.18, 0.16),
        accent_rgb=(0.88, 0.55, 0.40),
        stripe_freq=2.0,
        features="deep red base tone, lighter raised center, faint radial streaks",
    ),
    SyntheticClass(
        name="teal polyps",
        base_rgb=(0.15, 0.52, 0.55),
        accent_rgb=(0.45, 0.82, 0.78),
        stripe_freq=3.0,
        features="blue-green mucosa, pale rounded protrusion, fine parallel ridges",
    ),
)


def render_image(cls: SyntheticClass, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [H,W,3] float image in [0,1] for the class."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    img = np.empty((size, size, 3))
    for c in range(3):
        img[..., c] = cls.base_rgb[c]

    # accent blob at a jittered position
    j = cls.geometry_jitter
    cy, cx = rng.uniform(0.5 - 0.2 * j, 0.5 + 0.2 * j, size=2)
    radius = rng.uniform(0.225 - 0.075 * j, 0.225 + 0.075 * j)
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    blob = np.exp(-dist2 / (2 * radius ** 2))
    for c in range(3):
        img[..., c] += blob * (cls.accent_rgb[c] - cls.base_rgb[c])

    phase = rng.uniform(0, 2 * np.pi * j)
    stripes = 0.05 * np.sin(2 * np.pi * cls.stripe_freq * (xx + yy) + phase)
    img += stripes[..., None]

    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def class_tensor(cls: SyntheticClass, n: int, size: int, seed: int) -> torch.Tensor:
    """[n,3,size,size] batch of one class, no file IO."""
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, f"synth/{cls.name}/{i}"))
        out[i] = render_image(cls, size, rng).transpose(2, 0, 1)
    return torch.from_numpy(out)


def generate_dataset(root, n_per_class: int, size: int = 32, seed: int = 0,
                     classes=DEFAULT_CLASSES) -> Path:
    """Write per-class PNG directories under root; returns the root path."""
    root = Path(root)
    for cls in classes:
        cls_dir = root / cls.name
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng(derive_seed(seed, f"synth/{cls.name}/{i}"))
            arr = (render_image(cls, size, rng) * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(cls_dir / f"{cls.name.replace(' ', '_')}_{i:04d}.png")
    return root


def default_meta(classes=DEFAULT_CLASSES) -> DatasetMeta:
    return DatasetMeta(
        modality="endoscopic",
        visual_features={cls.name: cls.features for cls in classes},
    )
