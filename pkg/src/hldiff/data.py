"""Class-labeled image corpus ingestion, splitting, and batch serving.

Layout on disk: one subdirectory per category under the dataset root, images
inside. The manifest is line-delimited JSON, one record per image with stable
field order (image_path, category, split, caption), so re-serialization is
diffable. Splits are assigned per category with a seeded shuffle:
ceil(ratio * n) records go to train.
"""

import json
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .seeding import derive_seed

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass
class ManifestRecord:
    image_path: str
    category: str
    split: str
    caption: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_path": self.image_path,
                "category": self.category,
                "split": self.split,
                "caption": self.caption,
            }
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split])

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def save(self, path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(ManifestRecord(
                    image_path=d["image_path"], category=d["category"],
                    split=d["split"], caption=d.get("caption"),
                ))
        return cls(records)

    def require_captions(self):
        missing = [r.image_path for r in self.records if not r.caption]
        if missing:
            raise ValueError(
                f"{len(missing)} records lack captions (first: {missing[0]})"
            )


def scan_and_split(root_dir, split_ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Scan per-category subdirectories and assign deterministic splits.

    Each category is shuffled by a seed derived from (seed, category name),
    so adding a category never reshuffles the others. ceil(ratio * n) images
    go to train.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if not (0.0 < split_ratio < 1.0):
        raise ValueError(f"split_ratio must be in (0,1), got {split_ratio}")
    categories = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not categories:
        raise ValueError(f"no category subdirectories under {root}")

    records = []
    for cat in categories:
        files = sorted(
            p for p in (root / cat).iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ValueError(f"category {cat!r} contains no images")
        rng = np.random.default_rng(derive_seed(seed, f"split/{cat}"))
        order = rng.permutation(len(files))
        n_train = math.ceil(split_ratio * len(files))
        for rank, idx in enumerate(order):
            records.append(ManifestRecord(
                image_path=str(files[idx]),
                category=cat,
                split="train" if rank < n_train else "test",
            ))
    records.sort(key=lambda r: r.image_path)
    return DatasetManifest(records)


def load_image(path, target_size: int) -> torch.Tensor:
    """One image as float [3,H,W] in [0,1]; grayscale replicated to 3 channels."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (target_size, target_size):
            im = im.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_batch(manifest: DatasetManifest, indices, target_size: int,
               on_error: str = "raise"):
    """(images [B,3,S,S] in [0,1], captions) for the given record indices."""
    images, captions = [], []
    for i in indices:
        rec = manifest.records[i]
        try:
            images.append(load_image(rec.image_path, target_size))
        except Exception:
            if on_error == "skip":
                continue
            raise
        captions.append(rec.caption)
    if not images:
        raise ValueError("empty batch after loading")
    return torch.stack(images), captions


class BatchServer:
    """Seeded, epoch-shuffled batch iterator with optional prefetching.

    Shuffling consumes only the provided rng, so batch order is a pure
    function of the seed; the single prefetch worker preserves that order.
    """

    def __init__(self, manifest: DatasetManifest, batch_size: int, target_size: int,
                 rng: np.random.Generator, prefetch: int = 0, drop_last: bool = False):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.manifest = manifest
        self.batch_size = batch_size
        self.target_size = target_size
        self.rng = rng
        self.prefetch = prefetch
        self.drop_last = drop_last

    def batches_per_epoch(self) -> int:
        n = len(self.manifest.records)
        return n // self.batch_size if self.drop_last else math.ceil(n / self.batch_size)

    def _epoch_indices(self):
        order = self.rng.permutation(len(self.manifest.records))
        step = self.batch_size
        for i in range(0, len(order), step):
            chunk = order[i:i + step]
            if self.drop_last and len(chunk) < step:
                return
            yield chunk

    def epoch(self):
        """Yield (images, captions) batches for one epoch."""
        if self.prefetch <= 0:
            for chunk in self._epoch_indices():
                yield load_batch(self.manifest, chunk, self.target_size)
            return

        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        DONE = object()

        def worker():
            try:
                for chunk in self._epoch_indices():
                    q.put(load_batch(self.manifest, chunk, self.target_size))
            except Exception as e:  # surfaced on the consumer side
                q.put(e)
            q.put(DONE)

        th = threading.Thread(target=worker, daemon=True)
        th.start()
        while True:
            item = q.get()
            if item is DONE:
                break
            if isinstance(item, Exception):
                raise item
            yield item
        th.join()
