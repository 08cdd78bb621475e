"""Training-batch suppliers: frozen pretrained generators or image datasets.

Both routes yield the same ``LabeledBatch`` contract, so trainers cannot tell
whether pixels came from a generator or from disk; switching between the
data-free regime and real-data training is a supplier swap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence, TypeAlias

import numpy as np
import torch
from torch import Tensor

from .errors import ShapeError
from .models import GanPair, LatentCode, Network, generate

log = logging.getLogger(__name__)

BatchSupplier: TypeAlias = Callable[[int, torch.Generator], "LabeledBatch"]


@dataclass(frozen=True)
class LabeledBatch:
    """A batch of images in [-1, 1] with integer class labels."""

    images: Tensor  # (B, C, H, W) float32
    labels: Tensor  # (B,) int64

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be 4-D, got shape {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ShapeError(
                f"labels shape {tuple(self.labels.shape)} does not match batch "
                f"size {self.images.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class FrozenSource:
    """A frozen generator assigned to one class of the union model."""

    net: Network
    class_id: int


def pair_as_source(pair: GanPair, class_id: int, use_ema: bool = True) -> FrozenSource:
    """Wrap a trained pair's generator (EMA weights by default) as a data source."""
    net = pair.ema_generator() if use_ema else pair.generator
    return FrozenSource(net, class_id)


def sample_batch(sources: Sequence[FrozenSource], batch_size: int,
                 rng: torch.Generator) -> LabeledBatch:
    """Draw a labeled batch from frozen generators.

    Each row draws a class uniformly, a standard-normal latent, and renders
    it with the generator assigned to that class. Sources may have different
    architectures as long as their output resolution and channels agree.
    """
    if not sources:
        raise ShapeError("sample_batch needs at least one source")
    n = len(sources)
    ids = sorted(s.class_id for s in sources)
    if ids != list(range(n)):
        raise ShapeError(f"source class ids must cover [0, {n}), got {ids}")
    first = sources[0].net.descriptor
    for s in sources[1:]:
        d = s.net.descriptor
        if d.image_resolution != first.image_resolution:
            raise ShapeError(
                f"source resolutions differ: {first.image_resolution} vs {d.image_resolution}"
            )
        if d.image_channels != first.image_channels:
            raise ShapeError(
                f"source channel counts differ: {first.image_channels} vs {d.image_channels}"
            )
    by_class = {s.class_id: s.net for s in sources}
    labels = torch.randint(0, n, (batch_size,), generator=rng)
    rows = []
    for c in labels.tolist():
        net = by_class[c]
        z = torch.randn(net.descriptor.latent_dim, generator=rng)
        rows.append(generate(net, LatentCode(z, 0)))
    return LabeledBatch(images=torch.stack(rows, dim=0), labels=labels)


def generator_supplier(sources: Sequence[FrozenSource]) -> BatchSupplier:
    return lambda batch_size, rng: sample_batch(sources, batch_size, rng)


# ---------------------------------------------------------------------------
# Image datasets
# ---------------------------------------------------------------------------

class ImageDataset:
    """In-memory labeled image collection with declared shape metadata."""

    def __init__(self, images: Tensor, labels: Tensor, num_classes: int,
                 class_names: Sequence[str] | None = None):
        if images.ndim != 4:
            raise ShapeError(f"images must be 4-D, got shape {tuple(images.shape)}")
        if labels.shape != (images.shape[0],):
            raise ShapeError("labels must be 1-D and match the image count")
        if images.shape[0] == 0:
            raise ShapeError("dataset is empty")
        if int(labels.max()) >= num_classes or int(labels.min()) < 0:
            raise ShapeError(f"labels must lie in [0, {num_classes})")
        self.images = images.to(torch.float32)
        self.labels = labels.to(torch.int64)
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [str(i) for i in range(num_classes)]

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return self.images.shape[0]

    def __iter__(self) -> Iterator[tuple[Tensor, int]]:
        for i in range(len(self)):
            yield self.images[i], int(self.labels[i])

    def subset_by_class(self, c: int) -> "ImageDataset":
        mask = self.labels == c
        return ImageDataset(self.images[mask], torch.zeros(int(mask.sum()), dtype=torch.int64), 1,
                            [self.class_names[c]])

    def supplier(self) -> BatchSupplier:
        """Uniform-with-replacement batch supplier over this dataset."""

        def supply(batch_size: int, rng: torch.Generator) -> LabeledBatch:
            idx = torch.randint(0, len(self), (batch_size,), generator=rng)
            return LabeledBatch(images=self.images[idx], labels=self.labels[idx])

        return supply


def concat_datasets(parts: Sequence[ImageDataset]) -> ImageDataset:
    """Union dataset: part ``i`` becomes class ``i``."""
    if not parts:
        raise ShapeError("need at least one dataset")
    images = torch.cat([p.images for p in parts], dim=0)
    labels = torch.cat(
        [torch.full((len(p),), i, dtype=torch.int64) for i, p in enumerate(parts)]
    )
    names = [p.class_names[0] for p in parts]
    return ImageDataset(images, labels, len(parts), names)


# ---------------------------------------------------------------------------
# Procedural toy datasets
# ---------------------------------------------------------------------------

TOY_SPECS = ("rings", "boxes", "gaussians-grid", "two-moons-render", "digit-subset")

# boxes drawing rule: integer side lengths are drawn uniformly from
# [round(0.3*res), round(0.5*res)], the rectangle is filled with +1 on a -1
# background, so each image's mean brightness is exactly 2*(w*h)/res^2 - 1
# and lies in [2*0.09 - 1, 2*0.25 - 1] up to the rounding of the bounds.
BOX_SIDE_FRACTIONS = (0.3, 0.5)


def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(coords, coords, indexing="xy")


def _soft_band(dist: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-((dist / sigma) ** 2))


def _draw_rings(rng: np.random.Generator, res: int) -> np.ndarray:
    # eccentricity is the controllable attribute used by the editing demo;
    # band width 0.13 keeps the ring a few pixels thick at 32x32
    xx, yy = _grid(res)
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    radius = rng.uniform(0.35, 0.55)
    ecc = rng.uniform(0.75, 1.3)
    d = np.sqrt(((xx - cx) * ecc) ** 2 + ((yy - cy) / ecc) ** 2) - radius
    return _soft_band(d, 0.13) * 2.0 - 1.0


def _draw_boxes(rng: np.random.Generator, res: int) -> np.ndarray:
    lo = int(round(BOX_SIDE_FRACTIONS[0] * res))
    hi = int(round(BOX_SIDE_FRACTIONS[1] * res))
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x0 = int(rng.integers(0, res - w + 1))
    y0 = int(rng.integers(0, res - h + 1))
    img = np.full((res, res), -1.0)
    img[y0:y0 + h, x0:x0 + w] = 1.0
    return img


def _draw_gaussians_grid(rng: np.random.Generator, res: int) -> np.ndarray:
    xx, yy = _grid(res)
    img = np.zeros((res, res))
    centers = np.linspace(-0.6, 0.6, 3)
    amps = rng.uniform(0.2, 1.0, size=(3, 3))
    jitter = rng.uniform(-0.08, 0.08, size=(3, 3, 2))
    for i, cx in enumerate(centers):
        for j, cy in enumerate(centers):
            dx = xx - (cx + jitter[i, j, 0])
            dy = yy - (cy + jitter[i, j, 1])
            img += amps[i, j] * np.exp(-(dx ** 2 + dy ** 2) / (2 * 0.12 ** 2))
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


def _draw_two_moons(rng: np.random.Generator, res: int) -> np.ndarray:
    xx, yy = _grid(res)
    angle = rng.uniform(0.0, 2 * np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    rx, ry = xx * ca - yy * sa, xx * sa + yy * ca
    r = rng.uniform(0.4, 0.55)
    sep = rng.uniform(0.15, 0.3)
    theta = np.arctan2(ry + sep, rx + r * 0.5)
    d_up = np.abs(np.sqrt((rx + r * 0.5) ** 2 + (ry + sep) ** 2) - r)
    up = np.where(theta > 0, _soft_band(d_up, 0.07), 0.0)
    theta2 = np.arctan2(ry - sep, rx - r * 0.5)
    d_dn = np.abs(np.sqrt((rx - r * 0.5) ** 2 + (ry - sep) ** 2) - r)
    down = np.where(theta2 < 0, _soft_band(d_dn, 0.07), 0.0)
    return np.clip(up + down, 0.0, 1.0) * 2.0 - 1.0


_SEGMENTS = {  # seven-segment layout, (x0, y0, x1, y1) in unit square
    "top": (0.2, 0.1, 0.8, 0.2),
    "mid": (0.2, 0.45, 0.8, 0.55),
    "bot": (0.2, 0.8, 0.8, 0.9),
    "tl": (0.15, 0.15, 0.3, 0.5),
    "tr": (0.7, 0.15, 0.85, 0.5),
    "bl": (0.15, 0.5, 0.3, 0.85),
    "br": (0.7, 0.5, 0.85, 0.85),
}
_DIGIT_SEGMENTS = {
    0: ("top", "bot", "tl", "tr", "bl", "br"),
    1: ("tr", "br"),
    2: ("top", "mid", "bot", "tr", "bl"),
    3: ("top", "mid", "bot", "tr", "br"),
    4: ("mid", "tl", "tr", "br"),
    5: ("top", "mid", "bot", "tl", "br"),
    6: ("top", "mid", "bot", "tl", "bl", "br"),
    7: ("top", "tr", "br"),
    8: ("top", "mid", "bot", "tl", "tr", "bl", "br"),
    9: ("top", "mid", "bot", "tl", "tr", "br"),
}


def _draw_digit(rng: np.random.Generator, res: int, digits: Sequence[int]) -> np.ndarray:
    digit = int(digits[int(rng.integers(0, len(digits)))])
    scale = rng.uniform(0.7, 0.95)
    ox = rng.uniform(0.0, 1.0 - scale)
    oy = rng.uniform(0.0, 1.0 - scale)
    img = np.full((res, res), -1.0)
    for seg in _DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = _SEGMENTS[seg]
        c0 = int(np.floor((ox + x0 * scale) * res))
        r0 = int(np.floor((oy + y0 * scale) * res))
        c1 = int(np.ceil((ox + x1 * scale) * res))
        r1 = int(np.ceil((oy + y1 * scale) * res))
        img[max(r0, 0):min(r1, res), max(c0, 0):min(c1, res)] = 1.0
    return img


def build_toy_dataset(spec: str, n: int, seed: int, resolution: int = 32,
                      channels: int = 1, digits: Sequence[int] = (0, 1)) -> ImageDataset:
    """Deterministic procedural dataset of one visually distinct class.

    ``spec`` is one of ``rings``, ``boxes``, ``gaussians-grid``,
    ``two-moons-render``, ``digit-subset``; ``digits`` only applies to the
    last. Pixels are float32 in [-1, 1].
    """
    if n <= 0:
        raise ShapeError(f"dataset size must be positive, got {n}")
    if spec == "rings":
        draw = _draw_rings
    elif spec == "boxes":
        draw = _draw_boxes
    elif spec == "gaussians-grid":
        draw = _draw_gaussians_grid
    elif spec == "two-moons-render":
        draw = _draw_two_moons
    elif spec == "digit-subset":
        draw = lambda rng, res: _draw_digit(rng, res, digits)
    else:
        raise ShapeError(f"unknown toy dataset spec {spec!r}; known: {TOY_SPECS}")
    rng = np.random.default_rng(seed)
    frames = np.stack([draw(rng, resolution) for _ in range(n)]).astype(np.float32)
    images = torch.from_numpy(frames).unsqueeze(1)
    if channels > 1:
        images = images.expand(-1, channels, -1, -1).contiguous()
    labels = torch.zeros(n, dtype=torch.int64)
    return ImageDataset(images, labels, 1, [spec])


# ---------------------------------------------------------------------------
# Folder ingestion
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _load_image(path: Path, resolution: int, channels: int) -> Tensor:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        side = min(im.size)
        left = (im.size[0] - side) // 2
        top = (im.size[1] - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    if channels == 1:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr / 127.5 - 1.0)


def ingest_image_folder(path: str | Path, resolution: int, channels: int = 3,
                        class_layout: str = "auto") -> ImageDataset:
    """Load a folder of images, center-cropped, resized, normalized to [-1, 1].

    With per-class subdirectories, labels follow lexicographic subdirectory
    order; a flat folder is a single class. Unreadable files are skipped with
    a warning. Normalization is exactly ``x / 127.5 - 1`` on 8-bit values.
    """
    root = Path(path)
    if not root.is_dir():
        raise ShapeError(f"{root} is not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    if class_layout == "flat" or (class_layout == "auto" and not subdirs):
        groups = [(root.name, root)]
    elif class_layout in ("auto", "subdirs"):
        if not subdirs:
            raise ShapeError(f"{root} has no class subdirectories")
        groups = [(d.name, d) for d in subdirs]
    else:
        raise ShapeError(f"unknown class_layout {class_layout!r}")
    images, labels, names = [], [], []
    for label, (name, directory) in enumerate(groups):
        names.append(name)
        files = sorted(f for f in directory.iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        for f in files:
            try:
                images.append(_load_image(f, resolution, channels))
            except Exception as exc:  # unreadable file: skip, keep going
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            labels.append(label)
    if not images:
        raise ShapeError(f"no readable images under {root}")
    return ImageDataset(torch.stack(images), torch.tensor(labels, dtype=torch.int64),
                        len(groups), names)
