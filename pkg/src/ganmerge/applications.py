"""Shared-latent-space demonstrations: interpolation, style mixing, editing.

All three work because the merged model places every class in one latent
space: style vectors from different classes can be blended, routed to
different synthesis layers, or shifted along a common semantic direction.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import GanMergeError, ShapeError
from .models import Image, LatentCode, Network, StyleVector, map_latent, synthesize, synthesize_styles


def interpolate(G: Network, code_a: LatentCode, code_b: LatentCode, steps: int) -> list[Image]:
    """Images along the line between two style vectors.

    Endpoints are evaluated through the plain synthesis path, so the first
    and last frames equal ``generate`` on the two codes bit-for-bit.
    """
    if steps < 2:
        raise ShapeError(f"need at least 2 interpolation steps, got {steps}")
    w_a = map_latent(G, code_a)
    w_b = map_latent(G, code_b)
    frames = []
    for i in range(steps):
        t = i / (steps - 1)
        if i == 0:
            w = w_a
        elif i == steps - 1:
            w = w_b
        else:
            w = w_a + t * (w_b - w_a)
        frames.append(synthesize(G, w))
    return frames


def style_mix(G: Network, w_pose: StyleVector, w_appearance: StyleVector, crossover: int) -> Image:
    """Feed ``w_pose`` to layers before ``crossover`` and ``w_appearance`` after."""
    n_layers = len(G.descriptor.synthesis_layers)
    if not (0 <= crossover <= n_layers):
        raise ShapeError(f"crossover must lie in [0, {n_layers}], got {crossover}")
    styles = [w_pose] * crossover + [w_appearance] * (n_layers - crossover)
    return synthesize_styles(G, styles)


def find_latent_direction(latents: Sequence[StyleVector], labels: Sequence[int]) -> Tensor:
    """Unit normal of a linear max-margin separator in style space."""
    from sklearn import svm

    if len(latents) != len(labels):
        raise ShapeError("latents and labels must have the same length")
    ys = np.asarray(labels, dtype=np.int64)
    classes = set(ys.tolist())
    if classes != {0, 1}:
        raise ShapeError(f"labels must be binary 0/1 with both present, got {sorted(classes)}")
    if min((ys == 0).sum(), (ys == 1).sum()) < 2:
        raise ShapeError("need at least 2 samples per label")
    xs = torch.stack(list(latents)).double().numpy()
    if np.allclose(xs, xs[0], atol=1e-12):
        raise GanMergeError("latents are all identical; no direction is defined")
    # near-hard-margin so the solution is invariant to dataset duplication
    clf = svm.SVC(kernel="linear", C=1e4, tol=1e-6)
    clf.fit(xs, ys)
    normal = np.asarray(clf.coef_, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(normal))
    if norm == 0.0:
        raise GanMergeError("separator is degenerate (zero normal)")
    return torch.from_numpy(normal / norm).to(torch.float32)


def apply_direction(G: Network, code: LatentCode, direction: Tensor, magnitude: float) -> Image:
    """Shift the style vector by ``magnitude * direction`` and synthesize.

    The direction lives in the shared style space, so it applies to codes of
    any class. Zero magnitude reproduces ``generate(G, code)`` bit-exactly.
    """
    w = map_latent(G, code)
    if tuple(direction.shape) != tuple(w.shape):
        raise ShapeError(f"direction shape {tuple(direction.shape)} does not match "
                         f"style dim {tuple(w.shape)}")
    if magnitude != 0.0:
        w = w + magnitude * direction.to(w.dtype)
    return synthesize(G, w)


def elongation_score(image: Image) -> float:
    """Horizontal-vs-vertical spread of bright mass, as a label source.

    The toy ring class embeds eccentricity as a controllable attribute, so
    this image moment stands in for an off-the-shelf attribute classifier
    when fitting latent directions.
    """
    arr = (image.detach().clamp(-1.0, 1.0) + 1.0) / 2.0
    weights = arr.sum(dim=0)
    total = float(weights.sum())
    if total <= 0.0:
        return 0.0
    h, w = weights.shape
    ys = torch.arange(h, dtype=torch.float64)[:, None]
    xs = torch.arange(w, dtype=torch.float64)[None, :]
    wd = weights.double() / total
    mx = float((wd * xs).sum())
    my = float((wd * ys).sum())
    var_x = float((wd * (xs - mx) ** 2).sum())
    var_y = float((wd * (ys - my) ** 2).sum())
    return float(np.log((var_x + 1e-9) / (var_y + 1e-9)))


# ---------------------------------------------------------------------------
# Figure output
# ---------------------------------------------------------------------------

def to_uint8(image: Image) -> np.ndarray:
    """[-1, 1] float image (C, H, W) -> uint8 (H, W) or (H, W, 3)."""
    arr = image.detach().clamp(-1.0, 1.0).numpy()
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def write_image_grid(rows: Sequence[Sequence[Image]], path: str | Path, padding: int = 2) -> None:
    """PNG grid of images: interpolation strips, mixing matrices, and the like."""
    from PIL import Image as PILImage

    if not rows or not rows[0]:
        raise ShapeError("grid needs at least one image")
    tiles = [[to_uint8(img) for img in row] for row in rows]
    h, w = tiles[0][0].shape[:2]
    channels = 1 if tiles[0][0].ndim == 2 else 3
    n_rows, n_cols = len(tiles), max(len(r) for r in tiles)
    canvas_shape = (n_rows * (h + padding) - padding, n_cols * (w + padding) - padding)
    if channels == 3:
        canvas_shape = (*canvas_shape, 3)
    canvas = np.zeros(canvas_shape, dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            y, x = r * (h + padding), c * (w + padding)
            canvas[y:y + h, x:x + w] = tile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(canvas).save(path)
