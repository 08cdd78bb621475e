"""Fréchet-distance evaluation in a fixed random-feature embedding.

A seed-locked convolutional feature extractor stands in for a pretrained
embedding network: random features preserve distributional discrimination at
toy scale, and the seed is part of the experiment fixture so scores are
comparable within a run. Gaussian statistics are fitted to the features and
compared with the Fréchet distance

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)),

with the matrix square root taken through a symmetric eigendecomposition of
S_a^(1/2) S_b S_a^(1/2), eigenvalues clamped at zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import ImageDataset
from .errors import GanMergeError, ShapeError
from .models import GanPair, LatentCode, Network, generate

DEFAULT_FEATURE_DIM = 64
EXTRACT_CHUNK = 64  # all conv calls use this exact batch size (padded), so
                    # per-row arithmetic is identical wherever an image lands


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian summary (mean, covariance, count) of extracted features."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        if self.mean.ndim != 1:
            raise ShapeError("mean must be a vector")
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ShapeError(f"covariance must be {d}x{d}, got {self.covariance.shape}")
        if self.count < 2:
            raise ShapeError(f"count must be >= 2, got {self.count}")
        asym = float(np.abs(self.covariance - self.covariance.T).max())
        if asym > 1e-6:
            raise ShapeError(f"covariance is asymmetric beyond tolerance: {asym:g}")


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed (seed-locked) convolutional feature map to ``feature_dim``."""

    resolution: int
    channels: int
    feature_dim: int
    seed: int
    params: dict[str, Tensor]

    @staticmethod
    def create(resolution: int, channels: int = 1, seed: int = 0,
               feature_dim: int = DEFAULT_FEATURE_DIM) -> "FeatureExtractor":
        if resolution < 4 or resolution & (resolution - 1):
            raise ShapeError(f"resolution must be a power of two >= 4, got {resolution}")
        gen = torch.Generator().manual_seed(seed)
        params: dict[str, Tensor] = {}

        def conv(name: str, out_ch: int, in_ch: int, k: int) -> None:
            fan_in = in_ch * k * k
            params[f"{name}/weight"] = torch.randn((out_ch, in_ch, k, k), generator=gen) * fan_in ** -0.5
            params[f"{name}/bias"] = torch.randn((out_ch,), generator=gen) * 0.1

        width = 16
        conv("conv0", width, channels, 1)
        res = resolution
        stage = 0
        while res > 4:
            conv(f"stage{stage}", min(width * 2, 64), width, 3)
            width = min(width * 2, 64)
            res //= 2
            stage += 1
        # the head consumes the flattened 4x4 map: spatial layout carries the
        # distributional signal that global pooling would average away
        head_in = width * res * res
        params["head/weight"] = torch.randn((feature_dim, head_in), generator=gen) * head_in ** -0.5
        params["head/bias"] = torch.randn((feature_dim,), generator=gen) * 0.1
        return FeatureExtractor(resolution, channels, feature_dim, seed, params)

    def _forward(self, images: Tensor) -> Tensor:
        h = torch.clamp(images, -1.0, 1.0)
        h = F.leaky_relu(F.conv2d(h, self.params["conv0/weight"], self.params["conv0/bias"]), 0.2)
        stage = 0
        while f"stage{stage}/weight" in self.params:
            h = F.conv2d(h, self.params[f"stage{stage}/weight"],
                         self.params[f"stage{stage}/bias"], stride=2, padding=1)
            h = F.leaky_relu(h, 0.2)
            stage += 1
        return F.linear(h.reshape(h.shape[0], -1), self.params["head/weight"], self.params["head/bias"])


def extract_features(extractor: FeatureExtractor, images: Tensor) -> np.ndarray:
    """Deterministic (n, feature_dim) float64 feature matrix.

    Images are clamped to [-1, 1] first. Work proceeds in fixed-size padded
    chunks, so a given image yields the same row wherever it appears.
    """
    expected = (extractor.channels, extractor.resolution, extractor.resolution)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(f"expected images shaped (n, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {tuple(images.shape)}")
    n = images.shape[0]
    rows = []
    with torch.no_grad():
        for start in range(0, n, EXTRACT_CHUNK):
            chunk = images[start:start + EXTRACT_CHUNK]
            pad = EXTRACT_CHUNK - chunk.shape[0]
            if pad:
                chunk = torch.cat([chunk, torch.zeros((pad, *expected))], dim=0)
            feats = extractor._forward(chunk.to(torch.float32))
            rows.append(feats[: EXTRACT_CHUNK - pad] if pad else feats)
    out = torch.cat(rows, dim=0).to(torch.float64).numpy()
    if not np.isfinite(out).all():
        raise GanMergeError("feature extraction produced non-finite values")
    return out


def fit_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased (n-1) covariance of a feature matrix."""
    if features.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ShapeError(f"need at least 2 feature rows, got {n}")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, covariance=cov, count=n)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Fréchet distance between two Gaussian summaries (clamped at 0)."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    try:
        sqrt_a = _sqrt_psd(a.covariance)
        inner = sqrt_a @ b.covariance @ sqrt_a
        inner = (inner + inner.T) / 2.0
        eigvals = np.linalg.eigvalsh(inner)
    except np.linalg.LinAlgError:
        # retry once with a small ridge before giving up
        ridge = 1e-9 * np.eye(a.mean.shape[0])
        try:
            sqrt_a = _sqrt_psd(a.covariance + ridge)
            inner = sqrt_a @ (b.covariance + ridge) @ sqrt_a
            inner = (inner + inner.T) / 2.0
            eigvals = np.linalg.eigvalsh(inner)
        except np.linalg.LinAlgError as exc:
            cond_a = np.linalg.cond(a.covariance)
            cond_b = np.linalg.cond(b.covariance)
            raise GanMergeError(
                f"matrix square root failed after regularization "
                f"(cond(a)={cond_a:.3g}, cond(b)={cond_b:.3g})"
            ) from exc
    tr_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    value = mean_term + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * tr_sqrt
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# FID-style scoring
# ---------------------------------------------------------------------------

def sample_images(net: Network, n: int, rng: torch.Generator,
                  class_filter: int | str = "union") -> Tensor:
    """n generated images; classes drawn uniformly unless one is fixed."""
    desc = net.descriptor
    rows = []
    for _ in range(n):
        if class_filter == "union":
            c = int(torch.randint(0, desc.num_classes, (1,), generator=rng))
        else:
            c = int(class_filter)
        z = torch.randn(desc.latent_dim, generator=rng)
        rows.append(generate(net, LatentCode(z, c)))
    return torch.stack(rows, dim=0)


def _dataset_sample(dataset: ImageDataset, n: int, rng: torch.Generator,
                    class_filter: int | str) -> Tensor:
    if class_filter != "union":
        dataset = dataset.subset_by_class(int(class_filter))
    idx = torch.randint(0, len(dataset), (n,), generator=rng)
    return dataset.images[idx]


def fid(source: Network | GanPair | ImageDataset, reference: FeatureStats, n: int,
        extractor: FeatureExtractor, rng: torch.Generator,
        class_filter: int | str = "union") -> float:
    """Fréchet distance between ``n`` sampled images and the reference stats.

    Models are sampled through their EMA generator when a pair is given; for
    the union score classes are drawn uniformly.
    """
    if n < 2:
        raise ShapeError(f"need n >= 2 samples, got {n}")
    if isinstance(source, GanPair):
        source = source.ema_generator()
    if isinstance(source, Network):
        images = sample_images(source, n, rng, class_filter)
    else:
        images = _dataset_sample(source, n, rng, class_filter)
    stats = fit_stats(extract_features(extractor, images))
    return frechet_distance(stats, reference)


def dataset_stats(dataset: ImageDataset, extractor: FeatureExtractor) -> FeatureStats:
    """Reference statistics over every image in the dataset."""
    return fit_stats(extract_features(extractor, dataset.images))


@dataclass(frozen=True)
class EvalReferences:
    """Reference stats for the union and for each class."""

    union: FeatureStats
    per_class: dict[int, FeatureStats]


def build_references(parts: Sequence[ImageDataset], extractor: FeatureExtractor) -> EvalReferences:
    """Per-class and union reference stats from one dataset per class."""
    from .data import concat_datasets

    per_class = {i: dataset_stats(part, extractor) for i, part in enumerate(parts)}
    union = dataset_stats(concat_datasets(list(parts)), extractor)
    return EvalReferences(union=union, per_class=per_class)


def fid_report(source: Network | GanPair, references: EvalReferences, n: int,
               extractor: FeatureExtractor, rng: torch.Generator) -> dict:
    """Union score plus one score per class, the shape used by the tables."""
    report = {"union": fid(source, references.union, n, extractor, rng, "union")}
    per_class = {}
    for c, ref in references.per_class.items():
        per_class[str(c)] = fid(source, ref, n, extractor, rng, c)
    report["per_class"] = per_class
    return report


def data_free_report(union: Network | GanPair, sources: Sequence[Network | GanPair],
                     n: int, extractor: FeatureExtractor, rng: torch.Generator) -> dict:
    """Cross-model Fréchet distances when no real reference data exists.

    Compares each union class against samples from the source model that
    provides that class, and flags that no dataset reference was available.
    """
    if isinstance(union, GanPair):
        union = union.ema_generator()
    per_class = {}
    for c, src in enumerate(sources):
        if isinstance(src, GanPair):
            src = src.ema_generator()
        src_stats = fit_stats(extract_features(extractor, sample_images(src, n, rng, 0)))
        per_class[str(c)] = fid(union, src_stats, n, extractor, rng, c)
    return {"reference_available": False, "per_class_vs_source": per_class}


# ---------------------------------------------------------------------------
# Reference-stats disk cache
# ---------------------------------------------------------------------------

def dataset_fingerprint(dataset: ImageDataset) -> str:
    h = hashlib.sha256()
    h.update(dataset.images.numpy().tobytes())
    h.update(dataset.labels.numpy().tobytes())
    return h.hexdigest()


def save_stats(stats: FeatureStats, path: str | Path, extractor: FeatureExtractor,
               fingerprint: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "extractor_seed": extractor.seed,
        "feature_dim": extractor.feature_dim,
        "count": stats.count,
        "fingerprint": fingerprint,
    }
    np.savez(path, mean=stats.mean, covariance=stats.covariance,
             meta=json.dumps(meta, sort_keys=True))


def load_stats(path: str | Path, extractor: FeatureExtractor,
               fingerprint: str | None = None) -> FeatureStats | None:
    """Cached stats, or None when the cache entry does not match."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta["extractor_seed"] != extractor.seed or meta["feature_dim"] != extractor.feature_dim:
            return None
        if fingerprint is not None and meta["fingerprint"] != fingerprint:
            return None
        return FeatureStats(mean=archive["mean"], covariance=archive["covariance"],
                            count=int(meta["count"]))
