"""On-disk tensor container: JSON manifest plus a float32 little-endian blob.

Layout: an 8-byte magic, a little-endian uint32 manifest length, the manifest
JSON, the SHA-256 of the manifest bytes, then the contiguous blob. The
manifest records every tensor's section, name, shape, and byte offset, plus
the blob's size and SHA-256; both hashes are verified on load, so truncation
or corruption is detected before any tensor is built. ``load(save(pair))``
is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

from .baselines import FisherMap
from .errors import CheckpointError
from .models import (
    ArchitectureDescriptor,
    GanPair,
    Network,
    PairMetadata,
    ParameterSet,
)

MAGIC = b"GMCK\x00\x01\x00\x00"
FORMAT_VERSION = 1


def _write_container(path: Path, kind: str, sections: Mapping[str, Mapping[str, Tensor]],
                     extra: Mapping) -> None:
    blob_parts: list[bytes] = []
    directory = []
    offset = 0
    for section in sorted(sections):
        for name, tensor in sections[section].items():
            data = tensor.detach().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()
            directory.append({
                "section": section,
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "offset": offset,
            })
            blob_parts.append(data)
            offset += len(data)
    blob = b"".join(blob_parts)
    manifest = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "tensors": directory,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        **dict(extra),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(hashlib.sha256(manifest_bytes).digest())
        fh.write(blob)


def _read_container(path: Path, expected_kind: str) -> tuple[dict, dict[str, dict[str, Tensor]]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (manifest_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + manifest_len + 32:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest_bytes = raw[pos:pos + manifest_len]
    pos += manifest_len
    stored_hash = raw[pos:pos + 32]
    pos += 32
    if hashlib.sha256(manifest_bytes).digest() != stored_hash:
        raise CheckpointError(f"{path}: manifest hash mismatch (corrupt file)")
    manifest = json.loads(manifest_bytes)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')!r}"
        )
    if manifest.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path}: expected a {expected_kind!r} checkpoint, found {manifest.get('kind')!r}"
        )
    blob = raw[pos:]
    if len(blob) != manifest["blob_size"]:
        raise CheckpointError(
            f"{path}: blob is {len(blob)} bytes, manifest declares {manifest['blob_size']}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: blob hash mismatch (corrupt file)")
    sections: dict[str, dict[str, Tensor]] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        tensor = torch.from_numpy(arr.astype(np.float32, copy=True))
        sections.setdefault(entry["section"], {})[entry["name"]] = tensor
    return manifest, sections


def save_checkpoint(pair: GanPair, path: str | Path) -> None:
    """Persist a pair (generator, discriminator, EMA copy) to one file."""
    sections = {
        "generator": pair.generator.params.as_dict(),
        "discriminator": pair.discriminator.params.as_dict(),
        "ema": pair.ema_generator_params.as_dict(),
    }
    extra = {
        "descriptor": pair.descriptor.serialize(),
        "metadata": {
            "source_tag": pair.metadata.source_tag,
            "training_step": pair.metadata.training_step,
            "rng_seed": pair.metadata.rng_seed,
        },
    }
    _write_container(Path(path), "gan_pair", sections, extra)


def load_checkpoint(path: str | Path) -> GanPair:
    """Load a pair, verifying manifest and blob hashes."""
    manifest, sections = _read_container(Path(path), "gan_pair")
    descriptor = ArchitectureDescriptor.deserialize(manifest["descriptor"])
    meta = manifest.get("metadata", {})
    for key in ("generator", "discriminator", "ema"):
        if key not in sections:
            raise CheckpointError(f"{path}: missing section {key!r}")
    return GanPair(
        generator=Network(descriptor, ParameterSet(sections["generator"])),
        discriminator=Network(descriptor, ParameterSet(sections["discriminator"])),
        ema_generator_params=ParameterSet(sections["ema"]),
        metadata=PairMetadata(
            source_tag=meta.get("source_tag", ""),
            training_step=int(meta.get("training_step", 0)),
            rng_seed=int(meta.get("rng_seed", 0)),
        ),
    )


def save_fisher(fisher_g: FisherMap, fisher_d: FisherMap, path: str | Path) -> None:
    """Persist Fisher maps in the same container format as checkpoints."""
    sections = {"fisher_g": fisher_g.entries, "fisher_d": fisher_d.entries}
    extra = {"sample_count": {"fisher_g": fisher_g.sample_count,
                              "fisher_d": fisher_d.sample_count}}
    _write_container(Path(path), "fisher", sections, extra)


def load_fisher(path: str | Path) -> tuple[FisherMap, FisherMap]:
    manifest, sections = _read_container(Path(path), "fisher")
    counts = manifest.get("sample_count", {})
    return (
        FisherMap(sections.get("fisher_g", {}), int(counts.get("fisher_g", 0))),
        FisherMap(sections.get("fisher_d", {}), int(counts.get("fisher_d", 0))),
    )
