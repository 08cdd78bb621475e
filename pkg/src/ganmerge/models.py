"""Minimal conditional generator/discriminator family.

The generator is a style-based stack: a fully-connected mapping network turns
the latent code (optionally concatenated with a class embedding) into a style
vector `w`, and a convolutional synthesis stack modulates each layer's output
channels with an affine function of `w`. The discriminator mirrors the
synthesis stack and scores an image through a linear head plus a projection
term `<embed(c), features>` when conditional.

All forward evaluation is functional: networks are (descriptor, ParameterSet)
pairs and every op is a pure function of parameters and inputs. Batched public
ops are defined as the concatenation of single-sample evaluations, so batch
results are bit-identical to the corresponding single calls. Training code
uses the batched `generator_forward` / `discriminator_forward` fast paths,
which carry the same math but fuse the batch dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Sequence, TypeAlias

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DescriptorError, ShapeError, SignatureMismatchError

LRELU_SLOPE = 0.2

Image: TypeAlias = Tensor
StyleVector: TypeAlias = Tensor

LAYER_KINDS = ("base", "up", "same")


@dataclass(frozen=True)
class SynthesisLayer:
    """One synthesis stage: `base` starts from a learned constant, `up`
    doubles resolution before its convolution, `same` keeps it."""

    kind: str
    in_width: int
    out_width: int
    resolution: int


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Declarative network topology; the unit of architecture equality.

    Two descriptors are equal iff their canonical serializations are
    byte-equal. ``embed_dim > 0`` marks a conditional model: the generator
    gains a class embedding concatenated to `z` and the discriminator gains
    a projection embedding. ``embed_dim == 0`` requires ``num_classes == 1``.
    """

    latent_dim: int
    num_classes: int
    mapping_depth: int
    embed_dim: int
    synthesis_layers: tuple[SynthesisLayer, ...]
    image_resolution: int
    image_channels: int

    def __post_init__(self):
        if self.latent_dim < 1:
            raise DescriptorError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.num_classes < 1:
            raise DescriptorError(f"num_classes must be positive, got {self.num_classes}")
        if self.mapping_depth < 1:
            raise DescriptorError(f"mapping_depth must be positive, got {self.mapping_depth}")
        if self.embed_dim < 0:
            raise DescriptorError(f"embed_dim must be non-negative, got {self.embed_dim}")
        if self.embed_dim == 0 and self.num_classes != 1:
            raise DescriptorError(
                f"unconditional model (embed_dim=0) requires num_classes=1, got {self.num_classes}"
            )
        if self.image_channels not in (1, 3):
            raise DescriptorError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if not self.synthesis_layers:
            raise DescriptorError("synthesis_layers must be non-empty")
        for i, layer in enumerate(self.synthesis_layers):
            if layer.kind not in LAYER_KINDS:
                raise DescriptorError(f"synthesis layer {i}: unknown kind {layer.kind!r}")
            if layer.in_width < 1 or layer.out_width < 1:
                raise DescriptorError(f"synthesis layer {i}: widths must be positive")
            if i == 0:
                if layer.kind != "base":
                    raise DescriptorError(f"synthesis layer 0 must have kind 'base', got {layer.kind!r}")
                if layer.resolution < 1:
                    raise DescriptorError(f"synthesis layer 0: resolution must be positive")
            else:
                prev = self.synthesis_layers[i - 1]
                if layer.kind == "base":
                    raise DescriptorError(f"synthesis layer {i}: 'base' is only valid at position 0")
                if layer.in_width != prev.out_width:
                    raise DescriptorError(
                        f"synthesis layer {i}: in_width {layer.in_width} does not match "
                        f"previous out_width {prev.out_width}"
                    )
                expected = prev.resolution * 2 if layer.kind == "up" else prev.resolution
                if layer.resolution != expected:
                    raise DescriptorError(
                        f"synthesis layer {i}: resolution {layer.resolution} does not match "
                        f"expected {expected} for kind {layer.kind!r}"
                    )
        last = self.synthesis_layers[-1]
        if last.resolution != self.image_resolution:
            raise DescriptorError(
                f"synthesis layer {len(self.synthesis_layers) - 1}: final resolution "
                f"{last.resolution} does not end at image_resolution {self.image_resolution}"
            )

    @property
    def conditional(self) -> bool:
        return self.embed_dim > 0

    @property
    def style_dim(self) -> int:
        # mapping hidden width; only the first layer widens for the embedding
        return self.latent_dim

    @property
    def base_width(self) -> int:
        return self.synthesis_layers[0].in_width

    @property
    def top_width(self) -> int:
        return self.synthesis_layers[-1].out_width

    def serialize(self) -> str:
        """Canonical JSON form; byte-equality of this string is descriptor equality."""
        doc = {
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "mapping_depth": self.mapping_depth,
            "embed_dim": self.embed_dim,
            "synthesis_layers": [
                [l.kind, l.in_width, l.out_width, l.resolution] for l in self.synthesis_layers
            ],
            "image_resolution": self.image_resolution,
            "image_channels": self.image_channels,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def deserialize(text: str) -> "ArchitectureDescriptor":
        doc = json.loads(text)
        layers = tuple(SynthesisLayer(k, iw, ow, r) for k, iw, ow, r in doc["synthesis_layers"])
        return ArchitectureDescriptor(
            latent_dim=doc["latent_dim"],
            num_classes=doc["num_classes"],
            mapping_depth=doc["mapping_depth"],
            embed_dim=doc["embed_dim"],
            synthesis_layers=layers,
            image_resolution=doc["image_resolution"],
            image_channels=doc["image_channels"],
        )


def default_descriptor(
    resolution: int = 32,
    num_classes: int = 1,
    latent_dim: int = 16,
    embed_dim: int | None = None,
    mapping_depth: int = 2,
    base_width: int = 32,
    image_channels: int = 1,
) -> ArchitectureDescriptor:
    """Desk-scale architecture: widths shrink by 1/4 of base per doubling.

    ``embed_dim=None`` picks 0 (unconditional) for a single class and 8
    otherwise; pass it explicitly to build a single-class conditional model.
    """
    if embed_dim is None:
        embed_dim = 0 if num_classes == 1 else 8
    layers = [SynthesisLayer("base", base_width, base_width, 4)]
    res, width = 4, base_width
    while res < resolution:
        next_width = max(4, width - max(1, base_width // 5))
        layers.append(SynthesisLayer("up", width, next_width, res * 2))
        res, width = res * 2, next_width
    if res != resolution:
        raise DescriptorError(f"resolution {resolution} is not a power-of-two multiple of 4")
    return ArchitectureDescriptor(
        latent_dim=latent_dim,
        num_classes=num_classes,
        mapping_depth=mapping_depth,
        embed_dim=embed_dim,
        synthesis_layers=tuple(layers),
        image_resolution=resolution,
        image_channels=image_channels,
    )


# ---------------------------------------------------------------------------
# Canonical parameter naming: <network>/<stage>/<index>/<tensor-role>
# ---------------------------------------------------------------------------

def generator_parameter_shapes(desc: ArchitectureDescriptor) -> dict[str, tuple[int, ...]]:
    """Name -> shape for the generator, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if desc.conditional:
        shapes["g/embed/0/table"] = (desc.num_classes, desc.embed_dim)
    for i in range(desc.mapping_depth):
        in_dim = desc.latent_dim + desc.embed_dim if i == 0 else desc.latent_dim
        shapes[f"g/map/{i}/weight"] = (desc.latent_dim, in_dim)
        shapes[f"g/map/{i}/bias"] = (desc.latent_dim,)
    for i, layer in enumerate(desc.synthesis_layers):
        if layer.kind == "base":
            shapes[f"g/syn/{i}/const"] = (layer.in_width, layer.resolution, layer.resolution)
            # projects the first style vector into the base feature map, the
            # spatial entry point for per-sample variation
            shapes[f"g/syn/{i}/input_weight"] = (
                layer.in_width * layer.resolution * layer.resolution, desc.style_dim
            )
        shapes[f"g/syn/{i}/weight"] = (layer.out_width, layer.in_width, 3, 3)
        shapes[f"g/syn/{i}/bias"] = (layer.out_width,)
        shapes[f"g/syn/{i}/style_weight"] = (layer.out_width, desc.style_dim)
        shapes[f"g/syn/{i}/style_bias"] = (layer.out_width,)
    shapes["g/rgb/0/weight"] = (desc.image_channels, desc.top_width, 1, 1)
    shapes["g/rgb/0/bias"] = (desc.image_channels,)
    return shapes


def discriminator_parameter_shapes(desc: ArchitectureDescriptor) -> dict[str, tuple[int, ...]]:
    """Name -> shape for the discriminator: the synthesis stack mirrored."""
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["d/in/0/weight"] = (desc.top_width, desc.image_channels, 1, 1)
    shapes["d/in/0/bias"] = (desc.top_width,)
    for j, layer in enumerate(reversed(desc.synthesis_layers)):
        shapes[f"d/trunk/{j}/weight"] = (layer.in_width, layer.out_width, 3, 3)
        shapes[f"d/trunk/{j}/bias"] = (layer.in_width,)
    shapes["d/out/0/weight"] = (1, desc.base_width)
    shapes["d/out/0/bias"] = (1,)
    if desc.conditional:
        shapes["d/embed/0/table"] = (desc.num_classes, desc.base_width)
    return shapes


def discriminator_stage_names(desc: ArchitectureDescriptor) -> list[list[str]]:
    """Discriminator trunk stages in input-to-output order (largest spatial
    size first), as groups of tensor names. The score head and projection
    embedding are not stages."""
    stages = [["d/in/0/weight", "d/in/0/bias"]]
    for j in range(len(desc.synthesis_layers)):
        stages.append([f"d/trunk/{j}/weight", f"d/trunk/{j}/bias"])
    return stages


# ---------------------------------------------------------------------------
# ParameterSet
# ---------------------------------------------------------------------------

class ParameterSet:
    """Ordered map from canonical layer names to float32 tensors.

    Entries are treated as immutable: operations that change weights build a
    new ParameterSet. Construction validates dtype and finiteness.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, Tensor], validate: bool = True):
        store: dict[str, Tensor] = {}
        for name, tensor in entries.items():
            if validate:
                if tensor.dtype != torch.float32:
                    raise ShapeError(f"parameter {name!r} must be float32, got {tensor.dtype}")
                if not bool(torch.isfinite(tensor).all()):
                    raise ShapeError(f"parameter {name!r} contains non-finite values")
            store[name] = tensor
        self._entries = store

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def keys(self):
        return self._entries.keys()

    def values(self):
        return self._entries.values()

    def items(self):
        return self._entries.items()

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._entries)

    def signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, tuple(t.shape)) for name, t in self._entries.items())

    def clone(self) -> "ParameterSet":
        return ParameterSet({n: t.clone() for n, t in self._entries.items()}, validate=False)

    def replace(self, **_ignored) -> "ParameterSet":  # pragma: no cover - guard
        raise TypeError("ParameterSet entries are immutable; build a new set instead")

    def with_entries(self, updates: Mapping[str, Tensor]) -> "ParameterSet":
        """New set with the given entries substituted (names must exist)."""
        for name in updates:
            if name not in self._entries:
                raise SignatureMismatchError(f"unknown parameter {name!r}")
        merged = dict(self._entries)
        merged.update(updates)
        return ParameterSet(merged)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        if list(self.keys()) != list(other.keys()):
            return False
        return all(torch.equal(self[n], other[n]) for n in self)

    def __repr__(self) -> str:
        total = sum(t.numel() for t in self.values())
        return f"ParameterSet({len(self)} tensors, {total} parameters)"


def require_matching_signature(a: ParameterSet | Mapping[str, Tensor],
                               b: ParameterSet | Mapping[str, Tensor],
                               context: str = "parameter sets") -> None:
    """Raise SignatureMismatchError listing missing/extra/misshapen names."""
    a_names, b_names = set(a.keys()), set(b.keys())
    missing = sorted(b_names - a_names)
    extra = sorted(a_names - b_names)
    if missing or extra:
        raise SignatureMismatchError(
            f"{context} differ: missing={missing!r} extra={extra!r}"
        )
    bad = [n for n in a.keys() if tuple(a[n].shape) != tuple(b[n].shape)]
    if bad:
        detail = ", ".join(f"{n}: {tuple(a[n].shape)} vs {tuple(b[n].shape)}" for n in bad)
        raise SignatureMismatchError(f"{context} differ in shapes: {detail}")


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Network:
    """One network: a descriptor plus its weights."""

    descriptor: ArchitectureDescriptor
    params: ParameterSet


@dataclass(frozen=True)
class PairMetadata:
    source_tag: str = ""
    training_step: int = 0
    rng_seed: int = 0


@dataclass(frozen=True)
class GanPair:
    """A generator/discriminator pair plus the EMA copy of the generator."""

    generator: Network
    discriminator: Network
    ema_generator_params: ParameterSet
    metadata: PairMetadata = field(default_factory=PairMetadata)

    def __post_init__(self):
        g, d = self.generator.descriptor, self.discriminator.descriptor
        if g.num_classes != d.num_classes:
            raise DescriptorError(
                f"generator/discriminator disagree on num_classes: {g.num_classes} vs {d.num_classes}"
            )
        if g.image_resolution != d.image_resolution:
            raise DescriptorError(
                f"generator/discriminator disagree on image_resolution: "
                f"{g.image_resolution} vs {d.image_resolution}"
            )
        require_matching_signature(
            self.ema_generator_params, self.generator.params, "ema vs generator parameters"
        )

    @property
    def descriptor(self) -> ArchitectureDescriptor:
        return self.generator.descriptor

    @property
    def num_classes(self) -> int:
        return self.generator.descriptor.num_classes

    def ema_generator(self) -> Network:
        return Network(self.generator.descriptor, self.ema_generator_params)

    def with_metadata(self, **changes) -> "GanPair":
        return GanPair(
            self.generator,
            self.discriminator,
            self.ema_generator_params,
            replace(self.metadata, **changes),
        )


@dataclass(frozen=True)
class LatentCode:
    """A latent vector and the class the sample should come from."""

    z: Tensor
    c: int = 0


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _init_tensor(name: str, shape: tuple[int, ...], gen: torch.Generator) -> Tensor:
    role = name.rsplit("/", 1)[1]
    if role in ("bias", "style_bias"):
        return torch.zeros(shape)
    if role in ("table", "const"):
        return torch.randn(shape, generator=gen)
    # weights: scaled normal, std = 1/sqrt(fan_in)
    fan_in = 1
    for d in shape[1:]:
        fan_in *= d
    std = fan_in ** -0.5
    return torch.randn(shape, generator=gen) * std


def _init_params(shapes: Mapping[str, tuple[int, ...]], gen: torch.Generator) -> ParameterSet:
    return ParameterSet({n: _init_tensor(n, s, gen) for n, s in shapes.items()}, validate=False)


def build_models(descriptor: ArchitectureDescriptor, seed: int) -> GanPair:
    """Deterministically initialize a generator/discriminator pair.

    Weights are scaled-normal, biases zero, embedding rows and the synthesis
    constant standard normal, drawn in canonical name order from a generator
    seeded with ``seed``. The EMA copy starts equal to the generator weights.
    """
    gen = torch.Generator().manual_seed(seed)
    g_params = _init_params(generator_parameter_shapes(descriptor), gen)
    d_params = _init_params(discriminator_parameter_shapes(descriptor), gen)
    return GanPair(
        generator=Network(descriptor, g_params),
        discriminator=Network(descriptor, d_params),
        ema_generator_params=g_params.clone(),
        metadata=PairMetadata(training_step=0, rng_seed=seed),
    )


# ---------------------------------------------------------------------------
# Forward evaluation (batched internals)
# ---------------------------------------------------------------------------

def _check_class(desc: ArchitectureDescriptor, c: int) -> None:
    if not (0 <= c < desc.num_classes):
        raise ShapeError(f"class index {c} out of range for a model with {desc.num_classes} classes")


def mapping_forward(desc: ArchitectureDescriptor, params: Mapping[str, Tensor],
                    zs: Tensor, cs: Tensor) -> Tensor:
    """Batched mapping network: (B, latent_dim) x (B,) int64 -> (B, style_dim).

    Leaky-ReLU between layers, none after the last, so depth 1 is affine.
    """
    if desc.conditional:
        embedded = F.embedding(cs, params["g/embed/0/table"])
        h = torch.cat([zs, embedded], dim=1)
    else:
        h = zs
    for i in range(desc.mapping_depth):
        h = F.linear(h, params[f"g/map/{i}/weight"], params[f"g/map/{i}/bias"])
        if i < desc.mapping_depth - 1:
            h = F.leaky_relu(h, LRELU_SLOPE)
    return h


def synthesis_forward(desc: ArchitectureDescriptor, params: Mapping[str, Tensor],
                      styles: Sequence[Tensor]) -> Tensor:
    """Batched synthesis: per-layer style vectors (each (B, style_dim)) -> images.

    The base feature map is a learned constant plus a linear projection of
    the first style vector. Each layer then computes
    ``lrelu(conv(h) * (1 + A_i(w_i)) + bias)`` with a nearest-neighbour 2x
    upsample first on `up` layers; a 1x1 convolution and tanh map the last
    feature map to image channels in (-1, 1).
    """
    layers = desc.synthesis_layers
    if len(styles) != len(layers):
        raise ShapeError(f"expected {len(layers)} style vectors, got {len(styles)}")
    batch = styles[0].shape[0]
    base = layers[0]
    const = params["g/syn/0/const"].unsqueeze(0)
    injected = F.linear(styles[0], params["g/syn/0/input_weight"])
    h = const + injected.reshape(batch, base.in_width, base.resolution, base.resolution)
    for i, layer in enumerate(layers):
        if layer.kind == "up":
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        gain = 1.0 + F.linear(styles[i], params[f"g/syn/{i}/style_weight"],
                              params[f"g/syn/{i}/style_bias"])
        h = F.conv2d(h, params[f"g/syn/{i}/weight"], None, padding=1)
        h = h * gain[:, :, None, None] + params[f"g/syn/{i}/bias"][None, :, None, None]
        h = F.leaky_relu(h, LRELU_SLOPE)
    return torch.tanh(F.conv2d(h, params["g/rgb/0/weight"], params["g/rgb/0/bias"]))


def generator_forward(desc: ArchitectureDescriptor, params: Mapping[str, Tensor],
                      zs: Tensor, cs: Tensor) -> Tensor:
    """Batched latent-to-image path used by training and estimation."""
    w = mapping_forward(desc, params, zs, cs)
    return synthesis_forward(desc, params, [w] * len(desc.synthesis_layers))


def discriminator_forward(desc: ArchitectureDescriptor, params: Mapping[str, Tensor],
                          images: Tensor, cs: Tensor) -> Tensor:
    """Batched image-to-logit path: (B, C, R, R) x (B,) -> (B,) logits."""
    expected = (desc.image_channels, desc.image_resolution, desc.image_resolution)
    if tuple(images.shape[1:]) != expected:
        raise ShapeError(f"discriminator expected images of shape {expected}, got {tuple(images.shape[1:])}")
    h = F.leaky_relu(F.conv2d(images, params["d/in/0/weight"], params["d/in/0/bias"]), LRELU_SLOPE)
    for j, layer in enumerate(reversed(desc.synthesis_layers)):
        h = F.conv2d(h, params[f"d/trunk/{j}/weight"], params[f"d/trunk/{j}/bias"], padding=1)
        h = F.leaky_relu(h, LRELU_SLOPE)
        if layer.kind == "up":
            h = F.avg_pool2d(h, 2)
    phi = h.mean(dim=(2, 3))
    logit = F.linear(phi, params["d/out/0/weight"], params["d/out/0/bias"]).squeeze(1)
    if desc.conditional:
        proj = (F.embedding(cs, params["d/embed/0/table"]) * phi).sum(dim=1)
        logit = logit + proj
    return logit


# ---------------------------------------------------------------------------
# Public single-sample / looped-batch operations
# ---------------------------------------------------------------------------

def map_latent(G: Network, code: LatentCode) -> StyleVector:
    """Style vector for one latent code: ``mapping(concat(z, embed(c)))``."""
    desc = G.descriptor
    _check_class(desc, code.c)
    if tuple(code.z.shape) != (desc.latent_dim,):
        raise ShapeError(f"latent z must have shape ({desc.latent_dim},), got {tuple(code.z.shape)}")
    cs = torch.tensor([code.c], dtype=torch.int64)
    with torch.no_grad():
        return mapping_forward(desc, G.params, code.z.unsqueeze(0), cs).squeeze(0)


def synthesize(G: Network, w: StyleVector) -> Image:
    """Image from one style vector, broadcast to every synthesis layer."""
    desc = G.descriptor
    with torch.no_grad():
        styles = [w.unsqueeze(0)] * len(desc.synthesis_layers)
        return synthesis_forward(desc, G.params, styles).squeeze(0)


def synthesize_styles(G: Network, styles: Sequence[StyleVector]) -> Image:
    """Image from one style vector per synthesis layer (style mixing entry)."""
    desc = G.descriptor
    with torch.no_grad():
        return synthesis_forward(desc, G.params, [s.unsqueeze(0) for s in styles]).squeeze(0)


def generate(G: Network, code: LatentCode) -> Image:
    """Generate one image: ``synthesis(map_latent(G, code))``."""
    return synthesize(G, map_latent(G, code))


def generate_batch(G: Network, zs: Tensor, cs: Tensor) -> Image:
    """Batch generation, defined as the concatenation of single calls."""
    rows = [generate(G, LatentCode(zs[i], int(cs[i]))) for i in range(zs.shape[0])]
    return torch.stack(rows, dim=0)


def discriminate(D: Network, x: Image, c: int) -> Tensor:
    """Scalar logit for one image under condition ``c``.

    Differentiable with respect to both ``x`` and the parameters when they
    carry ``requires_grad``.
    """
    desc = D.descriptor
    _check_class(desc, c)
    cs = torch.tensor([c], dtype=torch.int64)
    return discriminator_forward(desc, D.params, x.unsqueeze(0), cs).squeeze(0)
