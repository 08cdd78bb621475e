"""Convert unconditional models to conditional ones and extend class capacity.

Both operations preserve existing behavior exactly: tensors that already
exist are copied bit-for-bit, and generator outputs for previously known
classes stay bit-identical.
"""

from __future__ import annotations

from dataclasses import replace

import torch

from .errors import DescriptorError
from .models import (
    ArchitectureDescriptor,
    GanPair,
    Network,
    ParameterSet,
    discriminator_parameter_shapes,
    generator_parameter_shapes,
)

DEFAULT_EMBED_DIM = 8

# fresh conditioning tensors start near zero so the conditioned model's
# initial outputs stay close to the unconditional source it wraps
CONDITIONING_INIT_SCALE = 0.01


def conditional_descriptor(desc: ArchitectureDescriptor, num_classes: int,
                           embed_dim: int = DEFAULT_EMBED_DIM) -> ArchitectureDescriptor:
    """The descriptor of ``desc`` after conditionalization."""
    return replace(desc, num_classes=num_classes, embed_dim=embed_dim)


def conditionalize(pair: GanPair, num_classes: int, seed: int,
                   embed_dim: int = DEFAULT_EMBED_DIM) -> GanPair:
    """Add class conditioning to an unconditional pair.

    The generator gains an embedding table and its first mapping layer is
    widened to accept ``concat(z, embed(c))``, with the original columns
    copied unchanged; the discriminator gains a projection embedding. All
    pre-existing tensors are copied bit-exactly and new tensors are drawn
    deterministically from ``seed``. The live and EMA generator copies share
    the same new tensors so later EMA updates blend like with like.
    """
    desc = pair.descriptor
    if desc.conditional:
        raise DescriptorError(
            f"pair is already conditional ({desc.num_classes} classes); use extend_classes"
        )
    if num_classes < 1:
        raise DescriptorError(f"num_classes must be positive, got {num_classes}")
    if embed_dim < 1:
        raise DescriptorError(f"embed_dim must be positive, got {embed_dim}")
    new_desc = conditional_descriptor(desc, num_classes, embed_dim)

    gen = torch.Generator().manual_seed(seed)
    scale = CONDITIONING_INIT_SCALE
    g_table = torch.randn((num_classes, embed_dim), generator=gen) * scale
    widened_in = desc.latent_dim + embed_dim
    extra_cols = torch.randn((desc.latent_dim, embed_dim), generator=gen) * (widened_in ** -0.5) * scale
    d_table = torch.randn((num_classes, new_desc.base_width), generator=gen) * scale

    def build_generator_params(old: ParameterSet) -> ParameterSet:
        entries: dict[str, torch.Tensor] = {}
        for name in generator_parameter_shapes(new_desc):
            if name == "g/embed/0/table":
                entries[name] = g_table.clone()
            elif name == "g/map/0/weight":
                entries[name] = torch.cat([old[name], extra_cols], dim=1)
            else:
                entries[name] = old[name].clone()
        return ParameterSet(entries, validate=False)

    d_entries: dict[str, torch.Tensor] = {}
    for name in discriminator_parameter_shapes(new_desc):
        if name == "d/embed/0/table":
            d_entries[name] = d_table.clone()
        else:
            d_entries[name] = pair.discriminator.params[name].clone()

    return GanPair(
        generator=Network(new_desc, build_generator_params(pair.generator.params)),
        discriminator=Network(new_desc, ParameterSet(d_entries, validate=False)),
        ema_generator_params=build_generator_params(pair.ema_generator_params),
        metadata=pair.metadata,
    )


def extend_classes(pair: GanPair, new_num_classes: int, seed: int) -> GanPair:
    """Grow the embedding tables to ``new_num_classes`` rows.

    Old rows are kept byte-identical and every other tensor is unchanged, so
    generator outputs for all previously known classes are bit-identical.
    """
    desc = pair.descriptor
    if not desc.conditional:
        raise DescriptorError("pair is unconditional; call conditionalize first")
    if new_num_classes <= desc.num_classes:
        raise DescriptorError(
            f"new_num_classes must exceed current {desc.num_classes}, got {new_num_classes}"
        )
    new_desc = replace(desc, num_classes=new_num_classes)
    gen = torch.Generator().manual_seed(seed)
    extra = new_num_classes - desc.num_classes

    def grown(params: ParameterSet, table_name: str) -> ParameterSet:
        table = params[table_name]
        new_rows = torch.randn((extra, table.shape[1]), generator=gen)
        entries = {n: t.clone() for n, t in params.items()}
        entries[table_name] = torch.cat([table, new_rows], dim=0)
        return ParameterSet(entries, validate=False)

    g_params = grown(pair.generator.params, "g/embed/0/table")
    ema_rows = g_params["g/embed/0/table"][desc.num_classes:]
    ema_entries = {n: t.clone() for n, t in pair.ema_generator_params.items()}
    ema_entries["g/embed/0/table"] = torch.cat(
        [pair.ema_generator_params["g/embed/0/table"], ema_rows.clone()], dim=0
    )
    d_params = grown(pair.discriminator.params, "d/embed/0/table")
    return GanPair(
        generator=Network(new_desc, g_params),
        discriminator=Network(new_desc, d_params),
        ema_generator_params=ParameterSet(ema_entries, validate=False),
        metadata=pair.metadata,
    )


def make_conditional(pair: GanPair, num_classes: int, seed: int,
                     embed_dim: int = DEFAULT_EMBED_DIM) -> GanPair:
    """Bring any pair to ``num_classes`` conditional classes.

    Unconditional pairs are conditionalized; conditional pairs with fewer
    classes are extended; pairs already at the requested count are returned
    unchanged.
    """
    desc = pair.descriptor
    if not desc.conditional:
        return conditionalize(pair, num_classes, seed, embed_dim)
    if desc.num_classes == num_classes:
        return pair
    return extend_classes(pair, num_classes, seed)
