"""Two-stage model merging: rooting, then averaging plus fine-tuning.

Stage 1 retrains a copy of the chosen root pair on each other source's
outputs, so every model ends up with the root's exact architecture and a
common weight-space ancestor. Stage 2 averages those aligned weights,
extends the result to one class per source, and fine-tunes it on batches
drawn from the original frozen sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from .conditioning import DEFAULT_EMBED_DIM, make_conditional
from .data import FrozenSource, generator_supplier, pair_as_source
from .errors import GanMergeError, ShapeError
from .models import GanPair, Network, ParameterSet, require_matching_signature
from .training import MetricLogger, TrainConfig, TrainHook, train


@dataclass(frozen=True)
class RootedSet:
    """The root pair plus one retrained copy per remaining source.

    Every member shares the root's descriptor byte-for-byte; ``class_map``
    maps member position (root first) to its union class id.
    """

    root: GanPair
    rooted: tuple[GanPair, ...]
    class_map: tuple[int, ...]

    def __post_init__(self):
        reference = self.root.descriptor.serialize()
        for i, pair in enumerate(self.rooted):
            if pair.descriptor.serialize() != reference:
                raise GanMergeError(f"rooted model {i} does not share the root architecture")
        n = 1 + len(self.rooted)
        if sorted(self.class_map) != list(range(n)):
            raise GanMergeError(f"class_map must be a bijection onto [0, {n}), got {self.class_map}")

    def members(self) -> list[GanPair]:
        return [self.root, *self.rooted]


def root_model(root: GanPair, target: FrozenSource, config: TrainConfig,
               hooks: Sequence[TrainHook] = (), logger: MetricLogger | None = None) -> GanPair:
    """Retrain a copy of ``root`` on ``target``'s outputs as a 1-class problem.

    The target is only sampled, so its architecture may differ from the
    root's; the returned pair keeps the root's descriptor unchanged. The
    implicit task is forgetting the root's own domain.
    """
    root_res = root.descriptor.image_resolution
    target_res = target.net.descriptor.image_resolution
    if root_res != target_res:
        raise ShapeError(f"root resolution {root_res} differs from target resolution {target_res}")
    supplier = generator_supplier([FrozenSource(target.net, 0)])
    trained = train(root.with_metadata(source_tag=f"rooted<-{root.metadata.source_tag}"),
                    supplier, config, hooks=hooks, logger=logger)
    return trained


def weight_distance(a: ParameterSet | Mapping[str, torch.Tensor],
                    b: ParameterSet | Mapping[str, torch.Tensor]) -> float:
    """Per-layer L2 norms of parameter differences, averaged over layers."""
    require_matching_signature(a, b, "weight_distance operands")
    names = list(a.keys())
    total = 0.0
    for name in names:
        total += float(torch.linalg.vector_norm(
            a[name].double() - b[name].double()
        ))
    return total / len(names)


def pair_weight_distance(a: GanPair, b: GanPair, component: str = "generator") -> float:
    if component == "generator":
        return weight_distance(a.generator.params, b.generator.params)
    if component == "discriminator":
        return weight_distance(a.discriminator.params, b.discriminator.params)
    raise GanMergeError(f"unknown component {component!r}")


def average_parameters(sets: Sequence[ParameterSet | Mapping[str, torch.Tensor]]) -> ParameterSet:
    """Elementwise arithmetic mean of matching parameter sets.

    Summation runs in float64 over elementwise-sorted summands, which makes
    the result bit-exactly independent of the input order.
    """
    if not sets:
        raise GanMergeError("average_parameters needs at least one set")
    first = sets[0]
    for other in sets[1:]:
        require_matching_signature(first, other, "average_parameters inputs")
    out: dict[str, torch.Tensor] = {}
    for name in sorted(first.keys()):
        stacked = torch.stack([s[name].double() for s in sets], dim=0)
        stacked, _ = torch.sort(stacked, dim=0)
        out[name] = (stacked.sum(dim=0) / len(sets)).float()
    # restore canonical entry order
    ordered = {name: out[name] for name in first.keys()}
    return ParameterSet(ordered, validate=False)


def average_pairs(members: Sequence[GanPair]) -> GanPair:
    """Average generator, discriminator, and EMA weights across pairs."""
    desc_ref = members[0].descriptor.serialize()
    for i, m in enumerate(members[1:], start=1):
        if m.descriptor.serialize() != desc_ref:
            raise GanMergeError(f"pair {i} does not share the first pair's architecture")
    g = average_parameters([m.generator.params for m in members])
    d = average_parameters([m.discriminator.params for m in members])
    ema = average_parameters([m.ema_generator_params for m in members])
    base = members[0]
    return GanPair(
        Network(base.descriptor, g),
        Network(base.descriptor, d),
        ema,
        base.metadata,
    )


def merge(rooted: RootedSet, sources: Sequence[FrozenSource], config: TrainConfig,
          seed_conditioning: int | None = None, hooks: Sequence[TrainHook] = (),
          logger: MetricLogger | None = None) -> GanPair:
    """Stage 2: average the rooted members, extend to N classes, fine-tune.

    With ``total_steps == 0`` the result is exactly the class-extended
    average model.
    """
    n = len(rooted.members())
    if len(sources) != n:
        raise GanMergeError(f"expected {n} sources for {n} rooted members, got {len(sources)}")
    ids = sorted(s.class_id for s in sources)
    if ids != list(range(n)):
        raise GanMergeError(f"source class ids must cover [0, {n}), got {ids}")
    averaged = average_pairs(rooted.members())
    seed = config.seed if seed_conditioning is None else seed_conditioning
    conditional = make_conditional(averaged, n, seed)
    conditional = conditional.with_metadata(source_tag="merged")
    supplier = generator_supplier(list(sources))
    return train(conditional, supplier, config, hooks=hooks, logger=logger)


@dataclass
class CocktailDiagnostics:
    """Distances and logs gathered while merging."""

    # distance from the root to each rooted member's generator weights
    root_to_rooted: dict[int, float] = field(default_factory=dict)
    # distance from the root to each source generator, where signatures align
    root_to_source: dict[int, float | None] = field(default_factory=dict)
    # full pairwise matrix over [root] + rooted members
    pairwise: list[list[float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "root_to_rooted": {str(k): v for k, v in self.root_to_rooted.items()},
            "root_to_source": {str(k): v for k, v in self.root_to_source.items()},
            "pairwise": self.pairwise,
        }


def gan_cocktail(sources: Sequence[GanPair], root_index: int, rooting_config: TrainConfig,
                 merge_config: TrainConfig, use_ema_sources: bool = True,
                 hooks: Sequence[TrainHook] = (), logger: MetricLogger | None = None,
                 ) -> tuple[GanPair, CocktailDiagnostics]:
    """Full two-stage pipeline; returns the union pair and diagnostics.

    The output architecture is the chosen root's. Source i provides class i
    in the union model.
    """
    if not (0 <= root_index < len(sources)):
        raise GanMergeError(f"root_index {root_index} out of range for {len(sources)} sources")
    root = sources[root_index]
    frozen = [pair_as_source(p, i, use_ema=use_ema_sources) for i, p in enumerate(sources)]

    rooted_pairs: list[GanPair] = []
    class_map = [root_index]
    for i, source in enumerate(sources):
        if i == root_index:
            continue
        rooted_pairs.append(root_model(root, frozen[i], rooting_config))
        class_map.append(i)
    rooted = RootedSet(root=root, rooted=tuple(rooted_pairs), class_map=tuple(class_map))

    diagnostics = CocktailDiagnostics()
    members = rooted.members()
    diagnostics.pairwise = [
        [pair_weight_distance(a, b) for b in members] for a in members
    ]
    for position, pair in zip(class_map[1:], rooted_pairs):
        diagnostics.root_to_rooted[position] = pair_weight_distance(root, pair)
    root_sig = root.generator.params.signature()
    for i, source in enumerate(sources):
        if i == root_index:
            continue
        if source.generator.params.signature() == root_sig:
            diagnostics.root_to_source[i] = pair_weight_distance(root, source)
        else:
            diagnostics.root_to_source[i] = None

    # the merge supplier orders sources by class id: source i is class i
    union = merge(rooted, frozen, merge_config, hooks=hooks, logger=logger)
    return union, diagnostics
