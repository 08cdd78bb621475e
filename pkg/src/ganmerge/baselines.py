"""The four comparison methods: from-scratch, transfer, EWC, and Freeze-D.

All of them train a conditional union model on batches drawn from the frozen
source generators; they differ only in initialization and in extra loss terms
or frozen tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.func import grad, vmap

from .conditioning import DEFAULT_EMBED_DIM, conditional_descriptor, make_conditional
from .data import BatchSupplier, FrozenSource, generator_supplier, pair_as_source
from .errors import GanMergeError, ShapeError, TrainingDivergedError
from .models import (
    GanPair,
    ParameterSet,
    build_models,
    discriminator_forward,
    discriminator_stage_names,
    generator_forward,
    require_matching_signature,
)
from .training import EwcTerm, MetricLogger, TrainConfig, TrainHook, train

FISHER_CHUNK = 256  # fixed accumulation chunk; part of the estimator definition

BASELINE_KINDS = ("scratch", "transfer", "ewc", "freeze_d")


@dataclass(frozen=True)
class FisherMap:
    """Per-parameter empirical Fisher information (all entries >= 0)."""

    entries: dict[str, Tensor]
    sample_count: int

    def __post_init__(self):
        for name, t in self.entries.items():
            if bool((t < 0).any()):
                raise GanMergeError(f"Fisher entry {name!r} has negative values")


@dataclass(frozen=True)
class BaselineMethod:
    """Which comparison method to run and its knobs."""

    kind: str
    source_index: int = 0
    ewc_lambda: float = 0.0
    freeze_stages: int = 0
    fisher_samples: int = 1024
    ewc_on_generator: bool = True
    ewc_on_discriminator: bool = True

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise GanMergeError(f"unknown baseline kind {self.kind!r}; known: {BASELINE_KINDS}")
        if self.source_index < 0:
            raise GanMergeError("source_index must be non-negative")
        if self.ewc_lambda < 0:
            raise GanMergeError("ewc_lambda must be non-negative")
        if self.freeze_stages < 0:
            raise GanMergeError("freeze_stages must be non-negative")


def scratch(**kw) -> BaselineMethod:
    return BaselineMethod("scratch", **kw)


def transfer(source_index: int, **kw) -> BaselineMethod:
    return BaselineMethod("transfer", source_index=source_index, **kw)


def ewc(source_index: int, ewc_lambda: float, **kw) -> BaselineMethod:
    return BaselineMethod("ewc", source_index=source_index, ewc_lambda=ewc_lambda, **kw)


def freeze_d(source_index: int, freeze_stages: int, **kw) -> BaselineMethod:
    return BaselineMethod("freeze_d", source_index=source_index, freeze_stages=freeze_stages, **kw)


# ---------------------------------------------------------------------------
# EWC penalty and Fisher estimation
# ---------------------------------------------------------------------------

def ewc_penalty(theta: Mapping[str, Tensor], theta_source: Mapping[str, Tensor],
                fisher: FisherMap, lam: float) -> Tensor:
    """``lam * sum(F * (theta - theta_source)^2)`` over all entries.

    Differentiable when ``theta`` tensors carry gradients. The squared
    difference keeps the penalty non-negative and zero exactly when theta
    matches the anchor on the support of F.
    """
    require_matching_signature(theta, theta_source, "theta vs anchor")
    require_matching_signature(theta, fisher.entries, "theta vs fisher")
    total = None
    for name, f in fisher.entries.items():
        term = (f * (theta[name] - theta_source[name]).square()).sum()
        total = term if total is None else total + term
    assert total is not None
    return lam * total


def _fisher_loss_fn(pair: GanPair, loss_scale: float):
    desc = pair.descriptor

    def loss_fn(gparams: dict, dparams: dict, z: Tensor, c: Tensor) -> Tensor:
        image = generator_forward(desc, gparams, z.unsqueeze(0), c.unsqueeze(0))
        logit = discriminator_forward(desc, dparams, image, c.unsqueeze(0)).squeeze(0)
        # binary cross-entropy against the "real" target
        return F.softplus(-logit) * loss_scale

    return loss_fn


def estimate_fisher(pair: GanPair, n_samples: int, rng: torch.Generator,
                    loss_scale: float = 1.0) -> tuple[FisherMap, FisherMap]:
    """Empirical Fisher for generator and discriminator parameters.

    For each sample: draw z ~ N(0, I) and a uniform class, feed the generated
    image to the discriminator, take the binary cross-entropy toward the real
    target, and accumulate squared per-parameter gradients; the result is the
    per-parameter mean. Per-sample gradients are vectorized in fixed-size
    chunks so the accumulation order does not depend on the caller.
    """
    if n_samples < 1:
        raise GanMergeError(f"n_samples must be >= 1, got {n_samples}")
    desc = pair.descriptor
    gparams = {n: t.detach() for n, t in pair.generator.params.items()}
    dparams = {n: t.detach() for n, t in pair.discriminator.params.items()}
    loss_fn = _fisher_loss_fn(pair, loss_scale)
    per_sample = vmap(grad(loss_fn, argnums=(0, 1)), in_dims=(None, None, 0, 0))

    acc_g = {n: torch.zeros_like(t, dtype=torch.float64) for n, t in gparams.items()}
    acc_d = {n: torch.zeros_like(t, dtype=torch.float64) for n, t in dparams.items()}
    done = 0
    while done < n_samples:
        take = min(FISHER_CHUNK, n_samples - done)
        zs = torch.randn((take, desc.latent_dim), generator=rng)
        cs = torch.randint(0, desc.num_classes, (take,), generator=rng)
        g_grads, d_grads = per_sample(gparams, dparams, zs, cs)
        for name, g in g_grads.items():
            if not bool(torch.isfinite(g).all()):
                raise TrainingDivergedError(done, f"fisher gradient for {name}")
            acc_g[name] += g.double().square().sum(dim=0)
        for name, g in d_grads.items():
            if not bool(torch.isfinite(g).all()):
                raise TrainingDivergedError(done, f"fisher gradient for {name}")
            acc_d[name] += g.double().square().sum(dim=0)
        done += take
    fisher_g = {n: (a / n_samples).float() for n, a in acc_g.items()}
    fisher_d = {n: (a / n_samples).float() for n, a in acc_d.items()}
    return FisherMap(fisher_g, n_samples), FisherMap(fisher_d, n_samples)


# ---------------------------------------------------------------------------
# Running a baseline
# ---------------------------------------------------------------------------

def _check_sources(sources: Sequence[GanPair]) -> None:
    if not sources:
        raise ShapeError("need at least one source pair")
    res = sources[0].descriptor.image_resolution
    for i, s in enumerate(sources[1:], start=1):
        if s.descriptor.image_resolution != res:
            raise ShapeError(
                f"source {i} resolution {s.descriptor.image_resolution} differs from "
                f"source 0 resolution {res}"
            )


def baseline_init(method: BaselineMethod, sources: Sequence[GanPair], seed: int,
                  embed_dim: int = DEFAULT_EMBED_DIM) -> GanPair:
    """The initialization each method starts training from.

    ``scratch`` builds a fresh conditional pair on source 0's topology; the
    transfer-style methods conditionalize/extend the chosen source, so its
    architecture becomes the output architecture.
    """
    _check_sources(sources)
    n = len(sources)
    if method.kind == "scratch":
        base = sources[0].descriptor
        desc = base if base.conditional and base.num_classes == n else conditional_descriptor(
            base, n, embed_dim if not base.conditional else base.embed_dim
        )
        return build_models(desc, seed)
    if method.source_index >= n:
        raise GanMergeError(f"source_index {method.source_index} out of range for {n} sources")
    return make_conditional(sources[method.source_index], n, seed, embed_dim)


def frozen_names_for(pair: GanPair, k_stages: int) -> list[str]:
    """Tensor names of the ``k_stages`` highest-resolution discriminator stages."""
    stages = discriminator_stage_names(pair.descriptor)
    if k_stages > len(stages):
        raise GanMergeError(f"freeze_stages {k_stages} exceeds {len(stages)} trunk stages")
    names: list[str] = []
    for group in stages[:k_stages]:
        names.extend(group)
    return names


def run_baseline(method: BaselineMethod, sources: Sequence[GanPair], config: TrainConfig,
                 supplier: BatchSupplier | None = None, seed_init: int | None = None,
                 hooks: Sequence[TrainHook] = (), logger: MetricLogger | None = None,
                 use_ema_sources: bool = True) -> GanPair:
    """Train the union model with the given comparison method.

    Training data comes from the frozen sources (class i = source i) unless
    an explicit supplier is given, which is how real-data upper bounds reuse
    the same loop.
    """
    init_seed = config.seed if seed_init is None else seed_init
    init = baseline_init(method, sources, init_seed)
    if supplier is None:
        frozen_sources = [pair_as_source(p, i, use_ema=use_ema_sources)
                          for i, p in enumerate(sources)]
        supplier = generator_supplier(frozen_sources)

    frozen: Sequence[str] = ()
    ewc_term: EwcTerm | None = None
    if method.kind == "freeze_d":
        frozen = frozen_names_for(init, method.freeze_stages)
    elif method.kind == "ewc":
        fisher_rng = torch.Generator().manual_seed(init_seed + 1)
        fisher_g, fisher_d = estimate_fisher(init, method.fisher_samples, fisher_rng)
        ewc_term = EwcTerm(
            anchor_g={n: t.clone() for n, t in init.generator.params.items()},
            anchor_d={n: t.clone() for n, t in init.discriminator.params.items()},
            fisher_g=fisher_g.entries,
            fisher_d=fisher_d.entries,
            lam=method.ewc_lambda,
            apply_to_generator=method.ewc_on_generator,
            apply_to_discriminator=method.ewc_on_discriminator,
        )
    tag = f"{method.kind}" if method.kind == "scratch" else f"{method.kind}({method.source_index})"
    init = init.with_metadata(source_tag=tag)
    return train(init, supplier, config, hooks=hooks, frozen=frozen, ewc=ewc_term, logger=logger)
