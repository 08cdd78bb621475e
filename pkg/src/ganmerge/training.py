"""Adversarial optimization engine shared by every method.

One step is: a discriminator update on a supplier batch (as "real") versus a
freshly generated batch (as "fake") with lazy R1 regularization, then a
non-saturating generator update, then an EMA update of the generator weights.
The whole trajectory is a pure function of (initial pair, config, supplier).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeAlias

import torch
import torch.nn.functional as F
from torch import Tensor

from .data import BatchSupplier
from .errors import GanMergeError, ShapeError, TrainingDivergedError
from .models import (
    ArchitectureDescriptor,
    GanPair,
    Network,
    ParameterSet,
    discriminator_forward,
    generator_forward,
    require_matching_signature,
)

TrainHook: TypeAlias = Callable[[GanPair, dict], Mapping | None]


@dataclass(frozen=True)
class TrainConfig:
    """Every tunable of the optimization loop."""

    total_steps: int
    batch_size: int = 32
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    r1_gamma: float = 1.0
    r1_interval: int = 16
    ema_decay: float = 0.999
    eval_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 0:
            raise GanMergeError(f"total_steps must be non-negative, got {self.total_steps}")
        if self.batch_size < 1:
            raise GanMergeError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_g < 0 or self.lr_d < 0:
            raise GanMergeError("learning rates must be non-negative")
        if self.r1_interval < 1:
            raise GanMergeError(f"r1_interval must be >= 1, got {self.r1_interval}")
        if not (0.0 < self.ema_decay < 1.0):
            raise GanMergeError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.r1_gamma < 0:
            raise GanMergeError(f"r1_gamma must be non-negative, got {self.r1_gamma}")
        if self.eval_interval < 1:
            raise GanMergeError(f"eval_interval must be >= 1, got {self.eval_interval}")


@dataclass
class AdamState:
    """First/second moment per tensor plus the shared step counter."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0

    @staticmethod
    def zeros_like(params: Mapping[str, Tensor]) -> "AdamState":
        return AdamState(
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
        )


@dataclass
class EwcTerm:
    """Quadratic anchor added to both losses: lam * sum(F * (theta - anchor)^2)."""

    anchor_g: dict[str, Tensor]
    anchor_d: dict[str, Tensor]
    fisher_g: dict[str, Tensor]
    fisher_d: dict[str, Tensor]
    lam: float
    apply_to_generator: bool = True
    apply_to_discriminator: bool = True


@dataclass
class TrainState:
    """Mutable optimization state owned by a single trainer."""

    descriptor: ArchitectureDescriptor
    gparams: dict[str, Tensor]  # leaves with requires_grad
    dparams: dict[str, Tensor]
    ema: dict[str, Tensor]
    opt_g: AdamState
    opt_d: AdamState
    rng: torch.Generator
    config: TrainConfig
    step: int = 0
    frozen: frozenset[str] = frozenset()
    ewc: EwcTerm | None = None
    source_tag: str = ""
    base_step: int = 0

    def pair(self) -> GanPair:
        """Immutable snapshot of the current weights."""
        from .models import PairMetadata

        g = ParameterSet({n: t.detach().clone() for n, t in self.gparams.items()}, validate=False)
        d = ParameterSet({n: t.detach().clone() for n, t in self.dparams.items()}, validate=False)
        ema = ParameterSet({n: t.clone() for n, t in self.ema.items()}, validate=False)
        meta = PairMetadata(source_tag=self.source_tag,
                            training_step=self.base_step + self.step,
                            rng_seed=self.config.seed)
        return GanPair(Network(self.descriptor, g), Network(self.descriptor, d), ema, meta)


def init_train_state(pair: GanPair, config: TrainConfig,
                     frozen: Sequence[str] = (), ewc: EwcTerm | None = None) -> TrainState:
    unknown = [n for n in frozen if n not in pair.discriminator.params]
    if unknown:
        raise ShapeError(f"frozen names not in discriminator: {unknown}")
    gparams = {n: t.detach().clone().requires_grad_(True) for n, t in pair.generator.params.items()}
    dparams = {n: t.detach().clone().requires_grad_(True) for n, t in pair.discriminator.params.items()}
    ema = {n: t.detach().clone() for n, t in pair.ema_generator_params.items()}
    return TrainState(
        descriptor=pair.descriptor,
        gparams=gparams,
        dparams=dparams,
        ema=ema,
        opt_g=AdamState.zeros_like(gparams),
        opt_d=AdamState.zeros_like(dparams),
        rng=torch.Generator().manual_seed(config.seed),
        config=config,
        frozen=frozenset(frozen),
        ewc=ewc,
        source_tag=pair.metadata.source_tag,
        base_step=pair.metadata.training_step,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def discriminator_loss(desc: ArchitectureDescriptor, dparams: Mapping[str, Tensor],
                       real_images: Tensor, real_labels: Tensor,
                       fake_images: Tensor, fake_labels: Tensor) -> Tensor:
    """Logistic discriminator loss (no regularization)."""
    logits_real = discriminator_forward(desc, dparams, real_images, real_labels)
    logits_fake = discriminator_forward(desc, dparams, fake_images, fake_labels)
    return F.softplus(logits_fake).mean() + F.softplus(-logits_real).mean()


def generator_loss(desc: ArchitectureDescriptor, gparams: Mapping[str, Tensor],
                   dparams: Mapping[str, Tensor], zs: Tensor, cs: Tensor) -> Tensor:
    """Non-saturating generator loss on fresh latents."""
    fake = generator_forward(desc, gparams, zs, cs)
    logits = discriminator_forward(desc, dparams, fake, cs)
    return F.softplus(-logits).mean()


def r1_penalty(D: Network, real_images: Tensor, labels: Tensor, gamma: float) -> Tensor:
    """(gamma/2) * E[ ||grad_x D(x, c)||^2 ] over the batch.

    The returned scalar stays connected to the graph, so it is differentiable
    with respect to the discriminator parameters.
    """
    x = real_images.detach().requires_grad_(True)
    logits = discriminator_forward(D.descriptor, D.params, x, labels)
    (grads,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    sq = grads.square().sum(dim=(1, 2, 3)).mean()
    return 0.5 * gamma * sq


def ema_update(ema: ParameterSet, current: ParameterSet, decay: float) -> ParameterSet:
    """Elementwise ``decay * ema + (1 - decay) * current``.

    Accumulated in float64 and rounded once to float32, which keeps long
    constant-input recursions within 1e-6 of the closed form.
    """
    if not (0.0 <= decay < 1.0):
        raise GanMergeError(f"decay must lie in [0, 1), got {decay}")
    require_matching_signature(ema, current, "ema vs current parameters")
    out = {}
    for name in ema.keys():
        blended = ema[name].double() * decay + current[name].double() * (1.0 - decay)
        out[name] = blended.float()
    return ParameterSet(out, validate=False)


def _ema_update_inplace(ema: dict[str, Tensor], current: Mapping[str, Tensor], decay: float) -> None:
    for name, acc in ema.items():
        blended = acc.double() * decay + current[name].detach().double() * (1.0 - decay)
        acc.copy_(blended.float())


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def _adam_apply(params: dict[str, Tensor], grads: Mapping[str, Tensor | None],
                opt: AdamState, lr: float, config: TrainConfig,
                skip: frozenset[str] = frozenset()) -> None:
    opt.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** opt.t
    bc2 = 1.0 - b2 ** opt.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if name in skip or g is None:
                continue
            m = opt.m[name]
            v = opt.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.add_((m / bc1) / ((v / bc2).sqrt() + config.adam_eps), alpha=-lr)


def _grads_for(loss: Tensor, params: dict[str, Tensor],
               skip: frozenset[str] = frozenset()) -> dict[str, Tensor | None]:
    names = [n for n in params if n not in skip]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return dict(zip(names, grads))


def _ewc_value(live: Mapping[str, Tensor], anchor: Mapping[str, Tensor],
               fisher: Mapping[str, Tensor], lam: float) -> Tensor:
    total = None
    for name, f in fisher.items():
        term = (f * (live[name] - anchor[name]).square()).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return lam * total


# ---------------------------------------------------------------------------
# The step and the loop
# ---------------------------------------------------------------------------

def adversarial_step(state: TrainState, supplier: BatchSupplier) -> tuple[TrainState, dict]:
    """One D update, one G update, one EMA update; returns (state, metrics)."""
    cfg = state.config
    desc = state.descriptor
    num_classes = desc.num_classes

    real = supplier(cfg.batch_size, state.rng)
    if real.images.shape[0] != cfg.batch_size:
        raise ShapeError(
            f"supplier yielded batch of {real.images.shape[0]}, expected {cfg.batch_size}"
        )
    z_d = torch.randn((cfg.batch_size, desc.latent_dim), generator=state.rng)
    c_d = torch.randint(0, num_classes, (cfg.batch_size,), generator=state.rng)
    with torch.no_grad():
        fake_d = generator_forward(desc, state.gparams, z_d, c_d)

    loss_d = discriminator_loss(desc, state.dparams, real.images, real.labels, fake_d, c_d)
    if not torch.isfinite(loss_d):
        raise TrainingDivergedError(state.step, "loss_D")
    r1_value = 0.0
    if cfg.r1_gamma > 0 and state.step % cfg.r1_interval == 0:
        penalty = r1_penalty(Network(desc, state.dparams), real.images, real.labels, cfg.r1_gamma)
        if not torch.isfinite(penalty):
            raise TrainingDivergedError(state.step, "r1")
        r1_value = float(penalty.detach())
        loss_d = loss_d + penalty * cfg.r1_interval  # lazy regularization
    if state.ewc is not None and state.ewc.apply_to_discriminator:
        loss_d = loss_d + _ewc_value(state.dparams, state.ewc.anchor_d,
                                     state.ewc.fisher_d, state.ewc.lam)
    d_grads = _grads_for(loss_d, state.dparams, state.frozen)
    _adam_apply(state.dparams, d_grads, state.opt_d, cfg.lr_d, cfg, state.frozen)

    z_g = torch.randn((cfg.batch_size, desc.latent_dim), generator=state.rng)
    c_g = torch.randint(0, num_classes, (cfg.batch_size,), generator=state.rng)
    loss_g = generator_loss(desc, state.gparams, state.dparams, z_g, c_g)
    if not torch.isfinite(loss_g):
        raise TrainingDivergedError(state.step, "loss_G")
    if state.ewc is not None and state.ewc.apply_to_generator:
        loss_g = loss_g + _ewc_value(state.gparams, state.ewc.anchor_g,
                                     state.ewc.fisher_g, state.ewc.lam)
    g_grads = _grads_for(loss_g, state.gparams)
    _adam_apply(state.gparams, g_grads, state.opt_g, cfg.lr_g, cfg)

    _ema_update_inplace(state.ema, state.gparams, cfg.ema_decay)

    state.step += 1
    metrics = {
        "step": state.step,
        "loss_d": float(loss_d.detach()),
        "loss_g": float(loss_g.detach()),
        "r1": r1_value,
    }
    return state, metrics


class MetricLogger:
    """Append-only line-delimited JSON metric log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Mapping) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(dict(record), sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        records = []
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


def train(init: GanPair, supplier: BatchSupplier, config: TrainConfig,
          hooks: Sequence[TrainHook] = (), frozen: Sequence[str] = (),
          ewc: EwcTerm | None = None, logger: MetricLogger | None = None) -> GanPair:
    """Run ``config.total_steps`` adversarial steps and return the final pair.

    Hooks run on an immutable snapshot before the first step, at every
    ``eval_interval`` steps, and after the last step; whatever mapping they
    return is merged into the logged metric record.
    """
    state = init_train_state(init, config, frozen=frozen, ewc=ewc)

    def run_hooks(metrics: dict) -> None:
        if not hooks and logger is None:
            return
        snapshot = state.pair()
        for hook in hooks:
            extra = hook(snapshot, metrics)
            if extra:
                metrics.update(extra)
        if logger is not None:
            logger.append(metrics)

    run_hooks({"step": 0, "loss_d": None, "loss_g": None, "r1": 0.0})
    for _ in range(config.total_steps):
        state, metrics = adversarial_step(state, supplier)
        if state.step % config.eval_interval == 0 or state.step == config.total_steps:
            run_hooks(metrics)
    return state.pair()
