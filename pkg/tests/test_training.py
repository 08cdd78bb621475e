"""Optimization engine: losses, R1, EMA, Adam loop, determinism, freezing."""

import pytest
import torch

from helpers import smooth_pair, tiny_descriptor

from ganmerge.data import LabeledBatch
from ganmerge.errors import GanMergeError, ShapeError, TrainingDivergedError
from ganmerge.models import Network, ParameterSet, build_models
from ganmerge.training import (
    TrainConfig,
    adversarial_step,
    discriminator_loss,
    ema_update,
    generator_loss,
    init_train_state,
    r1_penalty,
    train,
)
from ganmerge.checkpoint import save_checkpoint


def constant_supplier(images, labels):
    batch = LabeledBatch(images=images, labels=labels)
    return lambda batch_size, rng: batch


def random_supplier(resolution=4, channels=1, num_classes=2):
    def supply(batch_size, rng):
        images = torch.randn((batch_size, channels, resolution, resolution),
                             generator=rng).clamp(-1, 1)
        labels = torch.randint(0, num_classes, (batch_size,), generator=rng)
        return LabeledBatch(images=images, labels=labels)

    return supply


# ---------------------------------------------------------------------------
# R1 penalty
# ---------------------------------------------------------------------------

def linear_regime_discriminator():
    """Hand-built D whose leaky-ReLUs stay in their linear branch on [-1, 1].

    d/in copies x through 4 channels with gains alpha_j and bias 1; the trunk
    conv keeps only center taps (gains gamma on channels 0 and 1) with bias
    keeping pre-activations positive. Then
        logit = A * mean(x) + const,  A = sum_k psi_k * gamma_k * alpha_k
    so grad_x logit = A / R^2 per pixel and ||grad||^2 = A^2 / R^2.
    """
    desc = tiny_descriptor(num_classes=1, embed_dim=0)
    pair = build_models(desc, 0)
    alpha = torch.tensor([0.2, 0.4, 0.0, 0.1])
    in_w = alpha.reshape(4, 1, 1, 1).clone()
    in_b = torch.ones(4)
    trunk_w = torch.zeros(4, 4, 3, 3)
    gamma = torch.tensor([1.0, 2.0, 0.0, 0.0])
    trunk_w[0, 0, 1, 1] = gamma[0]
    trunk_w[1, 1, 1, 1] = gamma[1]
    trunk_b = torch.tensor([0.0, 0.0, 3.0, 1.0])
    psi = torch.tensor([[1.0, -0.5, 0.25, 2.0]])
    params = pair.discriminator.params.with_entries({
        "d/in/0/weight": in_w, "d/in/0/bias": in_b,
        "d/trunk/0/weight": trunk_w, "d/trunk/0/bias": trunk_b,
        "d/out/0/weight": psi, "d/out/0/bias": torch.tensor([0.0]),
    })
    coefficient = float((psi.squeeze(0) * gamma * alpha).sum())
    return Network(desc, params), coefficient


def test_r1_closed_form_linear_discriminator():
    net, a = linear_regime_discriminator()
    images = torch.rand(5, 1, 4, 4) * 0.5  # stays in the transparent regime
    labels = torch.zeros(5, dtype=torch.int64)
    for gamma in (1.0, 2.0):
        expected = 0.5 * gamma * a ** 2 / 16  # ||grad||^2 = A^2 / R^2, R^2 = 16
        penalty = r1_penalty(net, images, labels, gamma)
        assert float(penalty.detach()) == pytest.approx(expected, rel=1e-5)
    # doubling gamma doubles the penalty
    p1 = float(r1_penalty(net, images, labels, 1.0).detach())
    p2 = float(r1_penalty(net, images, labels, 2.0).detach())
    assert p2 == pytest.approx(2 * p1, rel=1e-6)


def test_r1_zero_for_input_independent_discriminator():
    desc = tiny_descriptor()
    pair = build_models(desc, 3)
    params = pair.discriminator.params.with_entries({
        "d/in/0/weight": torch.zeros(4, 1, 1, 1),
    })
    net = Network(desc, params)
    images = torch.randn(3, 1, 4, 4)
    labels = torch.zeros(3, dtype=torch.int64)
    assert float(r1_penalty(net, images, labels, 1.0).detach()) == 0.0


def test_r1_differentiable_wrt_parameters():
    pair = build_models(tiny_descriptor(), 5)
    params = {n: t.clone().requires_grad_(True) for n, t in pair.discriminator.params.items()}
    net = Network(pair.descriptor, params)
    images = torch.randn(4, 1, 4, 4, generator=torch.Generator().manual_seed(0))
    labels = torch.randint(0, 2, (4,), generator=torch.Generator().manual_seed(1))
    penalty = r1_penalty(net, images, labels, 1.0)
    grads = torch.autograd.grad(penalty, list(params.values()), allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def param_set(*values):
    return ParameterSet({"w": torch.tensor(list(values), dtype=torch.float32)})


def test_ema_fixed_point_and_decay_zero():
    theta = param_set(1.5, -2.0)
    assert ema_update(theta, theta, 0.7) == theta
    current = param_set(3.0, 4.0)
    assert ema_update(theta, current, 0.0) == current


def test_ema_geometric_recursion_n5():
    # closed form ema_n = theta* + decay^n (ema_0 - theta*), checked at n=5
    decay = 0.8
    ema = param_set(2.0)
    target = param_set(10.0)
    for _ in range(5):
        ema = ema_update(ema, target, decay)
    expected = 10.0 + decay ** 5 * (2.0 - 10.0)
    assert float(ema["w"][0]) == pytest.approx(expected, abs=1e-6)


def test_ema_closed_form_100_steps_within_1e6():
    decay = 0.9
    start = torch.tensor([0.25, -1.0, 3.0], dtype=torch.float32)
    target = torch.tensor([1.0, 2.0, -0.5], dtype=torch.float32)
    ema = ParameterSet({"w": start.clone()})
    current = ParameterSet({"w": target.clone()})
    for _ in range(100):
        ema = ema_update(ema, current, decay)
    expected = target.double() + decay ** 100 * (start.double() - target.double())
    assert torch.allclose(ema["w"].double(), expected, atol=1e-6)


def test_ema_signature_mismatch_lists_names():
    from ganmerge.errors import SignatureMismatchError

    a = ParameterSet({"w": torch.zeros(2)})
    b = ParameterSet({"v": torch.zeros(2)})
    with pytest.raises(SignatureMismatchError, match="missing=\\['v'\\] extra=\\['w'\\]"):
        ema_update(a, b, 0.5)


# ---------------------------------------------------------------------------
# adversarial_step
# ---------------------------------------------------------------------------

def test_step_lr_zero_leaves_parameters_unchanged():
    pair = build_models(tiny_descriptor(), 7)
    config = TrainConfig(total_steps=1, batch_size=4, lr_g=0.0, lr_d=0.0, seed=1)
    state = init_train_state(pair, config)
    state, metrics = adversarial_step(state, random_supplier())
    out = state.pair()
    assert out.generator.params == pair.generator.params
    assert out.discriminator.params == pair.discriminator.params
    assert metrics["step"] == 1


def test_step_increments_by_one():
    pair = build_models(tiny_descriptor(), 7)
    config = TrainConfig(total_steps=3, batch_size=4, seed=1)
    state = init_train_state(pair, config)
    for expected in (1, 2, 3):
        state, metrics = adversarial_step(state, random_supplier())
        assert metrics["step"] == expected


def test_single_step_descends_d_loss_on_fixed_batch():
    # descent property of one update at a small enough learning rate,
    # re-evaluating the same real/fake batches after the step
    pair = build_models(tiny_descriptor(), 9)
    gen = torch.Generator().manual_seed(4)
    real = torch.randn(8, 1, 4, 4, generator=gen).clamp(-1, 1)
    real_labels = torch.randint(0, 2, (8,), generator=gen)
    fake = torch.randn(8, 1, 4, 4, generator=gen).clamp(-1, 1)
    fake_labels = torch.randint(0, 2, (8,), generator=gen)

    config = TrainConfig(total_steps=1, batch_size=8, lr_d=1e-4, lr_g=0.0,
                         r1_gamma=0.0, seed=2)
    state = init_train_state(pair, config)
    desc = pair.descriptor

    before = float(discriminator_loss(desc, {n: t.detach() for n, t in state.dparams.items()},
                                      real, real_labels, fake, fake_labels))
    loss = discriminator_loss(desc, state.dparams, real, real_labels, fake, fake_labels)
    grads = torch.autograd.grad(loss, list(state.dparams.values()))
    from ganmerge.training import _adam_apply

    _adam_apply(state.dparams, dict(zip(state.dparams.keys(), grads)), state.opt_d,
                config.lr_d, config)
    after = float(discriminator_loss(desc, {n: t.detach() for n, t in state.dparams.items()},
                                     real, real_labels, fake, fake_labels))
    assert after < before


def test_supplier_batch_size_mismatch_rejected():
    pair = build_models(tiny_descriptor(), 7)
    config = TrainConfig(total_steps=1, batch_size=4, seed=1)
    state = init_train_state(pair, config)
    bad = constant_supplier(torch.zeros(2, 1, 4, 4), torch.zeros(2, dtype=torch.int64))
    with pytest.raises(ShapeError, match="batch of 2, expected 4"):
        adversarial_step(state, bad)


def test_nonfinite_loss_aborts_with_step_and_term():
    pair = build_models(tiny_descriptor(), 7)
    config = TrainConfig(total_steps=1, batch_size=4, seed=1)
    state = init_train_state(pair, config)
    with torch.no_grad():
        state.dparams["d/out/0/bias"].fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="'loss_D' at step 0"):
        adversarial_step(state, random_supplier())


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------

def test_train_zero_steps_returns_init():
    pair = build_models(tiny_descriptor(), 15)
    config = TrainConfig(total_steps=0, batch_size=4, seed=3)
    out = train(pair, random_supplier(), config)
    assert out.generator.params == pair.generator.params
    assert out.discriminator.params == pair.discriminator.params
    assert out.ema_generator_params == pair.ema_generator_params


def test_train_end_to_end_determinism(tmp_path):
    pair = build_models(tiny_descriptor(), 15)
    config = TrainConfig(total_steps=12, batch_size=4, seed=3, r1_interval=4)
    a = train(pair, random_supplier(), config)
    b = train(pair, random_supplier(), config)
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_frozen_tensors_bit_identical_after_training():
    pair = build_models(tiny_descriptor(), 15)
    frozen = ("d/in/0/weight", "d/in/0/bias")
    config = TrainConfig(total_steps=25, batch_size=4, seed=5)
    out = train(pair, random_supplier(), config, frozen=frozen)
    for name in frozen:
        assert torch.equal(out.discriminator.params[name], pair.discriminator.params[name])
    changed = [n for n in out.discriminator.params
               if n not in frozen
               and not torch.equal(out.discriminator.params[n], pair.discriminator.params[n])]
    assert changed


def test_train_hooks_receive_snapshots_at_interval():
    pair = build_models(tiny_descriptor(), 15)
    config = TrainConfig(total_steps=10, batch_size=4, seed=3, eval_interval=5)
    seen = []

    def hook(snapshot, metrics):
        seen.append((metrics["step"], snapshot.metadata.training_step))
        return {"marker": metrics["step"]}

    train(pair, random_supplier(), config, hooks=(hook,))
    assert [s for s, _ in seen] == [0, 5, 10]


def test_metadata_training_step_accumulates():
    pair = build_models(tiny_descriptor(), 15)
    config = TrainConfig(total_steps=4, batch_size=4, seed=3)
    once = train(pair, random_supplier(), config)
    assert once.metadata.training_step == 4
    twice = train(once, random_supplier(), config)
    assert twice.metadata.training_step == 8


def test_train_config_validation():
    with pytest.raises(GanMergeError, match="ema_decay"):
        TrainConfig(total_steps=1, ema_decay=1.0)
    with pytest.raises(GanMergeError, match="r1_interval"):
        TrainConfig(total_steps=1, r1_interval=0)


# ---------------------------------------------------------------------------
# Gradient checks (losses and R1) against central finite differences
# ---------------------------------------------------------------------------

def central_difference_check(value_fn, params, analytic, probes=4, eps=1e-3, rel=1e-3):
    """Compare d value_fn / d params[name] against (f(x+e) - f(x-e)) / 2e."""
    for name, p in params.items():
        grad = analytic.get(name)
        if grad is None:
            continue
        flat = p.detach().clone().reshape(-1)
        step = max(1, flat.numel() // probes)
        for idx in range(0, flat.numel(), step):
            base = flat[idx].item()
            flat[idx] = base + eps
            hi = value_fn({**{k: v.detach() for k, v in params.items()},
                           name: flat.reshape(p.shape).clone()})
            flat[idx] = base - eps
            lo = value_fn({**{k: v.detach() for k, v in params.items()},
                           name: flat.reshape(p.shape).clone()})
            flat[idx] = base
            numeric = (hi - lo) / (2 * eps)
            got = grad.reshape(-1)[idx].item()
            assert numeric == pytest.approx(got, rel=rel, abs=5e-5), f"{name}[{idx}]"


def test_loss_gradients_match_finite_differences():
    # evaluated on a pair whose pre-activations sit away from the leaky-ReLU
    # kinks, so the 1e-3 probe never straddles a non-differentiable point
    desc = tiny_descriptor()
    pair = smooth_pair(desc, 31)
    gen = torch.Generator().manual_seed(6)
    real = (torch.rand(3, 1, 4, 4, generator=gen) - 0.5).double()
    real_labels = torch.randint(0, 2, (3,), generator=gen)
    zs = (torch.rand(3, 3, generator=gen) - 0.5).double()
    cs = torch.randint(0, 2, (3,), generator=gen)
    fake = (torch.rand(3, 1, 4, 4, generator=gen) - 0.5).double()

    dparams = {n: t.clone().double().requires_grad_(True)
               for n, t in pair.discriminator.params.items()}
    gparams = {n: t.clone().double().requires_grad_(True)
               for n, t in pair.generator.params.items()}

    # discriminator loss wrt D parameters
    loss = discriminator_loss(desc, dparams, real, real_labels, fake, cs)
    analytic = dict(zip(dparams.keys(),
                        torch.autograd.grad(loss, list(dparams.values()))))
    central_difference_check(
        lambda p: float(discriminator_loss(desc, p, real, real_labels, fake, cs)),
        dparams, analytic)

    # generator loss wrt G parameters (through the frozen D)
    d_detached = {n: t.detach() for n, t in dparams.items()}
    loss_g = generator_loss(desc, gparams, d_detached, zs, cs)
    analytic_g = dict(zip(gparams.keys(),
                          torch.autograd.grad(loss_g, list(gparams.values()),
                                              allow_unused=True)))
    central_difference_check(
        lambda p: float(generator_loss(desc, p, d_detached, zs, cs)),
        gparams, analytic_g)

    # R1 penalty wrt D parameters (double backward path)
    net = Network(desc, dparams)
    penalty = r1_penalty(net, real, real_labels, 1.0)
    analytic_r1 = dict(zip(dparams.keys(),
                           torch.autograd.grad(penalty, list(dparams.values()),
                                               allow_unused=True)))
    central_difference_check(
        lambda p: float(r1_penalty(Network(desc, p), real, real_labels, 1.0).detach()),
        dparams, analytic_r1)
