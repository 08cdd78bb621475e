"""Comparison methods: EWC penalty, Fisher estimation, initialization contracts."""

import pytest
import torch

from helpers import smooth_pair, tiny_descriptor

from ganmerge.baselines import (
    BaselineMethod,
    FisherMap,
    baseline_init,
    estimate_fisher,
    ewc,
    ewc_penalty,
    freeze_d,
    frozen_names_for,
    run_baseline,
    scratch,
    transfer,
)
from ganmerge.errors import GanMergeError, ShapeError, SignatureMismatchError
from ganmerge.models import ParameterSet, build_models, default_descriptor
from ganmerge.training import TrainConfig


def tiny_sources(n=2, resolution=8):
    return [build_models(default_descriptor(resolution, num_classes=1, latent_dim=4,
                                            base_width=6), seed)
            for seed in range(n)]


# ---------------------------------------------------------------------------
# ewc_penalty
# ---------------------------------------------------------------------------

def test_ewc_penalty_hand_arithmetic():
    # single scalar parameter: F=2, diff=3, lam=0.5 -> 0.5 * 2 * 9 = 9
    theta = {"w": torch.tensor([4.0])}
    anchor = {"w": torch.tensor([1.0])}
    fisher = FisherMap({"w": torch.tensor([2.0])}, 1)
    assert float(ewc_penalty(theta, anchor, fisher, 0.5)) == pytest.approx(9.0)


def test_ewc_penalty_zero_cases():
    theta = {"w": torch.tensor([1.0, -2.0])}
    fisher = FisherMap({"w": torch.tensor([3.0, 4.0])}, 1)
    assert float(ewc_penalty(theta, theta, fisher, 2.0)) == 0.0
    other = {"w": torch.tensor([0.0, 0.0])}
    assert float(ewc_penalty(theta, other, fisher, 0.0)) == 0.0


def test_ewc_penalty_gradient_closed_form():
    # analytic gradient is 2 * lam * F * (theta - anchor)
    theta = {"w": torch.tensor([1.0, 3.0, -2.0], requires_grad=True)}
    anchor = {"w": torch.tensor([0.5, 1.0, 0.0])}
    fisher = FisherMap({"w": torch.tensor([2.0, 0.0, 1.5])}, 1)
    lam = 0.7
    value = ewc_penalty(theta, anchor, fisher, lam)
    (grad,) = torch.autograd.grad(value, theta["w"])
    expected = 2 * lam * fisher.entries["w"] * (theta["w"].detach() - anchor["w"])
    assert torch.allclose(grad, expected, atol=1e-6)
    # finite differences agree
    eps = 1e-3
    for idx in range(3):
        probe = theta["w"].detach().clone()
        probe[idx] += eps
        hi = float(ewc_penalty({"w": probe}, anchor, fisher, lam))
        probe[idx] -= 2 * eps
        lo = float(ewc_penalty({"w": probe}, anchor, fisher, lam))
        assert (hi - lo) / (2 * eps) == pytest.approx(float(expected[idx]), rel=1e-3, abs=1e-6)


def test_ewc_penalty_signature_mismatch():
    theta = {"w": torch.zeros(2)}
    fisher = FisherMap({"w": torch.zeros(2)}, 1)
    with pytest.raises(SignatureMismatchError):
        ewc_penalty(theta, {"v": torch.zeros(2)}, fisher, 1.0)


def test_fisher_map_rejects_negative():
    with pytest.raises(GanMergeError, match="negative"):
        FisherMap({"w": torch.tensor([-1.0])}, 1)


# ---------------------------------------------------------------------------
# estimate_fisher
# ---------------------------------------------------------------------------

def test_fisher_unused_embedding_rows_are_zero():
    # a single sample touches exactly one class row; the others get zero
    pair = smooth_pair(tiny_descriptor(num_classes=3, embed_dim=2), 2)
    fisher_g, fisher_d = estimate_fisher(pair, 1, torch.Generator().manual_seed(0))
    g_rows = fisher_g.entries["g/embed/0/table"].sum(dim=1)
    d_rows = fisher_d.entries["d/embed/0/table"].sum(dim=1)
    used = int((g_rows > 0).sum())
    assert used == 1
    assert int((d_rows > 0).sum()) == 1
    assert fisher_g.sample_count == 1


def test_fisher_quadratic_loss_scaling():
    pair = smooth_pair(tiny_descriptor(), 2)
    base_g, base_d = estimate_fisher(pair, 16, torch.Generator().manual_seed(5))
    scaled_g, scaled_d = estimate_fisher(pair, 16, torch.Generator().manual_seed(5),
                                         loss_scale=2.0)
    for name in base_g.entries:
        assert torch.equal(scaled_g.entries[name], 4.0 * base_g.entries[name]), name
    for name in base_d.entries:
        assert torch.equal(scaled_d.entries[name], 4.0 * base_d.entries[name]), name


def test_fisher_nonnegative_on_random_models():
    for seed in range(3):
        pair = build_models(tiny_descriptor(), seed)
        fisher_g, fisher_d = estimate_fisher(pair, 8, torch.Generator().manual_seed(seed))
        for fm in (fisher_g, fisher_d):
            for name, t in fm.entries.items():
                assert (t >= 0).all(), name


def test_fisher_self_consistency_small():
    pair = smooth_pair(tiny_descriptor(), 4)
    small_g, _ = estimate_fisher(pair, 2000, torch.Generator().manual_seed(1))
    large_g, _ = estimate_fisher(pair, 20_000, torch.Generator().manual_seed(2))
    for name in small_g.entries:
        a = small_g.entries[name]
        b = large_g.entries[name]
        mask = b.abs() > 1e-10
        if mask.any():
            rel = ((a[mask] - b[mask]).abs() / b[mask].abs()).max()
            assert float(rel) < 0.35, name  # loose bound at these sample sizes


# ---------------------------------------------------------------------------
# run_baseline and initialization contracts
# ---------------------------------------------------------------------------

def test_scratch_zero_steps_is_fresh_conditional_pair():
    sources = tiny_sources()
    config = TrainConfig(total_steps=0, batch_size=4, seed=3)
    out = run_baseline(scratch(), sources, config)
    assert out.descriptor.num_classes == 2
    assert out.descriptor.conditional
    fresh = baseline_init(scratch(), sources, config.seed)
    assert out.generator.params == fresh.generator.params


def test_transfer_init_copies_source_tensors():
    sources = tiny_sources()
    config = TrainConfig(total_steps=0, batch_size=4, seed=3)
    out = run_baseline(transfer(1), sources, config)
    src = sources[1]
    for name, tensor in src.generator.params.items():
        if name == "g/map/0/weight":
            assert torch.equal(out.generator.params[name][:, :4], tensor)
        else:
            assert torch.equal(out.generator.params[name], tensor)


def test_freeze_d_keeps_high_resolution_stage_fixed():
    sources = tiny_sources()
    config = TrainConfig(total_steps=30, batch_size=4, seed=3, lr_d=5e-3, lr_g=5e-3)
    out = run_baseline(freeze_d(0, 1), sources, config)
    init = baseline_init(freeze_d(0, 1), sources, config.seed)
    for name in frozen_names_for(init, 1):
        assert torch.equal(out.discriminator.params[name], init.discriminator.params[name]), name
    moved = [n for n in out.discriminator.params
             if not torch.equal(out.discriminator.params[n], init.discriminator.params[n])]
    assert moved


def test_freeze_stage_order_is_input_to_output():
    pair = build_models(default_descriptor(16, num_classes=2, latent_dim=4, base_width=6), 0)
    names = frozen_names_for(pair, 2)
    assert names == ["d/in/0/weight", "d/in/0/bias", "d/trunk/0/weight", "d/trunk/0/bias"]
    with pytest.raises(GanMergeError, match="exceeds"):
        frozen_names_for(pair, 99)


def test_heterogeneous_sources_follow_initializer_architecture():
    a = build_models(default_descriptor(8, num_classes=1, latent_dim=4, base_width=6,
                                        mapping_depth=1), 0)
    b = build_models(default_descriptor(8, num_classes=1, latent_dim=6, base_width=8,
                                        mapping_depth=3), 1)
    config = TrainConfig(total_steps=2, batch_size=4, seed=1)
    out0 = run_baseline(transfer(0), [a, b], config)
    assert out0.descriptor.mapping_depth == 1
    assert out0.descriptor.latent_dim == 4
    out1 = run_baseline(transfer(1), [a, b], config)
    assert out1.descriptor.mapping_depth == 3
    assert out1.descriptor.latent_dim == 6


def test_resolution_mismatch_rejected():
    a = build_models(default_descriptor(8, num_classes=1, latent_dim=4, base_width=6), 0)
    b = build_models(default_descriptor(16, num_classes=1, latent_dim=4, base_width=6), 1)
    with pytest.raises(ShapeError, match="resolution"):
        run_baseline(scratch(), [a, b], TrainConfig(total_steps=1, batch_size=2, seed=0))


def test_ewc_run_stays_closer_to_anchor_than_plain_transfer():
    sources = tiny_sources()
    config = TrainConfig(total_steps=40, batch_size=4, seed=7, lr_d=5e-3, lr_g=5e-3)
    plain = run_baseline(transfer(0), sources, config)
    anchored = run_baseline(ewc(0, ewc_lambda=50.0, fisher_samples=64), sources, config)
    init = baseline_init(transfer(0), sources, config.seed)
    from ganmerge.cocktail import weight_distance

    drift_plain = weight_distance(plain.generator.params, init.generator.params)
    drift_anchored = weight_distance(anchored.generator.params, init.generator.params)
    assert drift_anchored < drift_plain


def test_baseline_method_validation():
    with pytest.raises(GanMergeError, match="unknown baseline"):
        BaselineMethod("mystery")
    with pytest.raises(GanMergeError, match="non-negative"):
        BaselineMethod("ewc", ewc_lambda=-1.0)
