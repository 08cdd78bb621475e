"""Shared test utilities."""

import torch

from ganmerge.models import (
    ArchitectureDescriptor,
    GanPair,
    Network,
    ParameterSet,
    SynthesisLayer,
    build_models,
)


def tiny_descriptor(num_classes=2, embed_dim=2, mapping_depth=1, latent_dim=3):
    return ArchitectureDescriptor(
        latent_dim=latent_dim,
        num_classes=num_classes,
        mapping_depth=mapping_depth,
        embed_dim=embed_dim,
        synthesis_layers=(SynthesisLayer("base", 4, 4, 4),),
        image_resolution=4,
        image_channels=1,
    )


def smooth_pair(desc: ArchitectureDescriptor, seed: int, weight_scale=0.15, bias_magnitude=0.7) -> GanPair:
    """A pair whose leaky-ReLU pre-activations sit far from their kinks.

    Weights are scaled down and biases set to alternating +-bias_magnitude,
    so finite-difference probes with step 1e-3 never cross a kink while both
    activation branches stay exercised. Inputs should stay within [-1, 1].
    """

    def smooth(params: ParameterSet) -> ParameterSet:
        entries = {}
        for name, t in params.items():
            if name.endswith("/bias") and t.ndim == 1:
                signs = torch.tensor([1.0 if i % 2 == 0 else -1.0 for i in range(t.shape[0])])
                entries[name] = signs * bias_magnitude
            elif name.endswith(("/weight", "/const", "/table", "/style_weight")):
                entries[name] = t * weight_scale
            else:
                entries[name] = t.clone()
        return ParameterSet(entries)

    pair = build_models(desc, seed)
    g = smooth(pair.generator.params)
    return GanPair(
        generator=Network(desc, g),
        discriminator=Network(desc, smooth(pair.discriminator.params)),
        ema_generator_params=g.clone(),
        metadata=pair.metadata,
    )
