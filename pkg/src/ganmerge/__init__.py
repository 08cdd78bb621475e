"""Data-free merging of pretrained GANs into one class-conditional model."""

from .models import (
    ArchitectureDescriptor,
    GanPair,
    LatentCode,
    Network,
    ParameterSet,
    SynthesisLayer,
    build_models,
    default_descriptor,
    discriminate,
    generate,
    generate_batch,
    map_latent,
)
from .conditioning import conditionalize, extend_classes
from .data import FrozenSource, ImageDataset, LabeledBatch, build_toy_dataset, sample_batch
from .training import TrainConfig, adversarial_step, ema_update, r1_penalty, train
from .baselines import BaselineMethod, FisherMap, estimate_fisher, ewc_penalty, run_baseline
from .cocktail import (
    RootedSet,
    average_parameters,
    gan_cocktail,
    merge,
    root_model,
    weight_distance,
)
from .evaluation import (
    FeatureExtractor,
    FeatureStats,
    extract_features,
    fid,
    fit_stats,
    frechet_distance,
)
from .applications import apply_direction, find_latent_direction, interpolate, style_mix
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
