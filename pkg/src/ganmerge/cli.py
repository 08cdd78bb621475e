"""Experiment orchestration and the command-line interface.

Every experiment is a YAML config (see ``ganmerge.config``) plus a method;
outputs land in ``<output_dir>/<experiment_name>/{checkpoints,logs,reports,figures}``.
The ``bootstrap`` subcommand trains the source models the other methods
consume, so a full desk-scale study is: bootstrap, then cocktail and the
baselines on the same source checkpoints, then eval/figures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from . import applications, baselines, cocktail as cocktail_mod, evaluation
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import conditional_descriptor
from .config import (
    DatasetConfig,
    ExperimentConfig,
    ModelConfig,
    derive_seed,
    load_config,
)
from .data import ImageDataset, build_toy_dataset, concat_datasets
from .errors import ConfigError, GanMergeError
from .models import GanPair, LatentCode, build_models, default_descriptor
from .training import MetricLogger, TrainConfig, train


def _run_dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    base = cfg.run_dir()
    dirs = {name: base / name for name in ("checkpoints", "logs", "reports", "figures")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _build_dataset(ds: DatasetConfig, model: ModelConfig) -> ImageDataset:
    return build_toy_dataset(ds.spec, ds.n, ds.seed,
                             resolution=model.resolution, channels=model.channels)


def _source_descriptor(model: ModelConfig):
    return default_descriptor(
        resolution=model.resolution,
        num_classes=1,
        latent_dim=model.latent_dim,
        embed_dim=0,
        mapping_depth=model.mapping_depth,
        base_width=model.base_width,
        image_channels=model.channels,
    )


def _load_sources(cfg: ExperimentConfig) -> list[GanPair]:
    pairs = []
    for i, src in enumerate(cfg.sources):
        if src.checkpoint is None:
            raise ConfigError(f"sources[{i}].checkpoint", "expected a checkpoint path")
        pairs.append(load_checkpoint(src.checkpoint))
    return pairs


def _extractor(cfg: ExperimentConfig) -> evaluation.FeatureExtractor:
    return evaluation.FeatureExtractor.create(
        cfg.model.resolution, cfg.model.channels,
        seed=cfg.eval.extractor_seed, feature_dim=cfg.eval.feature_dim,
    )


def _references(cfg: ExperimentConfig, extractor) -> evaluation.EvalReferences | None:
    """Reference stats from config datasets, cached under the output root."""
    if not cfg.eval.reference:
        return None
    cache_dir = Path(cfg.output_dir) / "_stats_cache"
    parts, per_class = [], {}
    for i, ds in enumerate(cfg.eval.reference):
        dataset = _build_dataset(ds, cfg.model)
        parts.append(dataset)
        fingerprint = evaluation.dataset_fingerprint(dataset)
        cache = cache_dir / f"{fingerprint[:16]}_seed{extractor.seed}.npz"
        stats = evaluation.load_stats(cache, extractor, fingerprint)
        if stats is None:
            stats = evaluation.dataset_stats(dataset, extractor)
            evaluation.save_stats(stats, cache, extractor, fingerprint)
        per_class[i] = stats
    union_ds = concat_datasets(parts)
    fingerprint = evaluation.dataset_fingerprint(union_ds)
    cache = cache_dir / f"{fingerprint[:16]}_seed{extractor.seed}.npz"
    union = evaluation.load_stats(cache, extractor, fingerprint)
    if union is None:
        union = evaluation.dataset_stats(union_ds, extractor)
        evaluation.save_stats(union, cache, extractor, fingerprint)
    return evaluation.EvalReferences(union=union, per_class=per_class)


def _eval_hook(cfg: ExperimentConfig, references, extractor):
    """Training hook adding fid_union / fid_per_class to the metric log."""
    if references is None or not cfg.eval.during_training:
        return ()

    def hook(pair: GanPair, metrics: dict):
        rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "eval", metrics["step"]))
        report = evaluation.fid_report(pair, references, cfg.eval.num_samples, extractor, rng)
        return {"fid_union": report["union"], "fid_per_class": report["per_class"]}

    return (hook,)


def _final_report(cfg: ExperimentConfig, pair: GanPair, sources: Sequence[GanPair],
                  references, extractor, dirs: dict[str, Path]) -> dict:
    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "final-eval"))
    if references is not None:
        report = evaluation.fid_report(pair, references, cfg.eval.num_samples, extractor, rng)
        report["reference_available"] = True
    else:
        # data-free deployment: no real reference exists, report cross-model
        # distances against the sources instead
        report = evaluation.data_free_report(pair, list(sources), cfg.eval.num_samples,
                                             extractor, rng)
    report["method"] = cfg.method
    report["experiment_name"] = cfg.experiment_name
    (dirs["reports"] / "fid.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def cmd_bootstrap(cfg: ExperimentConfig) -> int:
    dirs = _run_dirs(cfg)
    desc = _source_descriptor(cfg.model)
    for i, src in enumerate(cfg.sources):
        if src.dataset is None:
            raise ConfigError(f"sources[{i}].dataset", "bootstrap trains on toy datasets")
        dataset = _build_dataset(src.dataset, cfg.model)
        seed = derive_seed(cfg.seed, "bootstrap", i)
        init = build_models(desc, seed).with_metadata(source_tag=src.dataset.spec)
        config = replace(cfg.train, seed=seed)
        logger = MetricLogger(dirs["logs"] / f"bootstrap_{i}_{src.dataset.spec}.jsonl")
        pair = train(init, dataset.supplier(), config, logger=logger)
        out = dirs["checkpoints"] / f"source_{i}_{src.dataset.spec}.ckpt"
        save_checkpoint(pair, out)
        print(f"bootstrap: source {i} ({src.dataset.spec}) -> {out}")
    return 0


def cmd_cocktail(cfg: ExperimentConfig) -> int:
    dirs = _run_dirs(cfg)
    sources = _load_sources(cfg)
    extractor = _extractor(cfg)
    references = _references(cfg, extractor)
    rooting_cfg = replace(cfg.train,
                          total_steps=cfg.rooting_steps if cfg.rooting_steps is not None
                          else cfg.train.total_steps,
                          seed=derive_seed(cfg.seed, "rooting"))
    merge_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "merge"))
    logger = MetricLogger(dirs["logs"] / "merge.jsonl")
    union, diagnostics = cocktail_mod.gan_cocktail(
        sources, cfg.root_index, rooting_cfg, merge_cfg,
        hooks=_eval_hook(cfg, references, extractor), logger=logger,
    )
    out = dirs["checkpoints"] / "final.ckpt"
    save_checkpoint(union, out)
    (dirs["reports"] / "distances.json").write_text(
        json.dumps(diagnostics.as_dict(), indent=2, sort_keys=True)
    )
    report = _final_report(cfg, union, sources, references, extractor, dirs)
    print(f"cocktail: union checkpoint -> {out}")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_baseline(cfg: ExperimentConfig) -> int:
    dirs = _run_dirs(cfg)
    extractor = _extractor(cfg)
    references = _references(cfg, extractor)
    logger = MetricLogger(dirs["logs"] / f"{cfg.method}.jsonl")
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "baseline", cfg.method))

    if cfg.method == "upper_bound":
        datasets = [_build_dataset(s.dataset, cfg.model) for s in cfg.sources]
        union_ds = concat_datasets(datasets)
        desc = conditional_descriptor(_source_descriptor(cfg.model), len(datasets),
                                      cfg.model.embed_dim)
        init = build_models(desc, derive_seed(cfg.seed, "upper_bound-init"))
        init = init.with_metadata(source_tag="upper_bound")
        pair = train(init, union_ds.supplier(), train_cfg,
                     hooks=_eval_hook(cfg, references, extractor), logger=logger)
        sources: list[GanPair] = []
    else:
        sources = _load_sources(cfg)
        method = baselines.BaselineMethod(
            kind=cfg.method,
            source_index=cfg.source_index or 0,
            ewc_lambda=cfg.ewc_lambda or 0.0,
            freeze_stages=cfg.freeze_stages or 0,
            fisher_samples=cfg.ewc_fisher_samples,
        )
        pair = baselines.run_baseline(method, sources, train_cfg,
                                      hooks=_eval_hook(cfg, references, extractor),
                                      logger=logger)
    out = dirs["checkpoints"] / "final.ckpt"
    save_checkpoint(pair, out)
    if cfg.method == "upper_bound" and references is None:
        report = {"method": cfg.method, "note": "no eval.reference configured"}
        (dirs["reports"] / "fid.json").write_text(json.dumps(report, indent=2))
    else:
        report = _final_report(cfg, pair, sources, references, extractor, dirs)
    print(f"{cfg.method}: checkpoint -> {out}")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def run_experiment(config_path: str | Path) -> int:
    """Execute the configured method; nonzero status on validation/training errors."""
    cfg = load_config(config_path)
    if cfg.method == "cocktail":
        return cmd_cocktail(cfg)
    return cmd_baseline(cfg)


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> int:
    dirs = _run_dirs(cfg)
    pair = load_checkpoint(checkpoint)
    extractor = _extractor(cfg)
    references = _references(cfg, extractor)
    sources = _load_sources(cfg) if references is None else []
    report = _final_report(cfg, pair, sources, references, extractor, dirs)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_distance(paths: Sequence[str], out: str | None) -> int:
    pairs = [load_checkpoint(p) for p in paths]
    names = [Path(p).name for p in paths]
    matrix = []
    for a in pairs:
        row = []
        for b in pairs:
            if a.generator.params.signature() == b.generator.params.signature():
                row.append(cocktail_mod.pair_weight_distance(a, b))
            else:
                row.append(None)  # architectures differ; distance undefined
        matrix.append(row)
    doc = {"checkpoints": names, "generator_distance": matrix}
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text)
    return 0


def cmd_interpolate(checkpoint: str, class_a: int, class_b: int, steps: int,
                    seed: int, out: str) -> int:
    pair = load_checkpoint(checkpoint)
    net = pair.ema_generator()
    rng = torch.Generator().manual_seed(seed)
    rows = []
    for _ in range(3):
        z_a = torch.randn(net.descriptor.latent_dim, generator=rng)
        z_b = torch.randn(net.descriptor.latent_dim, generator=rng)
        rows.append(applications.interpolate(
            net, LatentCode(z_a, class_a), LatentCode(z_b, class_b), steps
        ))
    applications.write_image_grid(rows, out)
    print(f"interpolation strip -> {out}")
    return 0


def cmd_stylemix(checkpoint: str, class_pose: int, class_appearance: int,
                 crossover: int, seed: int, out: str) -> int:
    pair = load_checkpoint(checkpoint)
    net = pair.ema_generator()
    rng = torch.Generator().manual_seed(seed)
    n = 4
    poses = [applications.map_latent(net, LatentCode(
        torch.randn(net.descriptor.latent_dim, generator=rng), class_pose)) for _ in range(n)]
    apps = [applications.map_latent(net, LatentCode(
        torch.randn(net.descriptor.latent_dim, generator=rng), class_appearance)) for _ in range(n)]
    rows = []
    for w_pose in poses:
        row = [applications.style_mix(net, w_pose, w_app, crossover) for w_app in apps]
        rows.append(row)
    applications.write_image_grid(rows, out)
    print(f"style-mixing grid -> {out}")
    return 0


def cmd_direction(checkpoint: str, source_class: int, apply_class: int, samples: int,
                  magnitude: float, seed: int, out: str) -> int:
    """Fit an attribute direction on one class and apply it to another.

    Labels come from the elongation image moment, the ground-truth attribute
    the toy ring data embeds, replacing an off-the-shelf classifier.
    """
    pair = load_checkpoint(checkpoint)
    net = pair.ema_generator()
    rng = torch.Generator().manual_seed(seed)
    latents, scores = [], []
    for _ in range(samples):
        code = LatentCode(torch.randn(net.descriptor.latent_dim, generator=rng), source_class)
        w = applications.map_latent(net, code)
        latents.append(w)
        scores.append(applications.elongation_score(applications.synthesize(net, w)))
    order = sorted(range(samples), key=lambda i: scores[i])
    third = max(2, samples // 3)
    chosen = order[:third] + order[-third:]
    labels = [0] * third + [1] * third
    direction = applications.find_latent_direction([latents[i] for i in chosen], labels)
    rows = []
    for cls in (source_class, apply_class):
        code = LatentCode(torch.randn(net.descriptor.latent_dim, generator=rng), cls)
        rows.append([
            applications.apply_direction(net, code, direction, m)
            for m in (-magnitude, -magnitude / 2, 0.0, magnitude / 2, magnitude)
        ])
    applications.write_image_grid(rows, out)
    print(f"semantic-direction strip -> {out}")
    return 0


def cmd_plot_convergence(log_paths: Sequence[str], out: str) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted_fid = False
    for path in log_paths:
        records = MetricLogger.read(path)
        steps = [r["step"] for r in records if r.get("fid_union") is not None]
        fids = [r["fid_union"] for r in records if r.get("fid_union") is not None]
        if steps:
            ax.plot(steps, fids, marker="o", markersize=3, label=Path(path).stem)
            plotted_fid = True
        else:
            steps = [r["step"] for r in records if r.get("loss_d") is not None]
            ax.plot(steps, [r["loss_d"] for r in records if r.get("loss_d") is not None],
                    label=f"{Path(path).stem} loss_d")
    ax.set_xlabel("step")
    ax.set_ylabel("union FID" if plotted_fid else "loss")
    ax.legend()
    ax.grid(True, linestyle="--", alpha=0.5)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"convergence plot -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganmerge",
                                     description="merge pretrained GANs into one conditional model")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML experiment config")
        return p

    with_config(sub.add_parser("bootstrap", help="train source models on toy datasets"))
    with_config(sub.add_parser("cocktail", help="two-stage rooting + merge pipeline"))
    with_config(sub.add_parser("baseline", help="run the configured comparison method"))
    p = with_config(sub.add_parser("eval", help="FID report for a checkpoint"))
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("distance", help="pairwise weight-distance matrix")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out")

    p = sub.add_parser("interpolate", help="latent interpolation strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-a", type=int, default=0)
    p.add_argument("--class-b", type=int, default=1)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stylemix", help="style-mixing grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-pose", type=int, default=0)
    p.add_argument("--class-appearance", type=int, default=1)
    p.add_argument("--crossover", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("direction", help="fit and apply a semantic direction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-class", type=int, default=0)
    p.add_argument("--apply-class", type=int, default=1)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--magnitude", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot-convergence", help="plot metric logs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bootstrap":
            return cmd_bootstrap(load_config(args.config))
        if args.command == "cocktail":
            cfg = load_config(args.config)
            if cfg.method != "cocktail":
                raise ConfigError("method", f"cocktail subcommand needs method 'cocktail', got {cfg.method!r}")
            return cmd_cocktail(cfg)
        if args.command == "baseline":
            cfg = load_config(args.config)
            if cfg.method == "cocktail":
                raise ConfigError("method", "use the cocktail subcommand for method 'cocktail'")
            return cmd_baseline(cfg)
        if args.command == "eval":
            return cmd_eval(load_config(args.config), args.checkpoint)
        if args.command == "distance":
            return cmd_distance(args.checkpoints, args.out)
        if args.command == "interpolate":
            return cmd_interpolate(args.checkpoint, args.class_a, args.class_b,
                                   args.steps, args.seed, args.out)
        if args.command == "stylemix":
            return cmd_stylemix(args.checkpoint, args.class_pose, args.class_appearance,
                                args.crossover, args.seed, args.out)
        if args.command == "direction":
            return cmd_direction(args.checkpoint, args.source_class, args.apply_class,
                                 args.samples, args.magnitude, args.seed, args.out)
        if args.command == "plot-convergence":
            return cmd_plot_convergence(args.logs, args.out)
        raise GanMergeError(f"unknown command {args.command!r}")  # pragma: no cover
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GanMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
