"""Default synthetic benchmark: one frozen configuration shared by the
CLI and the regression tests.

The operating point is deliberately hard for per-cell classification —
heavy pixel noise over well-separated region colors — so that message
passing and superpixel pooling have real signal to recover.  Training
variants share the same data, iteration budget and learning-rate
schedule; only the refinement mechanism differs:

    baseline     features -> classifier
    joint        probabilities refined with a fixed Gaussian kernel
    ecrf         features refined by the learned-kernel layer
    ecrf_p       learned pairwise term only
    ecrf_s       superpixel pooling term only
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .ecrf import EcrfParams
from .superpixel import SlicParams, slic_segment
from .toynet import NetConfig, SynthConfig, ToyNet, TrainConfig, gen_synthetic_dataset, predict, train

VARIANTS = ("baseline", "joint", "ecrf", "ecrf_p", "ecrf_s")


@dataclass(frozen=True)
class BenchmarkConfig:
    """Frozen defaults for the synthetic benchmark."""

    train_images: int = 12
    eval_images: int = 6
    size: int = 64
    num_classes: int = 6
    texture_noise: float = 0.7
    total_iters: int = 600
    superpixels: SlicParams = field(
        default_factory=lambda: SlicParams(target_blocks=128, smoothing_passes=3)
    )
    window_radius: int = 2
    embed_scale: float = 1.0
    embed_pos_scale: float = 0.1
    input_smoothing: int = 3
    joint_window: int = 2


@dataclass
class BenchmarkResult:
    variant: str
    seed: int
    miou: float
    boundary_f: float
    bcwc_top10: float
    losses: list[float]
    net: ToyNet
    ecrf_params: EcrfParams | None


def benchmark_datasets(cfg: BenchmarkConfig, seed: int):
    """(train, eval) image/label lists for one seed; the eval seed is
    offset so the two sets never share images."""
    train_data = gen_synthetic_dataset(
        SynthConfig(
            num_images=cfg.train_images,
            size=cfg.size,
            num_classes=cfg.num_classes,
            texture_noise=cfg.texture_noise,
            seed=seed,
        )
    )
    eval_data = gen_synthetic_dataset(
        SynthConfig(
            num_images=cfg.eval_images,
            size=cfg.size,
            num_classes=cfg.num_classes,
            texture_noise=cfg.texture_noise,
            seed=seed + 1000,
        )
    )
    return train_data, eval_data


def _variant_flags(variant: str) -> tuple[str, bool, bool]:
    """(train mode, use_pairwise, use_superpixel) for a benchmark variant."""
    if variant == "baseline":
        return "baseline", False, False
    if variant == "joint":
        return "joint", False, False
    if variant == "ecrf":
        return "ecrf", True, True
    if variant == "ecrf_p":
        return "ecrf", True, False
    if variant == "ecrf_s":
        return "ecrf", False, True
    raise ValueError(f"unknown benchmark variant {variant!r}")


def evaluate(
    net: ToyNet,
    eval_data,
    mode: str,
    cfg: BenchmarkConfig,
    ecrf_params: EcrfParams | None = None,
    train_cfg: TrainConfig | None = None,
) -> tuple[float, float, float]:
    """(mIoU, boundary F, top-10 BCWC similarity) on an eval split."""
    n = cfg.num_classes
    cm = np.zeros((n, n), dtype=np.int64)
    fscores = []
    adjacency = np.zeros((n, n), dtype=np.int64)
    needs_sp = mode == "ecrf" and ecrf_params is not None and ecrf_params.use_superpixel
    for image, labels in eval_data:
        sp = slic_segment(image, cfg.superpixels) if needs_sp else None
        pred = predict(net, image, mode, sp=sp, ecrf_params=ecrf_params, train_cfg=train_cfg)
        cm += metrics.confusion_matrix(pred, labels, n)
        fscores.append(metrics.boundary_fscore(pred, labels))
        adjacency += metrics.adjacency_counts(labels, n)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    miou = float((inter[present] / union[present]).mean())
    rows = metrics.bcwc_curve(net.classifier, adjacency)[:10]
    bcwc = float(np.mean([r.similarity for r in rows])) if rows else 0.0
    return miou, float(np.mean(fscores)), bcwc


def run_variant(variant: str, seed: int, cfg: BenchmarkConfig | None = None, log=None) -> BenchmarkResult:
    """Train and evaluate one benchmark variant for one seed."""
    cfg = cfg or BenchmarkConfig()
    mode, use_p, use_s = _variant_flags(variant)
    train_data, eval_data = benchmark_datasets(cfg, seed)

    rng = np.random.default_rng(seed)
    net = ToyNet.initialize(NetConfig(num_classes=cfg.num_classes), rng)
    ecrf_params = None
    sp_maps = None
    if mode == "ecrf":
        ecrf_params = EcrfParams.initialize(
            net.config.feature_channels,
            rng=rng,
            use_pairwise=use_p,
            use_superpixel=use_s,
            window_radius=cfg.window_radius,
            embed_scale=cfg.embed_scale,
            embed_pos_scale=cfg.embed_pos_scale,
            input_smoothing=cfg.input_smoothing,
        )
        if use_s:
            sp_maps = [slic_segment(img, cfg.superpixels) for img, _ in train_data]

    train_cfg = TrainConfig(
        mode=mode, total_iters=cfg.total_iters, seed=seed, joint_window=cfg.joint_window
    )
    result = train(train_cfg, train_data, net, sp_maps=sp_maps, ecrf_params=ecrf_params, log=log)
    miou, boundary_f, bcwc = evaluate(
        net, eval_data, mode, cfg, ecrf_params=ecrf_params, train_cfg=train_cfg
    )
    return BenchmarkResult(
        variant=variant,
        seed=seed,
        miou=miou,
        boundary_f=boundary_f,
        bcwc_top10=bcwc,
        losses=result.losses,
        net=net,
        ecrf_params=ecrf_params,
    )


def run_benchmark(
    seeds=(0, 1, 2, 3, 4),
    variants=VARIANTS,
    cfg: BenchmarkConfig | None = None,
    log=None,
) -> dict[str, dict[str, float]]:
    """Aggregate benchmark table: variant -> mean mIoU / F / BCWC."""
    cfg = cfg or BenchmarkConfig()
    table: dict[str, dict[str, float]] = {}
    for variant in variants:
        runs = []
        for seed in seeds:
            if log is not None:
                log(f"running {variant} seed {seed}")
            runs.append(run_variant(variant, seed, cfg=cfg))
        table[variant] = {
            "miou": float(np.mean([r.miou for r in runs])),
            "boundary_f": float(np.mean([r.boundary_f for r in runs])),
            "bcwc_top10": float(np.mean([r.bcwc_top10 for r in runs])),
        }
    return table
