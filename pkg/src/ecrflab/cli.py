"""Command-line surface: `ecrf <command>`.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
failure.  Every command is deterministic given --seed and echoes its
resolved configuration when --verbose is set.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import checkpoint, densecrf, grid, gradtheory, metrics, superpixel, toynet
from .ecrf import EcrfParams, ecrf_backward, ecrf_forward
from .errors import DataFormatError, EcrfError, NumericError, ParameterError


def _log(args, msg: str) -> None:
    if args.verbose:
        print(msg, file=sys.stderr)


def _echo_config(args) -> None:
    if args.verbose:
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        print(f"config: {resolved}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = toynet.SynthConfig(
        num_images=args.num, size=args.size, num_classes=args.classes, texture_noise=args.noise, seed=args.seed
    )
    data = toynet.gen_synthetic_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    for i, (image, labels) in enumerate(data):
        grid.save_image_png(os.path.join(args.out, f"img_{i:04d}.png"), image)
        grid.save_labels_png(os.path.join(args.out, f"lab_{i:04d}.png"), labels)
    with open(os.path.join(args.out, "dataset.txt"), "w") as fh:
        fh.write(f"num_images={cfg.num_images}\nsize={cfg.size}\nnum_classes={cfg.num_classes}\nseed={cfg.seed}\n")
    print(f"wrote {len(data)} images to {args.out}")
    return 0


def _load_dataset(path: str) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
    meta = {}
    meta_path = os.path.join(path, "dataset.txt")
    if not os.path.exists(meta_path):
        raise DataFormatError(f"no dataset.txt in {path}")
    with open(meta_path) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            meta[k] = v
    n = int(meta["num_images"])
    data = []
    for i in range(n):
        image = grid.load_image_png(os.path.join(path, f"img_{i:04d}.png"))
        labels = grid.load_labels_png(os.path.join(path, f"lab_{i:04d}.png"))
        data.append((image, labels))
    return data, int(meta["num_classes"])


def cmd_superpixel(args) -> int:
    image = grid.load_image_png(args.image)
    params = superpixel.SlicParams(
        target_blocks=args.blocks,
        compactness=args.compactness,
        iterations=args.iters,
        smoothing_passes=args.smoothing,
    )
    sp = superpixel.slic_segment(image, params)
    superpixel.save_superpixels(args.out, sp, params)
    print(f"{sp.block_count} blocks -> {args.out}")
    return 0


def _parse_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataFormatError(f"bad config line: {line!r}")
            out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    file_cfg = _parse_config_file(args.config) if args.config else {}

    def cfgget(key, default, cast):
        return cast(file_cfg.get(key, default))

    data, num_classes = _load_dataset(args.data)
    train_cfg = toynet.TrainConfig(
        mode=args.mode,
        lr0=cfgget("lr0", 0.01, float),
        momentum=cfgget("momentum", 0.9, float),
        weight_decay=cfgget("weight_decay", 0.0005, float),
        total_iters=args.iters if args.iters else cfgget("total_iters", 600, int),
        poly_power=cfgget("poly_power", 0.9, float),
        batch=cfgget("batch", 4, int),
        seed=args.seed,
        joint_window=cfgget("joint_window", 2, int),
    )
    net_cfg = toynet.NetConfig(num_classes=num_classes)
    rng = np.random.default_rng(args.seed)
    net = toynet.ToyNet.initialize(net_cfg, rng)

    sp_maps = None
    ecrf_params = None
    if args.mode == "ecrf":
        use_pairwise = cfgget("use_pairwise", 1, int) != 0
        use_superpixel = cfgget("use_superpixel", 1, int) != 0
        radius = cfgget("window_radius", 2, int)
        ecrf_params = EcrfParams.initialize(
            channels=net_cfg.feature_channels,
            d_k=cfgget("d_k", 16, int),
            pos_dim=cfgget("pos_dim", 16, int),
            use_pairwise=use_pairwise,
            use_superpixel=use_superpixel,
            window_radius=None if radius < 0 else radius,
            rng=rng,
            embed_scale=cfgget("embed_scale", 1.0, float),
            embed_pos_scale=cfgget("embed_pos_scale", 0.1, float),
            input_smoothing=cfgget("input_smoothing", 3, int),
        )
        if use_superpixel:
            if args.sp:
                sp_maps = [
                    superpixel.load_superpixels(os.path.join(args.sp, f"sp_{i:04d}.png"))
                    for i in range(len(data))
                ]
            else:
                params = superpixel.SlicParams(
                    target_blocks=cfgget("sp_blocks", 128, int),
                    smoothing_passes=cfgget("sp_smoothing", 3, int),
                )
                _log(args, "no --sp dir given; generating superpixels offline now")
                sp_maps = [superpixel.slic_segment(img, params) for img, _ in data]

    result = toynet.train(train_cfg, data, net, sp_maps=sp_maps, ecrf_params=ecrf_params, log=lambda m: _log(args, m))
    checkpoint.save_model(
        args.out,
        result.net,
        result.ecrf_params,
        {"mode": args.mode, "seed": str(args.seed), "joint_window": str(train_cfg.joint_window)},
    )
    print(f"final loss {result.losses[-1]:.4f} -> {args.out}")
    return 0


def _eval_checkpoint(ckpt_path: str, data_dir: str):
    net, ecrf_params, config = checkpoint.load_model(ckpt_path)
    data, num_classes = _load_dataset(data_dir)
    mode = config.get("mode", "baseline")
    sp_needed = mode == "ecrf" and ecrf_params is not None and ecrf_params.use_superpixel
    sp_params = superpixel.SlicParams(target_blocks=128, smoothing_passes=3)
    train_cfg = toynet.TrainConfig(mode=mode, joint_window=int(config.get("joint_window", "2")))
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    fscores = []
    preds = []
    for image, labels in data:
        sp = superpixel.slic_segment(image, sp_params) if sp_needed else None
        pred = toynet.predict(net, image, mode, sp=sp, ecrf_params=ecrf_params, train_cfg=train_cfg)
        preds.append(pred)
        cm += metrics.confusion_matrix(pred, labels, num_classes)
        fscores.append(metrics.boundary_fscore(pred, labels))
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    mean_iou = float((inter[present] / union[present]).mean())
    return net, data, num_classes, mean_iou, float(np.mean(fscores)), preds


def cmd_eval(args) -> int:
    _, _, _, mean_iou, fscore, _ = _eval_checkpoint(args.ckpt, args.data)
    print(f"mIoU {mean_iou:.4f}")
    print(f"boundary F-score {fscore:.4f}")
    return 0


def cmd_crf(args) -> int:
    net, ecrf_params, config = checkpoint.load_model(args.ckpt)
    data, num_classes = _load_dataset(args.data)
    params = densecrf.GaussianKernelParams(
        w1=args.w1, w2=args.w2, theta_alpha=args.ta, theta_beta=args.tb, theta_gamma=args.tg
    )
    compat = densecrf.LabelCompatibility.identity(num_classes)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    stride = net.config.feature_stride
    before = checkpoint_hash(net, ecrf_params)
    for image, labels in data:
        fwd = toynet.forward(net, image, "baseline")
        if args.mode == "vanilla":
            probs = densecrf.run_inference(fwd["logits"], image, params, compat, steps=args.steps, window_radius=args.window)
        else:
            h, w, _ = fwd["logits"].shape
            kernel = densecrf.kernel_matrix(h, w, image, params, args.window)
            probs = densecrf.joint_refine_field(densecrf.softmax(fwd["logits"]), kernel)
        cells = probs.argmax(axis=2)
        pred = np.repeat(np.repeat(cells, stride, 0), stride, 1)[: image.shape[0], : image.shape[1]]
        cm += metrics.confusion_matrix(pred, labels, num_classes)
    if checkpoint_hash(net, ecrf_params) != before:
        raise NumericError("CRF post-processing mutated model parameters")
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    print(f"mIoU after {args.mode} CRF: {(inter[present] / union[present]).mean():.4f}")
    return 0


def checkpoint_hash(net, ecrf_params=None) -> int:
    import zlib

    crc = 0
    for _, p, _ in net.param_list():
        crc = zlib.crc32(np.ascontiguousarray(p).tobytes(), crc)
    if ecrf_params is not None:
        for _, p, _ in ecrf_params.param_list():
            crc = zlib.crc32(np.ascontiguousarray(p).tobytes(), crc)
    return crc


def cmd_bcwc(args) -> int:
    net, _, _ = checkpoint.load_model(args.ckpt)
    data, num_classes = _load_dataset(args.data)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for _, labels in data:
        counts += metrics.adjacency_counts(labels, num_classes)
    rows = metrics.bcwc_curve(net.classifier, counts)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["adjacency_rank", "class", "partner", "count", "similarity"])
        for rank, row in enumerate(rows):
            writer.writerow([rank, row.class_id, row.partner_id, row.adjacency, f"{row.similarity:.6f}"])
    svg_path = os.path.splitext(args.out)[0] + ".svg"
    _write_curve_svg(svg_path, [r.similarity for r in rows])
    print(f"{len(rows)} rows -> {args.out} (+ {svg_path})")
    return 0


def _write_curve_svg(path: str, values: list[float]) -> None:
    w, h = 480, 240
    if values:
        xs = np.linspace(30, w - 10, len(values))
        ys = h - 30 - (np.asarray(values) + 1.0) / 2.0 * (h - 50)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        line = f'<polyline points="{pts}" fill="none" stroke="#d2691e" stroke-width="2"/>'
    else:
        line = ""
    with open(path, "w") as fh:
        fh.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<rect width="{w}" height="{h}" fill="white"/>'
            f'<line x1="30" y1="{h-30}" x2="{w-10}" y2="{h-30}" stroke="black"/>'
            f'<line x1="30" y1="10" x2="30" y2="{h-30}" stroke="black"/>'
            f"{line}</svg>"
        )


def cmd_gradcheck(args) -> int:
    from .oracles import finite_diff_grad

    rng = np.random.default_rng(args.seed)
    failures = 0
    print(f"{'check':<28} {'cases':>6} {'max rel err':>12}  status")
    for name, fn in (
        ("baseline_weight_grad", gradtheory.baseline_weight_grad),
        ("jointcrf_weight_grad", gradtheory.jointcrf_weight_grad),
        ("ecrf_weight_grad", gradtheory.ecrf_weight_grad),
    ):
        worst = 0.0
        for _ in range(args.seeds):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(2, 5))
            case = gradtheory.PixelCase(
                feature=rng.normal(size=c),
                label=0,
                neighbors=tuple((float(rng.uniform(0, 2)), rng.normal(size=c)) for _ in range(int(rng.integers(0, 4)))),
            )
            weights = rng.normal(size=(c, n))
            analytic = fn(case, weights).grad
            numeric = finite_diff_grad(name, case, weights, eps=args.eps)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-2)
            worst = max(worst, np.linalg.norm(analytic - numeric) / denom)
        ok = worst <= 1e-8
        failures += 0 if ok else 1
        print(f"{name:<28} {args.seeds:>6} {worst:>12.3e}  {'PASS' if ok else 'FAIL'}")
    return 0 if failures == 0 else 4


def cmd_angles(args) -> int:
    rng = np.random.default_rng(args.seed)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "theta1", "theta2", "theta3"])
        ordered = 0
        for s in range(args.sweep):
            t1, t2, t3 = _random_angle_trial(np.random.default_rng((args.seed, s)))
            ordered += int(t1 < t2 < t3)
            writer.writerow([s, f"{t1:.6f}", f"{t2:.6f}", f"{t3:.6f}"])
    print(f"strict ordering theta1 < theta2 < theta3 in {ordered}/{args.sweep} trials -> {args.out}")
    return 0


def _random_angle_trial(rng: np.random.Generator) -> tuple[float, float, float]:
    c = int(rng.integers(2, 7))
    w1 = rng.normal(size=c)
    w2 = rng.normal(size=c)
    while abs(metrics.cosine_similarity(w1, w2)) > 0.98:
        w2 = rng.normal(size=c)
    return gradtheory.angle_experiment(
        w1,
        w2,
        mix=float(rng.uniform(0.3, 0.7)),
        neighbor_purity=float(rng.uniform(0.8, 1.0)),
        neighbor_weight=float(rng.uniform(0.5, 2.0)),
        step=0.1,
    )


def cmd_benchmark(args) -> int:
    from .benchmark import VARIANTS, run_benchmark

    variants = args.variants or list(VARIANTS)
    seeds = range(args.seed, args.seed + args.num_seeds)
    table = run_benchmark(seeds=seeds, variants=variants, log=lambda m: _log(args, m))
    print(f"{'variant':<10} {'mIoU':>8} {'boundary_F':>11} {'bcwc_top10':>11}")
    for variant in variants:
        row = table[variant]
        print(f"{variant:<10} {row['miou']:>8.4f} {row['boundary_f']:>11.4f} {row['bcwc_top10']:>11.4f}")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for size in args.sizes:
        image = rng.uniform(size=(size * 4, size * 4, 3))
        feats = rng.normal(size=(size, size, 8))
        sp = superpixel.slic_segment(image, superpixel.SlicParams(target_blocks=max(4, size)))
        params = EcrfParams.initialize(channels=8, rng=rng)

        t0 = time.perf_counter()
        out, act = ecrf_forward(feats, image, sp, params)
        t_fwd = time.perf_counter() - t0
        t0 = time.perf_counter()
        ecrf_backward(act, np.ones_like(out))
        t_bwd = time.perf_counter() - t0

        scores = rng.normal(size=(size, size, 4))
        t0 = time.perf_counter()
        densecrf.mean_field_step(scores, image, densecrf.GaussianKernelParams(), densecrf.LabelCompatibility.identity(4))
        t_mf = time.perf_counter() - t0
        t0 = time.perf_counter()
        superpixel.slic_segment(image, superpixel.SlicParams(target_blocks=max(4, size)))
        t_slic = time.perf_counter() - t0

        cells = size * size
        rows += [
            ("ecrf_forward", size, t_fwd, cells / t_fwd),
            ("ecrf_backward", size, t_bwd, cells / t_bwd),
            ("mean_field_step", size, t_mf, cells / t_mf),
            ("slic_segment", size, t_slic, 16 * cells / t_slic),
        ]
    writer = csv.writer(sys.stdout)
    writer.writerow(["op", "size", "wall_s", "cells_per_s"])
    for op, size, wall, tput in rows:
        writer.writerow([op, size, f"{wall:.6f}", f"{tput:.1f}"])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecrf", description="Boundary-aware segmentation lab")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=int(os.environ.get("ECRF_THREADS", "0")))
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.7)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("superpixel", help="SLIC segmentation of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--blocks", type=int, default=200)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--smoothing", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_superpixel)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["baseline", "joint", "ecrf"], default="baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--sp", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crf", help="CRF refinement of a checkpoint's predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["vanilla", "joint"], default="vanilla")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=0.5)
    p.add_argument("--ta", type=float, default=8.0)
    p.add_argument("--tb", type=float, default=0.25)
    p.add_argument("--tg", type=float, default=3.0)
    p.add_argument("--window", type=int, default=8)
    p.set_defaults(func=cmd_crf)

    p = sub.add_parser("bcwc", help="class-weight confusion curve")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="curve.csv")
    p.set_defaults(func=cmd_bcwc)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("angles", help="class-weight angle experiment sweep")
    p.add_argument("--sweep", type=int, default=100)
    p.add_argument("--out", default="angles.csv")
    p.set_defaults(func=cmd_angles)

    p = sub.add_parser("benchmark", help="synthetic training benchmark across modes")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--variants", nargs="*", default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("bench", help="micro-benchmarks")
    p.add_argument("--sizes", type=int, nargs="*", default=[8, 16, 24])
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    _echo_config(args)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except EcrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
