"""Command-line entry point: cluster, convert, train, eval, count, bench.

Exit codes: 0 success, 1 internal error, 2 bad input, 3 validation failure.
Set GHOSTSR_THREADS to pin the BLAS thread count (applied before numpy
loads, which is why the heavy imports live inside main()).
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env() -> None:
    threads = os.environ.get("GHOSTSR_THREADS")
    if not threads:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, threads)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghostsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--ghost", type=float, default=0.5,
                        help="ghost channel ratio in [0, 1)")
        sp.add_argument("--max-offset", type=int, default=1)
        sp.add_argument("--tau", type=float, default=1.0,
                        help="softmax temperature for learnable shifts")

    sp = sub.add_parser("cluster", help="cluster a dense checkpoint into a conversion plan")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True, help="preset name or config file")
    sp.add_argument("--out", required=True, help="plan file to write")
    add_common(sp)

    sp = sub.add_parser("convert", help="convert a dense checkpoint to its ghost version")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--plan", default=None, help="clustering plan (default: by-order wiring)")
    sp.add_argument("--out", required=True, help="ghost checkpoint to write")
    add_common(sp)

    sp = sub.add_parser("train", help="train (or overfit) a network")
    sp.add_argument("--config", required=True, help="preset name or config file")
    sp.add_argument("--hr-dir", default=None, help="directory of HR PNGs")
    sp.add_argument("--checkpoint", default=None, help="resume/convert source")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--patch", type=int, default=48)
    sp.add_argument("--lr0", type=float, default=1e-4)
    sp.add_argument("--loss", choices=("l1", "l2"), default="l1")
    sp.add_argument("--overfit", type=int, default=0,
                    help="freeze a fixed pool of N patch pairs and reuse them")
    sp.add_argument("--synthetic", action="store_true",
                    help="train on built-in synthetic images (no dataset needed)")
    sp.add_argument("--lr-cache", action="store_true",
                    help="cache LR downscales to a sibling directory of --hr-dir")
    sp.add_argument("--out-dir", required=True)
    add_common(sp)

    sp = sub.add_parser("eval", help="Y-channel PSNR/SSIM against HR images")
    sp.add_argument("--hr-dir", required=True)
    sp.add_argument("--sr-dir", default=None, help="precomputed SR images")
    sp.add_argument("--config", default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--scale", type=int, default=2)
    sp.add_argument("--out-dir", default=None, help="where to write eval.csv")
    add_common(sp)

    sp = sub.add_parser("count", help="analytic parameter / FLOPs report")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ghost", type=float, default=0.0)
    sp.add_argument("--hr", type=int, nargs=2, default=(720, 1280),
                    metavar=("H", "W"))
    sp.add_argument("--csv", action="store_true", help="emit CSV instead of text")

    sp = sub.add_parser("bench", help="CPU microbenchmark of inference kernels")
    sp.add_argument("--op", choices=("shift", "depthwise3x3", "conv3x3", "all"),
                    default="all")
    sp.add_argument("--shape", type=int, nargs=4, default=(1, 64, 360, 640),
                    metavar=("N", "C", "H", "W"))
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", action="store_true")
    return p


def _require_file(path, what) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _synthetic_images(rng, count=4, size=96):
    """Deterministic structured test images.

    Hard-edged rectangles, thin lines and near-Nyquist stripes on a smooth
    base: content a plain interpolator blurs but a trained network can
    sharpen, so super-resolution quality gaps are measurable.
    """
    import numpy as np

    from .data import bicubic_resize

    images = []
    for _ in range(count):
        base = rng.random((3, size // 8, size // 8))
        img = 0.6 * bicubic_resize(base, size, size) + 0.2
        for _ in range(10):  # hard-edged rectangles
            y0, x0 = rng.integers(0, size - 8, size=2)
            hh, ww = rng.integers(4, size // 3, size=2)
            img[:, y0 : y0 + hh, x0 : x0 + ww] = rng.random(3)[:, None, None]
        for _ in range(8):  # thin lines, 1-2 px
            color = rng.random(3)[:, None, None]
            thick = int(rng.integers(1, 3))
            if rng.integers(2):
                y0 = int(rng.integers(size - thick))
                img[:, y0 : y0 + thick, :] = color
            else:
                x0 = int(rng.integers(size - thick))
                img[:, :, x0 : x0 + thick] = color
        # one striped region near the LR Nyquist rate
        y0, x0 = rng.integers(0, size // 2, size=2)
        period = int(rng.integers(3, 5))
        stripes = (np.arange(size // 3) // period) % 2
        region = np.broadcast_to(stripes[None, None, :], (3, size // 3, size // 3))
        img[:, y0 : y0 + size // 3, x0 : x0 + size // 3] = (
            0.25 + 0.5 * region
        )
        images.append(np.clip(img, 0.0, 1.0))
    return images


def _cmd_cluster(args) -> int:
    import numpy as np

    from . import clustering as C
    from .checkpoint import load_checkpoint
    from .models import GHOST, resolve_config

    _require_file(args.checkpoint, "checkpoint")
    config = resolve_config(args.config)
    tensors, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    plans = {}
    for layer in config.conv_layers():
        if layer.annotation != GHOST:
            continue
        weight = tensors.get(f"{layer.name}.weight")
        if weight is None:
            raise FileNotFoundError(f"checkpoint lacks tensor {layer.name}.weight")
        if args.ghost == 0:
            plans[layer.name] = C.scratch_assignment(layer.c_out, 0.0)
        else:
            plans[layer.name] = C.plan_layer_from_weight(weight, args.ghost, rng)
    C.write_plan(args.out, plans, meta={
        "config": config.name, "ghost_ratio": args.ghost, "seed": args.seed,
    })
    for name, plan in plans.items():
        print(f"{name}: {len(plan.intrinsic)} intrinsic, "
              f"{len(plan.assignment)} ghost")
    print(f"wrote plan for {len(plans)} layers to {args.out}")
    return 0


def _cmd_convert(args) -> int:
    from . import clustering as C
    from .checkpoint import load_checkpoint, save_checkpoint
    from .models import convert_to_ghost, resolve_config

    _require_file(args.checkpoint, "checkpoint")
    config = resolve_config(args.config)
    tensors, _ = load_checkpoint(args.checkpoint)
    plans = None
    if args.plan is not None:
        _require_file(args.plan, "plan file")
        plans = C.read_plan(args.plan)
    net = convert_to_ghost(config, tensors, args.ghost, plans,
                           max_offset=args.max_offset, temperature=args.tau)
    save_checkpoint(args.out, net.state_dict(), net.meta())
    print(f"wrote ghost checkpoint ({args.ghost} ratio) to {args.out}")
    return 0


def _load_network(config_name, checkpoint_path, ghost, max_offset, tau):
    from .checkpoint import load_checkpoint
    from .models import Network, resolve_config

    config = resolve_config(config_name)
    tensors, meta = load_checkpoint(checkpoint_path)
    ratio = meta.get("ghost_ratio", ghost)
    net = Network(config, ratio, max_offset=meta.get("max_offset", max_offset),
                  temperature=meta.get("temperature", tau))
    net.load_state_dict(tensors)
    return net


def _cmd_train(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_dataset, sample_patches
    from .models import Network, convert_to_ghost, resolve_config
    from .train import OptimizerSpec, train

    config = resolve_config(args.config)
    rng = np.random.default_rng(args.seed)
    lr_images = None
    if args.synthetic:
        images = _synthetic_images(rng)
    else:
        if not args.hr_dir:
            raise FileNotFoundError("either --hr-dir or --synthetic is required")
        images, lr_images = load_dataset(args.hr_dir, config.scale,
                                         lr_cache=args.lr_cache)

    if args.checkpoint is not None:
        _require_file(args.checkpoint, "checkpoint")
        tensors, meta = load_checkpoint(args.checkpoint)
        if meta.get("ghost_ratio", 0.0) == args.ghost and args.ghost > 0:
            net = Network(config, args.ghost, args.max_offset, args.tau)
            net.load_state_dict(tensors)
        else:
            net = convert_to_ghost(config, tensors, args.ghost,
                                   max_offset=args.max_offset, temperature=args.tau)
    else:
        net = Network(config, args.ghost, args.max_offset, args.tau)
        net.init_random(rng)

    pool = args.overfit if args.overfit else max(args.batch * 32, 128)
    pairs = sample_patches(images, config.scale, args.patch, pool, rng,
                           augment=not args.overfit, lr_images=lr_images)
    log = train(net, pairs, steps=args.steps, opt_spec=OptimizerSpec(lr0=args.lr0),
                batch=args.batch, loss_kind=args.loss, seed=args.seed)

    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "train_log.csv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(log.render_csv())
    ckpt_path = os.path.join(args.out_dir, "trained.gsr")
    save_checkpoint(ckpt_path, net.state_dict(), net.meta())
    net.freeze()
    frozen_path = os.path.join(args.out_dir, "frozen.gsr")
    save_checkpoint(frozen_path, net.state_dict(), net.meta())
    print(f"final loss {log.losses[-1]:.6f} after {args.steps} steps")
    print(f"wrote {log_path}, {ckpt_path} and {frozen_path}")
    return 0


def _cmd_eval(args) -> int:
    from .data import (
        bicubic_downscale,
        bicubic_resize,
        list_images,
        load_image,
        y_metrics,
    )
    from .models import forward_sr

    _require_file(args.hr_dir, "HR directory")
    hr_paths = list_images(args.hr_dir)
    if not hr_paths:
        raise FileNotFoundError(f"no PNG images in {args.hr_dir}")

    net = None
    sr_paths = None
    if args.sr_dir is not None:
        _require_file(args.sr_dir, "SR directory")
        sr_paths = {p.name: p for p in list_images(args.sr_dir)}
    elif args.checkpoint is not None and args.config is not None:
        net = _load_network(args.config, args.checkpoint, args.ghost,
                            args.max_offset, args.tau)
    else:
        raise FileNotFoundError("eval needs --sr-dir or (--config and --checkpoint)")

    scale = net.config.scale if net is not None else args.scale
    rows = ["image,psnr,ssim,bicubic_psnr,bicubic_ssim"]
    sums = [0.0, 0.0, 0.0, 0.0]
    finite = [0, 0]
    for path in hr_paths:
        hr = load_image(path)
        h, w = hr.shape[-2:]
        hr = hr[:, : (h // scale) * scale, : (w // scale) * scale]
        lr = bicubic_downscale(hr, scale)
        baseline = bicubic_resize(lr, hr.shape[-2], hr.shape[-1])
        if net is not None:
            sr = forward_sr(net, lr)
        else:
            sp = sr_paths.get(path.name)
            if sp is None:
                raise FileNotFoundError(f"no SR image for {path.name}")
            sr = load_image(sp)
            if sr.shape != hr.shape:
                sr = sr[:, : hr.shape[-2], : hr.shape[-1]]
        p, s = y_metrics(sr, hr, shave=scale)
        bp, bs = y_metrics(baseline, hr, shave=scale)
        rows.append(f"{path.name},{p:.4f},{s:.6f},{bp:.4f},{bs:.6f}")
        print(f"{path.name}: PSNR {p:.2f} dB / SSIM {s:.4f}   "
              f"(bicubic {bp:.2f} / {bs:.4f})")
        if p != float("inf"):
            sums[0] += p
            finite[0] += 1
        sums[1] += s
        if bp != float("inf"):
            sums[2] += bp
            finite[1] += 1
        sums[3] += bs
    n = len(hr_paths)
    mean_p = sums[0] / finite[0] if finite[0] else float("inf")
    mean_bp = sums[2] / finite[1] if finite[1] else float("inf")
    print(f"mean: PSNR {mean_p:.2f} dB / SSIM {sums[1] / n:.4f}   "
          f"(bicubic {mean_bp:.2f} / {sums[3] / n:.4f})")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "eval.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    return 0


def _cmd_count(args) -> int:
    from .counting import count
    from .models import resolve_config

    config = resolve_config(args.config)
    report = count(config, args.ghost, tuple(args.hr))
    sys.stdout.write(report.render_csv() if args.csv else report.render())
    return 0


def _cmd_bench(args) -> int:
    from .bench import CSV_HEADER, bench

    ops = ("shift", "depthwise3x3", "conv3x3") if args.op == "all" else (args.op,)
    results = [bench(op, tuple(args.shape), reps=args.reps, seed=args.seed)
               for op in ops]
    if args.csv:
        print(CSV_HEADER)
        for r in results:
            print(r.render_csv_row())
    else:
        for r in results:
            print(r.render())
    return 0


_COMMANDS = {
    "cluster": _cmd_cluster,
    "convert": _cmd_convert,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count": _cmd_count,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    _apply_thread_env()
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        from .models import ConfigError

        if isinstance(exc, ConfigError):
            print(f"validation error: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"error: missing entry {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
