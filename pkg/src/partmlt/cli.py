"""Command-line interface.

Subcommands: render (pt / mlt / partitioned), compare (RMSE of two PFMs),
sweep (the |Y'| x radius ablation grid), toy1d (the 1D partitioning
demonstrator), and partition-report (pre-pass census CSV). All commands exit
0 on success and nonzero with a message on stderr on any error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .core import ImageBuffer, rmse
from .engine import RenderConfig, render, render_pt, run_mlt, run_partitioned
from .imageio import write_pfm, write_ppm
from .metrics import structured_noise
from .partition import build_partitions
from .path import run_prepass
from .scene import BUILTIN_NAMES, builtin_scene, load_scene
from .toy1d import Toy1DConfig, report_to_csv, run_toy1d


def _load_scene_arg(spec: str, width: int, height: int):
    if spec.startswith("builtin:"):
        return builtin_scene(spec[len("builtin:"):], width, height)
    if spec in BUILTIN_NAMES:
        return builtin_scene(spec, width, height)
    return load_scene(spec)


def _add_render_args(p: argparse.ArgumentParser):
    p.add_argument("--scene", required=True,
                   help="scene JSON path or builtin:<name> "
                        f"(builtins: {', '.join(BUILTIN_NAMES)})")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--algo", choices=("pt", "mlt", "partitioned"),
                   default="partitioned")
    p.add_argument("--mpp", type=int, default=32, help="mutations per pixel")
    p.add_argument("--spp", type=int, default=64, help="samples per pixel (pt)")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--y-size", type=int, default=129)
    p.add_argument("--radius", type=int, default=24)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--prepass-ppp", type=int, default=8)
    p.add_argument("--burn-in", type=int, default=1024)
    p.add_argument("--large-step-prob", type=float, default=0.3)
    p.add_argument("--kernel", choices=("sparse", "full"), default="sparse")
    p.add_argument("--max-depth", type=int, default=12)


def _config_from_args(args) -> RenderConfig:
    return RenderConfig(
        algorithm=args.algo, mutations_per_pixel=args.mpp, K=args.K,
        y_size=args.y_size, radius=args.radius, epsilon=args.epsilon,
        seed=args.seed, prepass_ppp=args.prepass_ppp, burn_in=args.burn_in,
        large_step_prob=args.large_step_prob, kernel=args.kernel,
        max_depth=args.max_depth, spp=args.spp,
    )


def _write_image(img: ImageBuffer, path: str):
    if path.endswith(".ppm"):
        # expose-for-display: PPM is 8-bit, so scale the HDR data first
        peak = float(np.percentile(img.pixels, 99.5))
        scaled = ImageBuffer.from_array(img.pixels / peak if peak > 0 else img.pixels)
        write_ppm(scaled, path)
    else:
        write_pfm(img, path)


def cmd_render(args) -> int:
    scene = _load_scene_arg(args.scene, args.width, args.height)
    config = _config_from_args(args)
    t0 = time.time()
    out = render(scene, config)
    dt = time.time() - t0
    _write_image(out.image, args.out)
    print(f"rendered {args.algo} {scene.camera.width}x{scene.camera.height} "
          f"in {dt:.1f}s -> {args.out}")
    if args.dump_partitions and args.algo == "partitioned":
        _dump_partitions(scene, config, Path(args.dump_partitions))
    for row in out.stats.get("chains", []):
        print(f"  chain stats: {row}")
    return 0


def _dump_partitions(scene, config, outdir: Path):
    from .engine import build_partition_guidance

    outdir.mkdir(parents=True, exist_ok=True)
    prepass = run_prepass(scene, config.prepass_ppp, config.seed,
                          config.max_depth)
    pset = build_partitions(prepass, config.K, config.memory_cap_mb)
    guidance = build_partition_guidance(prepass, pset, config.epsilon)
    for part in pset.partitions:
        tag = "complement" if part.is_complement else part.signatures[0]
        write_pfm(guidance[part.id].D, outdir / f"guidance_{tag}.pfm")
        splat = np.zeros_like(prepass.total_splat)
        for sig in part.signatures:
            if sig in prepass.splats:
                splat += prepass.splats[sig]
        write_pfm(ImageBuffer.from_array(splat / prepass.paths_per_pixel),
                  outdir / f"splat_{tag}.pfm")
    print(f"wrote per-partition guidance and splat images to {outdir}/")


def cmd_compare(args) -> int:
    from .imageio import read_pfm

    a = read_pfm(args.a)
    b = read_pfm(args.b)
    print(f"{rmse(a, b):.6g}")
    return 0


def cmd_sweep(args) -> int:
    scene = _load_scene_arg(args.scene, args.width, args.height)
    y_sizes = [int(s) for s in args.y_sizes.split(",")]
    radii = [int(s) for s in args.radii.split(",")]
    if args.reference:
        from .imageio import read_pfm
        ref = read_pfm(args.reference)
    else:
        print(f"rendering {args.ref_spp} spp reference...", file=sys.stderr)
        ref = render_pt(scene, args.ref_spp, args.seed,
                        max_depth=args.max_depth).image
    rows = []
    for y in y_sizes:
        for r in radii:
            config = _config_from_args(args)
            config.y_size = y
            config.radius = r
            config.algorithm = "partitioned"
            t0 = time.time()
            out = run_partitioned(scene, config)
            err = rmse(out.image, ref)
            noise = structured_noise(out.image, ref)
            rows.append({"y_size": y, "radius": r, "rmse": err,
                         "structured_noise": noise,
                         "seconds": time.time() - t0})
            print(f"  |Y'|={y:4d} R={r:4d} rmse={err:.6g} "
                  f"structured={noise:.6g}", file=sys.stderr)
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_toy1d(args) -> int:
    cfg = Toy1DConfig(reps=args.reps, samples=args.samples, seed=args.seed)
    report = run_toy1d(cfg)
    if args.out:
        report_to_csv(report, args.out)
        print(f"wrote per-bin CSV to {args.out}")
    s = report.summary()
    print(f"truth: low={s['truth_low']:.6g} high={s['truth_high']:.6g}")
    print(f"unpartitioned: low={s['unpart_low_mean']:.6g} "
          f"(sem {s['unpart_low_sem']:.2g}) "
          f"high={s['unpart_high_mean']:.6g} (sem {s['unpart_high_sem']:.2g})")
    print(f"partitioned:   low={s['part_low_mean']:.6g} "
          f"(sem {s['part_low_sem']:.2g}) "
          f"high={s['part_high_mean']:.6g} (sem {s['part_high_sem']:.2g})")
    print(f"variance ratio (unpartitioned/partitioned): "
          f"low={s['variance_ratio_low']:.4g} high={s['variance_ratio_high']:.4g}")
    return 0


def cmd_partition_report(args) -> int:
    scene = _load_scene_arg(args.scene, args.width, args.height)
    prepass = run_prepass(scene, args.prepass_ppp, args.seed, args.max_depth)
    pset = build_partitions(prepass, args.K)
    writer = csv.writer(open(args.out, "w", newline="") if args.out else sys.stdout)
    writer.writerow(["partition_id", "signatures", "gamma", "P", "b",
                     "reservoir_size"])
    for part in pset.partitions:
        writer.writerow([part.id, "|".join(part.signatures),
                         f"{part.gamma:.8g}", f"{part.P:.8g}", f"{part.b:.8g}",
                         part.reservoir_size])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partmlt",
                                 description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene")
    _add_render_args(p)
    p.add_argument("--out", required=True, help="output image (.pfm or .ppm)")
    p.add_argument("--dump-partitions", metavar="DIR",
                   help="also write per-partition guidance/splat images")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("compare", help="RMSE between two PFM images")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sweep", help="|Y'| x radius ablation grid")
    _add_render_args(p)
    p.add_argument("--y-sizes", default="9,33,65,129")
    p.add_argument("--radii", default="8,24,44,128")
    p.add_argument("--reference", help="reference PFM (rendered if omitted)")
    p.add_argument("--ref-spp", type=int, default=4096)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("toy1d", help="1D partitioning demonstrator")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="per-bin CSV path")
    p.set_defaults(fn=cmd_toy1d)

    p = sub.add_parser("partition-report", help="pre-pass census CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--prepass-ppp", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(fn=cmd_partition_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
