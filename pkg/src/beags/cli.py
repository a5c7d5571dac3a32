"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
failure. Arguments are validated before anything is written; once they
parse, ``effective_config.json`` goes to the output directory first.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import metrics, occupancy, pipeline, raster, scenegen, semantics, trainer
from .core import ConfigurationError

log = logging.getLogger("beags")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_K = (250, 500, 1000, 2000, 3000, 4000, 5000)
SWEEP_Z = (1, 2, 5, 10, 20, 50)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        # only --help and --version reach here
        if message:
            sys.stderr.write(message)
        raise SystemExit(status)


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with loss/optimizer settings")
    common.add_argument("--seed", type=_seed, help="RNG seed (overrides the config)")
    common.add_argument("--threads", type=_positive, default=1, help="rasterizer threads")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = _Parser(prog="beags", description="Boundary- and occupancy-aware surfel segmentation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen", parents=[common], help="generate a benchmark directory")
    s.add_argument("spec", nargs="?", help="scene spec JSON (default: the built-in benchmark)")

    s = sub.add_parser("pretrain", parents=[common], help="RGB pretraining from the perturbed start")
    s.add_argument("data", help="benchmark directory written by gen")
    s.add_argument("scene", nargs="?", help="start scene (default: DATA/init.txt)")

    s = sub.add_parser("refine", parents=[common], help="mask fusion, assignment and refinement")
    s.add_argument("data")
    s.add_argument("scene", help="pretrained scene file")
    s.add_argument("--no-reprojection", action="store_true", help="use the training masks as given")

    s = sub.add_parser("render", parents=[common], help="write color, semantic and raw channels")
    s.add_argument("data")
    s.add_argument("scene")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--views", type=_int_list, help="comma-separated view indices (default: all)")

    s = sub.add_parser("extract", parents=[common], help="per-class subset renders of the test views")
    s.add_argument("data")
    s.add_argument("scene")
    s.add_argument("--views", type=_int_list)

    s = sub.add_parser("eval", parents=[common], help="extracted and rendered metrics")
    s.add_argument("data")
    s.add_argument("scene")
    s.add_argument("--id", default=None, help="scene id in the report (default: file stem)")

    s = sub.add_parser("sweep", parents=[common], help="k and Z sensitivity of the full method")
    s.add_argument("data")
    s.add_argument("scene", nargs="?", help="pretrained scene (default: pretrain first)")
    s.add_argument("--k-values", type=_int_list, default=list(SWEEP_K))
    s.add_argument("--z-values", type=_int_list, default=list(SWEEP_Z))

    s = sub.add_parser("benchmark", parents=[common],
                       help="pretrain once, then vanilla / B-only / full on one benchmark")
    s.add_argument("data", nargs="?", help="benchmark directory (default: generate in memory)")
    return p


# ------------------------------------------------------------------ helpers

def load_config(args):
    cfg = trainer.LossConfig()
    if args.config:
        with open(args.config) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{args.config}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigurationError(f"{args.config}: expected a JSON object")
        cfg = trainer.LossConfig.from_dict(d)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(metrics._jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_effective_config(args, cfg):
    eff = cfg.to_dict()
    eff["command"] = args.command
    eff["threads"] = args.threads
    eff["backend"] = raster.BACKEND
    for key in ("spec", "data", "scene"):
        v = getattr(args, key, None)
        if v is not None:
            eff[f"{key}_path"] = os.path.abspath(v)
    _write_json(os.path.join(args.out, "effective_config.json"), eff)
    return eff


def _views(requested, n):
    if requested is None:
        return list(range(n))
    bad = [v for v in requested if not 0 <= v < n]
    if bad:
        raise ConfigurationError(f"view indices {bad} out of range 0..{n - 1}")
    return requested


def _progress(args):
    if not args.verbose:
        return None

    def report(row):
        loss = row["total"] if "total" in row else row["train_l1"]
        log.info("iteration %d: loss %.6f", row["iteration"], loss)
    return report


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg):
    spec = scenegen.SceneSpec.from_json(args.spec) if args.spec else scenegen.default_spec()
    if args.seed is not None:
        spec.seed = args.seed
    bench = pipeline.build_benchmark(spec)
    pipeline.save_benchmark(bench, args.out)
    log.info("benchmark with %d surfels and %d views written to %s",
             len(bench.generated.scene), len(bench.data.train_cams), args.out)


def cmd_pretrain(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    start = scenegen.load_scene(args.scene) if args.scene else bench.init
    scene, rep = trainer.pretrain(start, bench.data, cfg, _progress(args))
    rep["psnr"] = trainer.heldout_psnr(scene, bench.data)
    scenegen.save_scene(os.path.join(args.out, "pretrained.txt"), scene)
    _write_json(os.path.join(args.out, "pretrain_report.json"), rep)


def cmd_refine(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    scene = scenegen.load_scene(args.scene)
    out, rep, prep = trainer.refine(scene, bench.data, cfg, _progress(args),
                                    use_reprojection=not args.no_reprojection)
    scenegen.save_scene(os.path.join(args.out, "refined.txt"), out)
    scenegen.save_scene(os.path.join(args.out, "assigned.txt"), prep.scene)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    for v, m in enumerate(prep.masks.refined):
        semantics.write_mask_png(os.path.join(args.out, "masks", f"refined_{v:03d}.png"), m)
    _write_json(os.path.join(args.out, "refine_report.json"), rep)


def cmd_render(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    scene = scenegen.load_scene(args.scene)
    if args.split == "train":
        cams, sup = bench.data.train_cams, bench.data.masks
    else:
        cams, sup = bench.data.test_cams, bench.test_rendered
    for v in _views(args.views, len(cams)):
        out = raster.render(scene, cams[v], sup[v])
        stem = os.path.join(args.out, f"{args.split}_{v:03d}")
        raster.write_png_color(stem + "_color.png", out.color)
        raster.write_png_labels(stem + "_semantic.png", out.semantic)
        raster.write_raw(stem + "_depth.raw", out.depth)
        raster.write_raw(stem + "_alpha.raw", out.alpha)
        raster.write_raw(stem + "_boundary.raw", out.boundary)


def cmd_extract(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    scene = scenegen.load_scene(args.scene)
    cams = bench.data.test_cams
    for c in bench.classes:
        for v in _views(args.views, len(cams)):
            out = raster.render_class_subset(scene, cams[v], c)
            stem = os.path.join(args.out, f"class{c}_{v:03d}")
            raster.write_png_color(stem + "_color.png", out.color)
            semantics.write_mask_png(stem + "_mask.png", (out.alpha >= cfg.alpha_threshold).astype(np.uint8))


def cmd_eval(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    scene = scenegen.load_scene(args.scene)
    sid = args.id or os.path.splitext(os.path.basename(args.scene))[0]
    rep = pipeline.evaluate(scene, bench, sid)
    rep.to_json(os.path.join(args.out, "metrics.json"))
    table = rep.table()
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(table)
    sys.stdout.write(table)


def cmd_sweep(args, cfg):
    bench = pipeline.load_benchmark(args.data)
    if args.scene:
        pre = scenegen.load_scene(args.scene)
    else:
        pre, _ = trainer.pretrain(bench.init, bench.data, cfg, _progress(args))
    prep = trainer.prepare_refinement(pre, bench.data, cfg)
    grids = {cfg.k: prep.grids}
    cache = {}

    def score(k, Z):
        if (k, Z) not in cache:
            if k not in grids:
                grids[k] = occupancy.build_grids(prep.scene, bench.data.train_cams, k,
                                                 n_classes=bench.data.n_classes, seed=cfg.seed)
            p = trainer.Prepared(prep.scene, prep.masks, grids[k])
            scene, _ = trainer.optimize(p, bench.data, cfg.replace(k=k, Z=Z), _progress(args))
            ev = pipeline.evaluate(scene, bench, f"k{k}_Z{Z}")
            cache[(k, Z)] = (ev.psnr_after, ev.extracted["mean"]["iou"], ev.extracted["mean"]["biou"],
                             float(grids[k][next(iter(grids[k]))].size) if grids[k] else float("nan"))
            log.info("k=%d Z=%d: IoU %.4f", k, Z, cache[(k, Z)][1])
        return cache[(k, Z)]

    rows = [("k", k, cfg.Z, *score(k, cfg.Z)) for k in args.k_values]
    rows += [("Z", cfg.k, Z, *score(cfg.k, Z)) for Z in args.z_values]
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "k", "Z", "PSNR", "IoU", "BIoU", "voxel_size"])
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(float(x)) for x in r[3:]])


def cmd_benchmark(args, cfg):
    if args.data:
        bench = pipeline.load_benchmark(args.data)
    else:
        spec = scenegen.default_spec(cfg.seed)
        bench = pipeline.build_benchmark(spec)
    report, scenes = pipeline.run(bench, cfg, callback=_progress(args))
    pipeline.write_report(os.path.join(args.out, "report.json"), report)
    for name, scene in scenes.items():
        scenegen.save_scene(os.path.join(args.out, f"{name}.txt"), scene)
    table = pipeline.condition_table(report)
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(table)
    sys.stdout.write(table)


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "refine": cmd_refine, "render": cmd_render,
            "extract": cmd_extract, "eval": cmd_eval, "sweep": cmd_sweep, "benchmark": cmd_benchmark}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        raster.set_num_threads(args.threads)
        os.makedirs(args.out, exist_ok=True)
        write_effective_config(args, cfg)
        COMMANDS[args.command](args, cfg)
    except trainer.NumericalError as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return EXIT_NUMERIC
    except (ConfigurationError, scenegen.SceneFormatError, OSError, ValueError, KeyError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
