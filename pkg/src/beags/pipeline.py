"""Synthetic benchmark: data assembly, the ablation runs and their report.

One pretraining run is shared by three conditions: ``vanilla`` (class
assignment only), ``b_only`` (boundary term, no occupancy term) and
``full``. Reports hold no timings, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import metrics, occupancy, raster, scenegen, semantics, trainer
from .core import Camera, SurfelScene

log = logging.getLogger(__name__)

CONDITIONS = ("vanilla", "b_only", "full")
SPIKE_OPACITY = 0.05


@dataclass
class Benchmark:
    spec: scenegen.SceneSpec
    generated: scenegen.GeneratedScene
    init: SurfelScene
    data: trainer.Dataset
    oracle_masks: List[np.ndarray]
    corrupted_views: List[int]
    test_rendered: List[np.ndarray]
    test_extracted: Dict[int, list]

    @property
    def classes(self):
        return sorted(self.test_extracted)


def build_benchmark(spec: scenegen.SceneSpec) -> Benchmark:
    """Scene, cameras, clean target images, corrupted training masks and test ground truth."""
    gen = scenegen.generate_scene(spec)
    train = scenegen.orbit_cameras(spec)
    test = scenegen.test_cameras(spec)
    # the world is the artifact-free scene; the artifacts live only in the reconstruction
    train_imgs = [raster.render(gen.clean, c).color for c in train]
    test_imgs = [raster.render(gen.clean, c).color for c in test]
    oracle, _ = scenegen.render_gt_masks(gen.clean, train, classes=[])
    masks, views = scenegen.corrupt_masks(oracle, spec.mask_corruption, spec.seed + 1)
    test_rendered, test_extracted = scenegen.render_gt_masks(gen.clean, test)
    data = trainer.Dataset(train, train_imgs, masks, test, test_imgs, spec.n_classes)
    init = scenegen.perturb(gen.scene, spec, spec.seed + 2)
    return Benchmark(spec, gen, init, data, oracle, views, test_rendered, test_extracted)


# ------------------------------------------------------------------ scoring

def mask_iou_table(masks, oracle, views, classes):
    """Mean per-class IoU of ``masks`` against ``oracle`` over ``views``."""
    rows = {}
    for c in classes:
        rows[c] = float(np.mean([metrics.binary_iou_acc(masks[v] == c, oracle[v] == c)[0] for v in views]))
    return {"classes": rows, "mean": float(np.mean(list(rows.values())))}


def spike_status(scene: SurfelScene, grids, kind, Z, seed):
    """How many spike surfels end faded or fully supported."""
    idx = np.flatnonzero(kind == scenegen.KIND_SPIKE)
    if idx.size == 0:
        return {"count": 0, "resolved": 0, "fraction": 1.0}
    samples = occupancy.sample_surfels(scene, Z, seed)
    q = occupancy.unseen_flags(scene, grids, samples)
    faded = scene.opacities[idx] < SPIKE_OPACITY
    supported = ~q[idx].any(axis=1)
    ok = faded | supported
    return {"count": int(idx.size), "resolved": int(ok.sum()), "fraction": float(ok.mean()),
            "max_opacity": float(scene.opacities[idx].max())}


def evaluate(scene: SurfelScene, bench: Benchmark, scene_id="benchmark"):
    ext = metrics.eval_extracted(scene, bench.data.test_cams, bench.test_extracted)
    ren = metrics.eval_rendered(scene, bench.data.test_cams, bench.test_rendered, bench.classes)
    rep = metrics.MetricReport(scene_id, ext, ren)
    rep.psnr_after = trainer.heldout_psnr(scene, bench.data)
    return rep


# ------------------------------------------------------------------ running

def run(bench: Benchmark, cfg: trainer.LossConfig, conditions=CONDITIONS, callback=None,
        pretrained: SurfelScene = None):
    """Pretrain (unless given), prepare once, then refine for each condition.

    Returns ``(report dict, {condition: scene})``.
    """
    report = {"config": cfg.to_dict(), "spec": bench.spec.to_dict(),
              "corrupted_views": list(bench.corrupted_views)}
    if pretrained is None:
        pretrained, plog = trainer.pretrain(bench.init, bench.data, cfg, callback)
        report["pretrain"] = plog
    prep = trainer.prepare_refinement(pretrained, bench.data, cfg)
    classes = bench.classes
    views = bench.corrupted_views
    report["reprojection"] = {
        "corrupted": mask_iou_table(bench.data.masks, bench.oracle_masks, views, classes),
        "refined": mask_iou_table(prep.masks.refined, bench.oracle_masks, views, classes),
    }
    diag = occupancy.iteration_seed(cfg.seed, 0x5EED)
    report["pretrained_unseen_mass"] = occupancy.unseen_mass(prep.scene, prep.grids, cfg.Z, diag)
    report["grid_meta"] = next(iter(prep.grids.values())).meta if prep.grids else {}
    report["grids_digest"] = occupancy.grids_digest(prep.grids)
    oracle = bench.generated.oracle
    kind = bench.generated.kind
    surf = kind == scenegen.KIND_SURFACE
    report["assignment"] = {
        "surface_agreement": float(np.mean(prep.scene.labels[surf] == oracle[surf])),
        "labels": {scenegen.KIND_NAMES[k]: np.bincount(prep.scene.labels[kind == k],
                                                       minlength=bench.spec.n_classes).tolist()
                   for k in sorted(scenegen.KIND_NAMES) if np.any(kind == k)},
    }
    scenes = {}
    conds = {}
    for name in conditions:
        if name == "vanilla":
            scene, refine_rep = prep.scene.copy(), None
        elif name == "b_only":
            scene, refine_rep = trainer.optimize(prep, bench.data, cfg.replace(lambda_occ=0.0), callback)
        elif name == "full":
            scene, refine_rep = trainer.optimize(prep, bench.data, cfg, callback)
        else:
            raise ValueError(f"unknown condition {name!r}")
        ev = evaluate(scene, bench, name)
        ev.unseen_mass_before = report["pretrained_unseen_mass"]
        ev.unseen_mass_after = occupancy.unseen_mass(scene, prep.grids, cfg.Z, diag)
        ev.psnr_before = trainer.heldout_psnr(prep.scene, bench.data)
        ev.extra["spikes"] = spike_status(scene, prep.grids, kind, cfg.Z, diag)
        if refine_rep is not None:
            ev.extra["refine"] = {k: v for k, v in refine_rep.items() if k != "grid_meta"}
        conds[name] = ev.to_dict()
        scenes[name] = scene
        log.info("%s: extracted IoU %.4f", name, ev.extracted["mean"]["iou"])
    report["conditions"] = conds
    return report, scenes


def condition_table(report):
    """Plain-text table with one row per condition of a :func:`run` report."""
    rows = [metrics.MetricReport(**d) for d in report["conditions"].values()]
    return metrics.format_table(rows)


def report_bytes(report) -> bytes:
    return (json.dumps(metrics._jsonable(report), indent=2, sort_keys=True) + "\n").encode()


def write_report(path, report):
    data = report_bytes(report)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


# --------------------------------------------------------------- storage

def save_benchmark(bench: Benchmark, out):
    """Directory layout read back by :func:`load_benchmark`.

    Target images are kept as float64 ``.npy`` so a reloaded benchmark
    trains on exactly the same values; PNGs are previews.
    """
    os.makedirs(os.path.join(out, "train"), exist_ok=True)
    os.makedirs(os.path.join(out, "test"), exist_ok=True)
    with open(os.path.join(out, "spec.json"), "w") as fh:
        json.dump(bench.spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    g = bench.generated
    scenegen.save_scene(os.path.join(out, "scene.txt"), g.scene)
    scenegen.save_scene(os.path.join(out, "clean.txt"), g.clean)
    scenegen.save_scene(os.path.join(out, "init.txt"), bench.init)
    np.savetxt(os.path.join(out, "kinds.txt"), g.kind, fmt="%d")
    d = bench.data
    scenegen.save_cameras(os.path.join(out, "train_cameras.json"), d.train_cams)
    scenegen.save_cameras(os.path.join(out, "test_cameras.json"), d.test_cams)
    for v, (img, m, o) in enumerate(zip(d.train_images, d.masks, bench.oracle_masks)):
        np.save(os.path.join(out, "train", f"image_{v:03d}.npy"), img)
        raster.write_png_color(os.path.join(out, "train", f"image_{v:03d}.png"), img)
        semantics.write_mask_png(os.path.join(out, "train", f"mask_{v:03d}.png"), m)
        semantics.write_mask_png(os.path.join(out, "train", f"oracle_{v:03d}.png"), o)
    for v, (img, m) in enumerate(zip(d.test_images, bench.test_rendered)):
        np.save(os.path.join(out, "test", f"image_{v:03d}.npy"), img)
        raster.write_png_color(os.path.join(out, "test", f"image_{v:03d}.png"), img)
        semantics.write_mask_png(os.path.join(out, "test", f"rendered_{v:03d}.png"), m)
        for c in bench.classes:
            semantics.write_mask_png(os.path.join(out, "test", f"extracted_c{c}_{v:03d}.png"),
                                     bench.test_extracted[c][v].astype(np.uint8))
    with open(os.path.join(out, "benchmark.json"), "w") as fh:
        json.dump({"corrupted_views": list(bench.corrupted_views), "classes": bench.classes,
                   "n_classes": bench.spec.n_classes}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_benchmark(path) -> Benchmark:
    spec = scenegen.SceneSpec.from_json(os.path.join(path, "spec.json"))
    with open(os.path.join(path, "benchmark.json")) as fh:
        meta = json.load(fh)
    scene = scenegen.load_scene(os.path.join(path, "scene.txt"))
    clean = scenegen.load_scene(os.path.join(path, "clean.txt"))
    init = scenegen.load_scene(os.path.join(path, "init.txt"))
    kind = np.atleast_1d(np.loadtxt(os.path.join(path, "kinds.txt"), dtype=np.int64))
    gen = scenegen.GeneratedScene(scene, clean, kind, scene.labels.copy())
    train = scenegen.load_cameras(os.path.join(path, "train_cameras.json"))
    test = scenegen.load_cameras(os.path.join(path, "test_cameras.json"))
    tr = os.path.join(path, "train")
    te = os.path.join(path, "test")
    imgs = [np.load(os.path.join(tr, f"image_{v:03d}.npy")) for v in range(len(train))]
    masks = [semantics.read_mask_png(os.path.join(tr, f"mask_{v:03d}.png")) for v in range(len(train))]
    oracle = [semantics.read_mask_png(os.path.join(tr, f"oracle_{v:03d}.png")) for v in range(len(train))]
    timgs = [np.load(os.path.join(te, f"image_{v:03d}.npy")) for v in range(len(test))]
    rendered = [semantics.read_mask_png(os.path.join(te, f"rendered_{v:03d}.png")) for v in range(len(test))]
    extracted = {int(c): [semantics.read_mask_png(os.path.join(te, f"extracted_c{c}_{v:03d}.png")) > 0
                          for v in range(len(test))] for c in meta["classes"]}
    data = trainer.Dataset(train, imgs, masks, test, timgs, int(meta["n_classes"]))
    return Benchmark(spec, gen, init, data, oracle, list(meta["corrupted_views"]), rendered, extracted)
