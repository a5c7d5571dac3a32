"""RGB pretraining and the segmentation-aware refinement stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import Camera, ConfigurationError, NumericalError, SurfelScene, normalize_quats
from . import occupancy, raster, semantics
from .raster import ParamGrads

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lambda_bound: float = 0.5
    lambda_occ: float = 10.0
    Z: int = 20
    k: int = 2000
    refine_iters: int = 3000
    pretrain_iters: int = 5000
    lambda_depth: float = 0.0
    lambda_norm: float = 0.0
    seed: int = 0
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    occ_mode: str = "surface"
    alpha_threshold: float = 0.5
    log_every: int = 100

    def __post_init__(self):
        for name in ("lambda_bound", "lambda_occ", "lambda_depth", "lambda_norm"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.lambda_depth or self.lambda_norm:
            raise ConfigurationError("depth-distortion and normal-consistency terms are not implemented")
        if self.Z < 1 or self.k < 1:
            raise ConfigurationError("Z and k must be at least 1")
        if self.refine_iters < 0 or self.pretrain_iters < 0:
            raise ConfigurationError("iteration counts must be non-negative")
        if self.occ_mode not in ("surface", "opacity"):
            raise ConfigurationError(f"occ_mode must be 'surface' or 'opacity', got {self.occ_mode!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class Dataset:
    train_cams: List[Camera]
    train_images: List[np.ndarray]
    masks: Optional[List[np.ndarray]] = None
    test_cams: List[Camera] = field(default_factory=list)
    test_images: List[np.ndarray] = field(default_factory=list)
    n_classes: Optional[int] = None

    def __post_init__(self):
        if not self.train_cams:
            raise ConfigurationError("dataset has no training views")
        if len(self.train_cams) != len(self.train_images):
            raise ConfigurationError("one training image per camera required")
        if len(self.test_cams) != len(self.test_images):
            raise ConfigurationError("one test image per camera required")

    @property
    def extent(self):
        c = np.array([cam.center for cam in self.train_cams])
        return 1.1 * float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1)))


# ------------------------------------------------------------------ losses

def rgb_loss(out_or_color, gt):
    color = out_or_color.color if hasattr(out_or_color, "color") else np.asarray(out_or_color)
    gt = np.asarray(gt, dtype=np.float64)
    if color.shape != gt.shape:
        raise ConfigurationError(f"image shape {color.shape} does not match target {gt.shape}")
    diff = color - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def total_loss(scene: SurfelScene, cam: Camera, gt, mask=None, grids=None, cfg: LossConfig = None,
               iteration=0, phase="refine"):
    """Weighted sum of the photometric, boundary and occupancy terms.

    Returns ``(value, grads, parts)``. In the pretraining phase both
    regularizer weights are treated as zero.
    """
    cfg = cfg or LossConfig()
    lb = cfg.lambda_bound if phase == "refine" else 0.0
    lo = cfg.lambda_occ if phase == "refine" else 0.0
    if lo > 0 and grids is None:
        raise ConfigurationError("occupancy weight is positive but no voxel grids were given")
    sup = mask if lb > 0 else None
    out = raster.render(scene, cam, sup)
    l_rgb, d_color = rgb_loss(out, gt)
    upstream = {"color": d_color}
    l_bound = 0.0
    if sup is not None:
        m = np.asarray(mask) >= 0
        n_sup = int(m.sum())
        if n_sup:
            l_bound = float(out.boundary[m].sum() / n_sup)
            upstream["boundary"] = np.where(m, lb / n_sup, 0.0)
    grads = raster.backward(scene, cam, sup, upstream, out)
    l_occ = 0.0
    if lo > 0:
        l_occ, g_occ = occupancy.occupancy_loss(scene, grids, cfg.Z,
                                                occupancy.iteration_seed(cfg.seed, iteration),
                                                mode=cfg.occ_mode)
        grads = grads + g_occ * lo
    total = l_rgb + lb * l_bound + lo * l_occ
    return total, grads, {"rgb": l_rgb, "bound": l_bound, "occ": l_occ, "out": out}


# --------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: dict
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    skipped: int = 0

    @classmethod
    def create(cls, scene: SurfelScene, cfg: LossConfig, extent=1.0):
        lr = {"means": cfg.lr_position * extent, "quats": cfg.lr_rotation,
              "log_scales": cfg.lr_scale, "opacity_logits": cfg.lr_opacity, "colors": cfg.lr_color}
        m = {f: np.zeros_like(getattr(scene, f)) for f in SurfelScene.PARAM_FIELDS}
        v = {f: np.zeros_like(getattr(scene, f)) for f in SurfelScene.PARAM_FIELDS}
        return cls(lr, m, v)


def optimizer_step(scene: SurfelScene, grads: ParamGrads, state: OptimizerState):
    """One Adam update in place; non-finite gradient entries are skipped and counted."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for f in SurfelScene.PARAM_FIELDS:
        g = getattr(grads, f)
        p = getattr(scene, f)
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match {f} {p.shape}")
        bad = ~np.isfinite(g)
        if bad.any():
            state.skipped += int(bad.sum())
            g = np.where(bad, 0.0, g)
        m = np.where(bad, state.m[f], b1 * state.m[f] + (1 - b1) * g)
        v = np.where(bad, state.v[f], b2 * state.v[f] + (1 - b2) * g * g)
        state.m[f], state.v[f] = m, v
        upd = state.lr[f] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        setattr(scene, f, p - np.where(bad, 0.0, upd))
    scene.quats = normalize_quats(scene.quats)
    return scene, state


# ---------------------------------------------------------------- schedule

def view_schedule(n_views, n_iters, seed):
    """Seeded shuffled passes over the training views."""
    rng = np.random.default_rng(seed)
    order = []
    while len(order) < n_iters:
        order.extend(rng.permutation(n_views).tolist())
    return order[:n_iters]


def heldout_psnr(scene, data: Dataset):
    if not data.test_cams:
        return float("nan")
    from .metrics import psnr as _psnr
    return float(np.mean([_psnr(raster.render(scene, c).color, img)
                          for c, img in zip(data.test_cams, data.test_images)]))


def _check(value, what, it):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} loss at iteration {it}")


def pretrain(scene: SurfelScene, data: Dataset, cfg: LossConfig, callback=None):
    """RGB-only optimization; returns ``(scene, log)`` where log rows are (iteration, train loss, test PSNR)."""
    scene = scene.copy().normalize()
    state = OptimizerState.create(scene, cfg, data.extent)
    history = []
    running = []
    for it, v in enumerate(view_schedule(len(data.train_cams), cfg.pretrain_iters, cfg.seed)):
        val, grads, _ = total_loss(scene, data.train_cams[v], data.train_images[v], cfg=cfg,
                                   iteration=it, phase="pretrain")
        _check(val, "photometric", it)
        running.append(val)
        optimizer_step(scene, grads, state)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            row = {"iteration": it + 1, "train_l1": float(np.mean(running)),
                   "test_psnr": heldout_psnr(scene, data)}
            running = []
            history.append(row)
            if callback:
                callback(row)
    return scene, {"history": history, "skipped_updates": state.skipped}


def labels_digest(scene):
    return hashlib.sha256(np.ascontiguousarray(scene.labels, dtype="<i8").tobytes()).hexdigest()


@dataclass
class Prepared:
    scene: SurfelScene
    masks: semantics.SemanticMaskSet
    grids: dict


def prepare_refinement(scene: SurfelScene, data: Dataset, cfg: LossConfig, use_reprojection=True):
    """Mask fusion, class assignment and voxel grids, in that order."""
    if data.masks is None:
        raise ConfigurationError("refinement needs per-view training masks")
    n_classes = data.n_classes or max(int(np.max(m)) for m in data.masks) + 1
    renders = [raster.render(scene, cam) for cam in data.train_cams]
    if use_reprojection:
        mset = semantics.refine_masks(scene, data.train_cams, data.masks, n_classes, renders)
    else:
        mset = semantics.SemanticMaskSet(data.masks, n_classes, None, [np.asarray(m) for m in data.masks])
    assigned = semantics.assign_classes(scene, data.train_cams, mset.refined, n_classes)
    grids = occupancy.build_grids(assigned, data.train_cams, cfg.k, n_classes=n_classes,
                                  seed=cfg.seed)
    return Prepared(assigned, mset, grids)


def mean_boundary(scene, data: Dataset, refined):
    vals = []
    for cam, m in zip(data.train_cams, refined):
        out = raster.render(scene, cam, m)
        vals.append(out.mean_boundary(m))
    return float(np.mean(vals))


def optimize(prep: Prepared, data: Dataset, cfg: LossConfig, callback=None):
    """Refinement iterations on a prepared scene; returns ``(scene, report)``."""
    scene = prep.scene.copy()
    refined = prep.masks.refined
    grids = prep.grids
    digest0 = occupancy.grids_digest(grids)
    label0 = labels_digest(scene)
    diag_seed = occupancy.iteration_seed(cfg.seed, 0x5EED)
    before = {"psnr": heldout_psnr(scene, data),
              "l_bound": mean_boundary(scene, data, refined),
              "unseen_mass": occupancy.unseen_mass(scene, grids, cfg.Z, diag_seed)}
    state = OptimizerState.create(scene, cfg, data.extent)
    history = []
    acc = {"total": [], "rgb": [], "bound": [], "occ": []}
    sched = view_schedule(len(data.train_cams), cfg.refine_iters, cfg.seed + 1)
    for it, v in enumerate(sched):
        val, grads, parts = total_loss(scene, data.train_cams[v], data.train_images[v], refined[v],
                                       grids, cfg, iteration=it, phase="refine")
        _check(val, "total", it)
        for key in ("rgb", "bound", "occ"):
            acc[key].append(parts[key])
        acc["total"].append(val)
        optimizer_step(scene, grads, state)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            row = {"iteration": it + 1, **{k: float(np.mean(x)) for k, x in acc.items()}}
            acc = {k: [] for k in acc}
            history.append(row)
            if callback:
                callback(row)
    after = {"psnr": heldout_psnr(scene, data),
             "l_bound": mean_boundary(scene, data, refined),
             "unseen_mass": occupancy.unseen_mass(scene, grids, cfg.Z, diag_seed)}
    if occupancy.grids_digest(grids) != digest0:
        raise RuntimeError("voxel grids changed during refinement")
    if labels_digest(scene) != label0:
        raise RuntimeError("class labels changed during refinement")
    report = {
        "psnr_before": before["psnr"], "psnr_after": after["psnr"],
        "l_bound_before": before["l_bound"], "l_bound_after": after["l_bound"],
        "l_occ_before": before["unseen_mass"], "l_occ_after": after["unseen_mass"],
        "unseen_mass_before": before["unseen_mass"], "unseen_mass_after": after["unseen_mass"],
        "voxel_size": float(next(iter(grids.values())).size) if grids else float("nan"),
        "grid_meta": next(iter(grids.values())).meta if grids else {},
        "grids_digest": digest0, "labels_digest": label0,
        "skipped_updates": state.skipped, "history": history,
    }
    return scene, report


def refine(scene: SurfelScene, data: Dataset, cfg: LossConfig, callback=None, use_reprojection=True):
    """Full refinement pipeline; returns ``(scene, report, prepared)``."""
    prep = prepare_refinement(scene, data, cfg, use_reprojection)
    out, report = optimize(prep, data, cfg, callback)
    return out, report, prep
