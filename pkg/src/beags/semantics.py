"""Multiview mask refinement and per-surfel class assignment.

Masks are lifted to 3D with rendered depth, reprojected into every view and
fused by majority vote. Surfels then take the class under which they
accumulate the most blend weight across the training views.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import Camera, ConfigurationError, SurfelScene, project_points
from . import raster

log = logging.getLogger(__name__)

TAU = 0.01
MIN_WEIGHT = 1e-6
ALPHA_GATE = 0.5


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    view: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class SemanticMaskSet:
    """Per-view class images plus the vote stacks that produced the refined masks."""

    masks: List[np.ndarray]
    n_classes: int
    votes: Optional[List[np.ndarray]] = None
    refined: Optional[List[np.ndarray]] = field(default=None)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=np.int64) for m in self.masks]
        for m in self.masks:
            if m.size and (m.min() < 0 or m.max() >= self.n_classes):
                raise ConfigurationError(f"mask labels must lie in [0, {self.n_classes})")

    @property
    def n_views(self):
        return len(self.masks)

    def total_votes(self):
        return int(sum(int(v.sum()) for v in self.votes)) if self.votes else 0


def backproject_mask(cam: Camera, depth, mask, alpha, view=-1) -> LabeledPointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask)
    alpha = np.asarray(alpha, dtype=np.float64)
    if not depth.shape == mask.shape == alpha.shape == cam.shape:
        raise ConfigurationError("depth, mask and alpha must match the camera image size")
    keep = (alpha >= ALPHA_GATE).reshape(-1)
    d = cam.pixel_directions()[keep]
    pts = cam.center + depth.reshape(-1)[keep, None] * d
    return LabeledPointCloud(pts, mask.reshape(-1)[keep], view)


def _landing(cam: Camera, pts, depth):
    """Flat pixel index and z-test verdict for every point in one target view."""
    uv, z = project_points(cam, pts)
    front = z > 1e-4
    i = np.floor(uv[:, 0])
    j = np.floor(uv[:, 1])
    inside = front & (i >= 0) & (i < cam.width) & (j >= 0) & (j < cam.height)
    pix = np.where(inside, j * cam.width + i, 0).astype(np.int64)
    t_proj = np.linalg.norm(pts - cam.center, axis=1)
    ref = depth.reshape(-1)[pix]
    ok = inside & (np.abs(t_proj - ref) <= TAU * ref)
    return pix, ok


def cast_votes(clouds: Sequence[LabeledPointCloud], cams: Sequence[Camera], depths, n_classes):
    """Vote stacks (one (H, W, L) integer array per view)."""
    votes = []
    for cam, depth in zip(cams, depths):
        depth = np.asarray(depth, dtype=np.float64)
        tally = np.zeros(cam.height * cam.width * n_classes, dtype=np.int64)
        for cloud in clouds:
            if len(cloud) == 0:
                continue
            pix, ok = _landing(cam, cloud.points, depth)
            tally += np.bincount(pix[ok] * n_classes + cloud.labels[ok], minlength=tally.shape[0])
        votes.append(tally.reshape(cam.height, cam.width, n_classes))
    return votes


def majority_labels(votes, original):
    """argmax of the votes; ties prefer the original label, then the lowest id."""
    original = np.asarray(original, dtype=np.int64)
    top = votes.max(axis=-1)
    tied = votes == top[..., None]
    lowest = np.argmax(tied, axis=-1)
    keep_orig = np.take_along_axis(tied, original[..., None], axis=-1)[..., 0]
    out = np.where(keep_orig, original, lowest)
    return np.where(top > 0, out, original)


def reproject_masks(clouds, cams, depths, masks, n_classes=None) -> SemanticMaskSet:
    """Fuse per-view masks through their backprojected clouds.

    ``clouds[v]`` is normally ``backproject_mask`` of view ``v``; ``masks``
    are the original per-view labels used for ties and zero-vote pixels.
    """
    masks = [np.asarray(m, dtype=np.int64) for m in masks]
    if n_classes is None:
        n_classes = max(int(m.max()) for m in masks) + 1 if masks else 1
    if not (len(cams) == len(depths) == len(masks)):
        raise ConfigurationError("cameras, depths and masks must have one entry per view")
    votes = cast_votes(clouds, cams, depths, n_classes)
    refined = [majority_labels(v, m) for v, m in zip(votes, masks)]
    return SemanticMaskSet(masks, n_classes, votes, refined)


def refine_masks(scene: SurfelScene, cams, masks, n_classes=None, renders=None):
    """Render depth/alpha for every view, lift the masks and fuse them."""
    if renders is None:
        renders = [raster.render(scene, cam) for cam in cams]
    clouds = [backproject_mask(cam, r.depth, m, r.alpha, view=v)
              for v, (cam, r, m) in enumerate(zip(cams, renders, masks))]
    return reproject_masks(clouds, cams, [r.depth for r in renders], masks, n_classes)


def label_probability_maps(votes):
    out = []
    for v in votes:
        v = np.asarray(v, dtype=np.float64)
        tot = v.sum(axis=-1, keepdims=True)
        L = v.shape[-1]
        out.append(np.where(tot > 0, v / np.where(tot > 0, tot, 1.0), 1.0 / L))
    return out


def contribution_tally(scene: SurfelScene, cams, masks, n_classes=None, min_weight=MIN_WEIGHT):
    """(N, L) blend weight each surfel deposits under each mask class."""
    N = len(scene)
    if n_classes is None:
        n_classes = max([int(np.max(m)) + 1 for m in masks] + [1])
    per_view = np.zeros((len(cams), N * n_classes))
    for v, (cam, m) in enumerate(zip(cams, masks)):
        m = np.asarray(m, dtype=np.int64)
        if m.shape != cam.shape:
            raise ConfigurationError("mask does not match camera image size")
        out = raster.render(scene, cam)
        pix, sid, w = out.contributions(min_weight)
        per_view[v] = np.bincount(sid * n_classes + m.reshape(-1)[pix], weights=w,
                                  minlength=N * n_classes)
    # order-free sum over views: sorting makes the result independent of view order
    per_view.sort(axis=0)
    return per_view.sum(axis=0).reshape(N, n_classes)


def assign_classes(scene: SurfelScene, cams, masks, n_classes=None, min_weight=MIN_WEIGHT):
    """Copy of ``scene`` with every label set to its dominant class."""
    tally = contribution_tally(scene, cams, masks, n_classes, min_weight)
    labels = np.argmax(tally, axis=1)
    labels[tally.max(axis=1) <= 0] = 0
    out = scene.copy()
    out.labels = labels.astype(np.int64)
    return out


# ------------------------------------------------------------------ mask I/O

def write_mask_png(path, mask):
    from PIL import Image
    m = np.asarray(mask)
    if m.size and (m.min() < 0 or m.max() > 255):
        raise ValueError("mask labels must fit in 8 bits")
    Image.fromarray(m.astype(np.uint8), mode="L").save(path, format="PNG", optimize=False)


def read_mask_png(path):
    from PIL import Image
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I"):
            raise ValueError(f"{path}: expected a grayscale class-id PNG, got mode {im.mode}")
        return np.array(im).astype(np.int64)


def write_probability_pngs(prefix, probs):
    """One grayscale PNG per class, ``{prefix}_c{class}.png``; returns the paths."""
    from PIL import Image
    probs = np.asarray(probs)
    paths = []
    for c in range(probs.shape[-1]):
        p = f"{prefix}_c{c}.png"
        img = np.clip(np.round(probs[..., c] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(p, format="PNG", optimize=False)
        paths.append(p)
    return paths
