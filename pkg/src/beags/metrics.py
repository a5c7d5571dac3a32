"""Segmentation and image quality metrics.

Extracted metrics render each class alone and threshold its alpha;
rendered metrics read the class channel of a full-scene render.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import ConfigurationError
from . import occupancy, raster

log = logging.getLogger(__name__)

PSNR_MAX = 99.0
BOUNDARY_FRACTION = 0.02


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def binary_iou_acc(pred, gt):
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    inter = np.count_nonzero(pred & gt)
    iou = 1.0 if union == 0 else inter / union
    acc = float(np.count_nonzero(pred == gt)) / pred.size if pred.size else 1.0
    return float(iou), acc


def boundary_width(shape, fraction=BOUNDARY_FRACTION):
    h, w = shape
    return max(1, int(round(fraction * np.hypot(h, w))))


def boundary_region(mask, d):
    """Pixels of ``mask`` within ``d`` of its contour (mask minus its square erosion)."""
    mask = np.asarray(mask).astype(bool)
    if d < 1:
        return np.zeros_like(mask)
    # pixels outside the image count as background, so borders are contour too
    padded = np.pad(mask, d, constant_values=False)
    er = ndimage.binary_erosion(padded, structure=np.ones((2 * d + 1, 2 * d + 1), bool))
    return mask & ~er[d:-d, d:-d]


def boundary_iou(pred, gt, d=None):
    pred, gt = _pair(pred, gt)
    if d is None:
        d = boundary_width(pred.shape)
    bp = boundary_region(pred, d)
    bg = boundary_region(gt, d)
    return binary_iou_acc(bp, bg)[0]


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_MAX
    return float(min(PSNR_MAX, 10.0 * np.log10(1.0 / mse)))


def unseen_mass(scene, grids, Z, seed=None):
    return occupancy.unseen_mass(scene, grids, Z, seed)


def _score(pred, gt):
    iou, acc = binary_iou_acc(pred, gt)
    return {"iou": iou, "acc": acc, "biou": boundary_iou(pred, gt)}


def _rows(per_pair):
    """Average (class, view) scores over views for every class."""
    rows = {}
    for c in sorted(per_pair):
        vals = per_pair[c]
        rows[c] = {k: float(np.mean([v[k] for v in vals])) for k in ("iou", "acc", "biou")}
        rows[c]["views"] = len(vals)
    return rows


def _mean(rows):
    if not rows:
        return {"iou": float("nan"), "acc": float("nan"), "biou": float("nan")}
    return {k: float(np.mean([r[k] for r in rows.values()])) for k in ("iou", "acc", "biou")}


def extracted_masks(scene, cams, classes, threshold=0.5):
    """{class: [binary mask per view]} from class-subset renders."""
    return {c: [raster.render_class_subset(scene, cam, c).alpha >= threshold for cam in cams]
            for c in classes}


def eval_extracted(scene, cams, gt, threshold=0.5):
    """Per-class extracted scores. ``gt[c][v]`` is the binary mask of class c in view v (or None)."""
    per = {}
    for c in sorted(gt):
        if c < 1:
            continue
        per[c] = []
        for v, cam in enumerate(cams):
            g = gt[c][v] if v < len(gt[c]) else None
            if g is None:
                log.warning("no extracted ground truth for class %d view %d; skipped", c, v)
                continue
            pred = raster.render_class_subset(scene, cam, c).alpha >= threshold
            per[c].append(_score(pred, g))
        if not per[c]:
            del per[c]
    rows = _rows(per)
    return {"classes": rows, "mean": _mean(rows)}


def eval_rendered(scene, cams, gt_masks, classes=None):
    """Per-class scores from the semantic channel. ``gt_masks[v]`` is a class-id image."""
    sems = [raster.render(scene, cam).semantic for cam in cams]
    if classes is None:
        present = set()
        for m in gt_masks:
            present.update(int(c) for c in np.unique(m) if c >= 1)
        classes = sorted(present)
    per = {c: [] for c in classes}
    for v, sem in enumerate(sems):
        if v >= len(gt_masks) or gt_masks[v] is None:
            log.warning("no rendered ground truth for view %d; skipped", v)
            continue
        g = np.asarray(gt_masks[v])
        for c in classes:
            per[c].append(_score(sem == c, g == c))
    per = {c: p for c, p in per.items() if p}
    rows = _rows(per)
    return {"classes": rows, "mean": _mean(rows)}


@dataclass
class MetricReport:
    scene_id: str
    extracted: dict
    rendered: dict
    psnr_before: float = float("nan")
    psnr_after: float = float("nan")
    unseen_mass_before: float = float("nan")
    unseen_mass_after: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"scene_id": self.scene_id, "extracted": _jsonable(self.extracted),
                "rendered": _jsonable(self.rendered), "psnr_before": self.psnr_before,
                "psnr_after": self.psnr_after, "unseen_mass_before": self.unseen_mass_before,
                "unseen_mass_after": self.unseen_mass_after, "extra": _jsonable(self.extra)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def table(self):
        return format_table([self])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def average_reports(reports):
    """Scene-first averaging: each scene's class mean counts once."""
    out = {}
    for fam in ("extracted", "rendered"):
        out[fam] = {k: float(np.mean([getattr(r, fam)["mean"][k] for r in reports]))
                    for k in ("iou", "acc", "biou")}
    return out


def format_table(reports):
    """Aligned plain-text table: one row per scene plus the mean row."""
    head = ["Scene", "Ext.Acc", "Ext.IoU", "Ext.BIoU", "Ren.Acc", "Ren.IoU", "Ren.BIoU", "PSNR"]
    rows = []
    for r in reports:
        e, d = r.extracted["mean"], r.rendered["mean"]
        rows.append([r.scene_id, 100 * e["acc"], 100 * e["iou"], 100 * e["biou"],
                     100 * d["acc"], 100 * d["iou"], 100 * d["biou"], r.psnr_after])
    if len(reports) > 1:
        m = average_reports(reports)
        rows.append(["Mean", 100 * m["extracted"]["acc"], 100 * m["extracted"]["iou"],
                     100 * m["extracted"]["biou"], 100 * m["rendered"]["acc"],
                     100 * m["rendered"]["iou"], 100 * m["rendered"]["biou"],
                     float(np.mean([r.psnr_after for r in reports]))])
    cells = [head] + [[row[0]] + [f"{v:.2f}" for v in row[1:]] for row in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(head))]
    lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i])
                       for i in range(len(head))) for c in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
