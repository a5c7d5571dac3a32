"""Synthetic surfel scenes with planted artifacts, cameras, masks and file I/O.

A scene is a set of primitives (sphere, box, plane) tiled with opaque
tangent-aligned surfels, plus three families of artifact surfels that carry
their host object's class:

* ``spike``: elongated surfels entirely below the support plane, hidden
  from every orbit camera;
* ``stretch``: surfels rooted on a box side face whose lower half reaches
  through the support plane, so the root is seen and the tail is not;
* ``bleed``: surfels on a box top face overhanging its edge, colored like
  the surface they cover so photometric supervision cannot remove them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np

from .core import Camera, ConfigurationError, SurfelScene, logit, rotmat_to_quat, sigmoid
from . import raster

KIND_SURFACE, KIND_SPIKE, KIND_STRETCH, KIND_BLEED = 0, 1, 2, 3
KIND_NAMES = {KIND_SURFACE: "surface", KIND_SPIKE: "spike", KIND_STRETCH: "stretch", KIND_BLEED: "bleed"}


class SceneFormatError(ValueError):
    """Malformed scene or camera file; message carries the location."""


@dataclass
class ObjectSpec:
    primitive: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]
    label: int
    count: int
    color: Tuple[float, float, float]


@dataclass
class SceneSpec:
    objects: List[ObjectSpec]
    n_spikes: int = 20
    spike_depth: float = 0.12
    n_stretch: int = 0
    n_bleed: int = 0
    orbit_radius: float = 4.0
    elevation_deg: float = 35.0
    n_views: int = 24
    n_test_views: int = 8
    width: int = 128
    height: int = 128
    fov_deg: float = 40.0
    opacity: float = 0.999
    scale_factor: float = 1.1
    seed: int = 0
    init_color_noise: float = 0.05
    init_jitter: float = 0.1
    mask_corruption: float = 0.3

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        labels = sorted({o.label for o in self.objects})
        if labels and labels != list(range(1, len(labels) + 1)):
            raise ConfigurationError("object classes must be contiguous from 1")
        if self.n_views < 3:
            raise ConfigurationError("at least 3 views are required")
        for o in self.objects:
            if o.primitive not in ("sphere", "box", "plane"):
                raise ConfigurationError(f"unknown primitive {o.primitive!r}")
            if o.count < 1:
                raise ConfigurationError("every object needs at least one surfel")

    @property
    def n_classes(self):
        return max([o.label for o in self.objects] + [0]) + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objects"] = [ObjectSpec(**{**o, "center": tuple(o["center"]), "size": tuple(o["size"]),
                                      "color": tuple(o["color"])}) for o in d["objects"]]
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (TypeError, KeyError) as e:
                raise SceneFormatError(f"{path}: invalid scene spec ({e})") from e


GREY = (0.55, 0.55, 0.55)


def default_spec(seed=0) -> SceneSpec:
    """The benchmark: a grey box and a red dome on a grey table."""
    return SceneSpec(
        objects=[
            ObjectSpec("box", (-0.5, -0.35, 0.35), (0.6, 0.6, 0.7), 1, 1500, GREY),
            ObjectSpec("sphere", (0.55, 0.4, 0.0), (0.35,), 2, 500, (0.8, 0.2, 0.15)),
            ObjectSpec("plane", (0.0, 0.0, 0.0), (2.4, 2.4), 3, 1900, GREY),
        ],
        n_spikes=20, n_stretch=12, n_bleed=8, seed=seed,
    )


# ----------------------------------------------------------------- tiling

def _frame_from(n, hint):
    n = n / np.linalg.norm(n)
    tu = hint - n * (hint @ n)
    if np.linalg.norm(tu) < 1e-8:
        tu = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(tu) < 1e-8:
            tu = np.cross(n, [0.0, 1.0, 0.0])
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    return np.stack([tu, tv, n], axis=1)


def _grid(a, b, h):
    na = max(1, int(round(a / h)))
    nb = max(1, int(round(b / h)))
    ua = (np.arange(na) + 0.5) / na * a - a / 2
    ub = (np.arange(nb) + 0.5) / nb * b - b / 2
    A, B = np.meshgrid(ua, ub, indexing="ij")
    return A.reshape(-1), B.reshape(-1), max(a / na, b / nb)


def _tile_sphere(o: ObjectSpec, z0=None):
    """Fibonacci tiling; with a support height ``z0`` only the cap above it is tiled."""
    c = np.asarray(o.center, float)
    r = float(o.size[0])
    n = o.count
    lo = -1.0 if z0 is None else float(np.clip((z0 - c[2]) / r, -1.0, 1.0))
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - (1 - lo) * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    nrm = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    h = np.sqrt(2 * np.pi * r * r * (1 - lo) / n)
    frames = [_frame_from(v, np.array([0.0, 0.0, 1.0])) for v in nrm]
    return c + r * nrm, frames, h


def _box_faces(o: ObjectSpec):
    c = np.asarray(o.center, float)
    sx, sy, sz = (float(v) for v in o.size)
    half = np.array([sx, sy, sz]) / 2
    faces = []
    for ax in range(3):
        for sgn in (1.0, -1.0):
            nrm = np.zeros(3)
            nrm[ax] = sgn
            others = [a for a in range(3) if a != ax]
            faces.append((ax, sgn, nrm, others, 2 * half[others[0]], 2 * half[others[1]]))
    return c, half, faces


def _tile_box(o: ObjectSpec):
    c, half, faces = _box_faces(o)
    area = sum(f[4] * f[5] for f in faces)
    h = np.sqrt(area / o.count)
    pts, frames = [], []
    for ax, sgn, nrm, others, a, b in faces:
        A, B, hh = _grid(a, b, h)
        for ua, ub in zip(A, B):
            x = c.copy()
            x[ax] += sgn * half[ax]
            x[others[0]] += ua
            x[others[1]] += ub
            pts.append(x)
            e0 = np.zeros(3)
            e0[others[0]] = 1.0
            frames.append(_frame_from(nrm, e0))
    return np.array(pts), frames, h


def _tile_plane(o: ObjectSpec, holes):
    c = np.asarray(o.center, float)
    a, b = float(o.size[0]), float(o.size[1])
    h = np.sqrt(a * b / o.count)
    A, B, _ = _grid(a, b, h)
    pts = np.stack([c[0] + A, c[1] + B, np.full(A.shape, c[2])], axis=1)
    keep = np.ones(len(pts), bool)
    for kind, a0, a1 in holes:
        if kind == "rect":
            keep &= ~np.all((pts[:, :2] > a0) & (pts[:, :2] < a1), axis=1)
        else:
            keep &= np.linalg.norm(pts[:, :2] - a0, axis=1) >= a1
    pts = pts[keep]
    frames = [_frame_from(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))] * len(pts)
    return pts, frames, h


def _pack(pts, frames, su, sv, color, opacity, label):
    n = len(pts)
    quats = np.array([rotmat_to_quat(F) for F in frames]).reshape(n, 4)
    return SurfelScene(np.asarray(pts).reshape(n, 3), quats,
                       np.log(np.column_stack([np.broadcast_to(su, n), np.broadcast_to(sv, n)])),
                       np.tile(np.asarray(color, float), (n, 1)),
                       np.full(n, float(logit(opacity))), np.full(n, label, dtype=np.int64))


def _surfaces(spec: SceneSpec):
    """Clean object tiling; returns (scene, per-object records)."""
    z0 = _support_height(spec)
    holes = []
    # the support plane is cut under every footprint so no table surface hides there
    for o in spec.objects:
        c = np.asarray(o.center, float)
        if o.primitive == "box":
            half = np.asarray(o.size, float)[:2] / 2
            holes.append(("rect", c[:2] - half, c[:2] + half))
        elif o.primitive == "sphere" and z0 is not None:
            r = float(o.size[0])
            dz = z0 - c[2]
            if abs(dz) < r:
                holes.append(("disc", c[:2], np.sqrt(r * r - dz * dz)))
    parts, recs = [], []
    for o in spec.objects:
        if o.primitive == "sphere":
            pts, fr, h = _tile_sphere(o, z0)
        elif o.primitive == "box":
            pts, fr, h = _tile_box(o)
        else:
            pts, fr, h = _tile_plane(o, holes)
        sig = spec.scale_factor * h
        parts.append(_pack(pts, fr, sig, sig, o.color, spec.opacity, o.label))
        recs.append((o, h, sig))
    scene = parts[0]
    for p in parts[1:]:
        scene = scene.concat(p)
    return scene, recs


def _support_height(spec):
    planes = [o for o in spec.objects if o.primitive == "plane"]
    return float(planes[0].center[2]) if planes else None


def _spikes(spec, rng, recs):
    hosts = [(o, sig) for o, _, sig in recs if o.primitive in ("box", "sphere")]
    z0 = _support_height(spec)
    if not hosts or z0 is None or spec.n_spikes == 0:
        return SurfelScene.empty()
    pts, frames, su, sv, col, lab = [], [], [], [], [], []
    for i in range(spec.n_spikes):
        o, sig = hosts[i % len(hosts)]
        c = np.asarray(o.center, float)
        if o.primitive == "box":
            reach = np.asarray(o.size[:2], float) / 2 * 0.6
            cap = np.inf
        else:
            r = float(o.size[0])
            base = np.sqrt(max(r * r - (z0 - c[2]) ** 2, 0.0))
            reach = np.array([base, base]) * 0.2
        off = rng.uniform(-1, 1, 2) * reach
        if o.primitive != "box":
            # keep the 3-sigma footprint inside the base, where the open dome covers it
            cap = (0.8 * base - np.linalg.norm(off)) / 3
        xy = c[:2] + off
        z = z0 - spec.spike_depth * rng.uniform(0.6, 1.4)
        ang = rng.uniform(0, np.pi)
        # vertical disk hanging below the object; its 3-sigma extent stays under the plane
        tu = np.array([np.cos(ang), np.sin(ang), 0.0])
        tv = np.array([0.0, 0.0, 1.0])
        frames.append(np.stack([tu, tv, np.cross(tu, tv)], axis=1))
        pts.append(np.array([xy[0], xy[1], z]))
        su.append(min(rng.uniform(0.06, 0.1), cap))
        sv.append(min(0.25 * (z0 - z), 0.04))
        col.append(o.color)
        lab.append(o.label)
    return _scene_from(pts, frames, su, sv, col, [0.9] * len(pts), lab)


def _scene_from(pts, frames, su, sv, col, opa, lab):
    n = len(pts)
    return SurfelScene(np.array(pts), np.array([rotmat_to_quat(F) for F in frames]),
                       np.log(np.column_stack([su, sv])), np.array(col, float),
                       logit(np.array(opa, float)), np.array(lab, dtype=np.int64))


def _side_faces(o):
    c, half, faces = _box_faces(o)
    return c, half, [f for f in faces if f[0] != 2]


def _stretch(spec, rng, recs):
    boxes = [(o, sig) for o, _, sig in recs if o.primitive == "box"]
    z0 = _support_height(spec)
    if not boxes or z0 is None or spec.n_stretch == 0:
        return SurfelScene.empty()
    pts, frames, su, sv, col, lab = [], [], [], [], [], []
    for i in range(spec.n_stretch):
        o, sig = boxes[i % len(boxes)]
        c, half, sides = _side_faces(o)
        ax, sgn, nrm, others, a, b = sides[(i // len(boxes)) % 4]
        horiz = others[0]
        height = 2 * half[2]
        sv_i = height / 4.3
        x = c.copy()
        x[ax] += sgn * half[ax]
        x[horiz] += rng.uniform(-0.35, 0.35) * a
        x[2] = z0 + rng.uniform(0.02, 0.05) * height
        e0 = np.zeros(3)
        e0[horiz] = 1.0
        F = _frame_from(nrm, e0)
        # make t_v vertical so the long axis runs through the support plane
        tu = F[:, 0]
        tv = np.array([0.0, 0.0, 1.0])
        n_ = np.cross(tu, tv)
        pts.append(x)
        frames.append(np.stack([tu, tv, n_], axis=1))
        su.append(rng.uniform(1.5, 2.5) * sig)
        sv.append(sv_i)
        col.append(o.color)
        lab.append(o.label)
    return _scene_from(pts, frames, su, sv, col, [spec.opacity] * len(pts), lab)


def _bleed(spec, rng, recs):
    boxes = [(o, sig) for o, _, sig in recs if o.primitive == "box"]
    if not boxes or spec.n_bleed == 0:
        return SurfelScene.empty()
    pts, frames, su, sv, col, lab = [], [], [], [], [], []
    for i in range(spec.n_bleed):
        o, sig = boxes[i % len(boxes)]
        c, half, sides = _side_faces(o)
        ax, sgn, nrm, others, a, b = sides[(i // len(boxes)) % 4]
        horiz = others[0]
        out_len = rng.uniform(0.14, 0.2)
        x = c.copy()
        x[2] += half[2]
        x[ax] += sgn * (half[ax] - 0.45 * out_len)
        x[horiz] += rng.uniform(-0.3, 0.3) * a
        tu = np.zeros(3)
        tu[ax] = sgn
        tv = np.zeros(3)
        tv[horiz] = 1.0
        n_ = np.cross(tu, tv)
        if n_[2] < 0:
            tv = -tv
            n_ = -n_
        pts.append(x)
        frames.append(np.stack([tu, tv, n_], axis=1))
        su.append(out_len)
        sv.append(rng.uniform(1.5, 2.5) * sig)
        col.append(o.color)
        lab.append(o.label)
    return _scene_from(pts, frames, su, sv, col, [spec.opacity] * len(pts), lab)


@dataclass
class GeneratedScene:
    scene: SurfelScene
    clean: SurfelScene
    kind: np.ndarray
    oracle: np.ndarray

    def mask(self, kind):
        return self.kind == kind


def generate_scene(spec: SceneSpec, seed=None) -> GeneratedScene:
    """Artifact scene with oracle labels and the artifact-free reference."""
    if not spec.objects or sum(o.count for o in spec.objects) == 0:
        raise ConfigurationError("scene spec has no surfels")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    clean, recs = _surfaces(spec)
    extras = [(_spikes(spec, rng, recs), KIND_SPIKE), (_stretch(spec, rng, recs), KIND_STRETCH),
              (_bleed(spec, rng, recs), KIND_BLEED)]
    scene = clean.copy()
    kind = [np.full(len(clean), KIND_SURFACE)]
    for s, k in extras:
        if len(s):
            scene = scene.concat(s)
            kind.append(np.full(len(s), k))
    scene.normalize()
    clean.normalize()
    return GeneratedScene(scene, clean, np.concatenate(kind), scene.labels.copy())


def perturb(scene: SurfelScene, spec: SceneSpec, seed):
    """Pretraining start: color noise and tangent-scale jitter of the centers."""
    rng = np.random.default_rng(seed)
    out = scene.copy()
    n = len(out)
    out.colors = np.clip(out.colors + rng.normal(0, spec.init_color_noise, (n, 3)), 0.0, 1.0)
    R = out.frames()
    sc = out.scales
    j = rng.normal(0, spec.init_jitter, (n, 2)) * sc
    out.means = out.means + j[:, 0:1] * R[:, :, 0] + j[:, 1:2] * R[:, :, 1]
    return out


# ---------------------------------------------------------------- cameras

def orbit_cameras(spec: SceneSpec, n=None, offset=0.0, target=(0.0, 0.0, 0.15)):
    n = spec.n_views if n is None else n
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    el = np.radians(spec.elevation_deg)
    cams = []
    for i in range(n):
        az = 2 * np.pi * (i + offset) / n
        eye = np.array(target) + spec.orbit_radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, [0.0, 0.0, 1.0], f, f, spec.width, spec.height))
    return cams


def test_cameras(spec: SceneSpec):
    return orbit_cameras(spec, spec.n_test_views, offset=0.37)


# ------------------------------------------------------------------ masks

def render_gt_masks(clean: SurfelScene, cams, classes=None, threshold=0.5):
    """Rendered class images (background 0) and per-class extracted silhouettes."""
    if classes is None:
        classes = [c for c in range(1, clean.n_classes)]
    rendered = []
    for cam in cams:
        sem = raster.render(clean, cam).semantic
        rendered.append(np.where(sem < 0, 0, sem).astype(np.int64))
    extracted = {c: [raster.render_class_subset(clean, cam, c).alpha >= threshold for cam in cams]
                 for c in classes}
    return rendered, extracted


def _edge_band(m, width=3):
    from scipy import ndimage
    edge = np.zeros(m.shape, bool)
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    edge[:, :-1] |= m[:, 1:] != m[:, :-1]
    edge[1:, :] |= m[1:, :] != m[:-1, :]
    edge[:-1, :] |= m[1:, :] != m[:-1, :]
    if width <= 1:
        return edge
    return ndimage.binary_dilation(edge, structure=np.ones((2 * width - 1,) * 2, bool))


def _neighbor_label(m, i, j, width):
    h, w = m.shape
    win = m[max(0, i - width):i + width + 1, max(0, j - width):j + width + 1]
    others = np.unique(win[win != m[i, j]])
    return others


def corrupt_masks(masks, fraction, seed, width=3):
    """Flip ``fraction`` of the pixels within ``width`` px of a class edge in half the views.

    A flipped pixel takes the lowest-id different label found in its window,
    randomized between candidates. Returns ``(masks, chosen view indices)``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(masks)
    views = np.sort(rng.choice(n, n // 2, replace=False)) if n else np.zeros(0, int)
    out = [np.asarray(m, dtype=np.int64).copy() for m in masks]
    for v in views:
        m = out[v]
        band = np.flatnonzero(_edge_band(m, width))
        k = int(round(fraction * band.size))
        pick = np.sort(rng.choice(band, k, replace=False)) if k else np.zeros(0, int)
        src = np.asarray(masks[v], dtype=np.int64)
        for p in pick:
            i, j = divmod(int(p), m.shape[1])
            cand = _neighbor_label(src, i, j, width)
            if cand.size:
                m[i, j] = cand[rng.integers(cand.size)]
    return out, views.tolist()


# -------------------------------------------------------------------- I/O

SCENE_HEADER = "BEAGS 1"


def save_scene(path, scene: SurfelScene):
    s = scene.scales
    a = scene.opacities
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SCENE_HEADER + "\n")
        for i in range(len(scene)):
            vals = list(scene.means[i]) + list(scene.quats[i]) + list(s[i]) + list(scene.colors[i]) + [a[i]]
            fh.write(" ".join(repr(float(v)) for v in vals) + f" {int(scene.labels[i])}\n")


def _exact_inverse(y, inv, fwd):
    """``x = inv(y)`` nudged by a few ulps so that ``fwd(x) == y`` when possible."""
    x = inv(y)
    best = x.copy()
    bad = fwd(best) != y
    for direction in (np.inf, -np.inf):
        cand = x.copy()
        for _ in range(4):
            if not bad.any():
                return best
            cand = np.nextafter(cand, direction)
            hit = bad & (fwd(cand) == y)
            best[hit] = cand[hit]
            bad &= ~hit
    return best


def load_scene(path) -> SurfelScene:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != SCENE_HEADER:
        got = lines[0].strip() if lines else ""
        if got.startswith("BEAGS "):
            raise SceneFormatError(f"{path}:1: unsupported version {got[6:]!r} (expected 1)")
        raise SceneFormatError(f"{path}:1: missing header {SCENE_HEADER!r}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 14:
            raise SceneFormatError(f"{path}:{ln}: expected 14 fields, found {len(parts)}")
        try:
            vals = [float(v) for v in parts[:13]]
            label = int(parts[13])
        except ValueError as e:
            raise SceneFormatError(f"{path}:{ln}: {e}") from e
        if not np.all(np.isfinite(vals)):
            raise SceneFormatError(f"{path}:{ln}: non-finite value")
        if vals[7] <= 0 or vals[8] <= 0:
            raise SceneFormatError(f"{path}:{ln}: scales must be positive")
        if not 0.0 < vals[12] < 1.0:
            raise SceneFormatError(f"{path}:{ln}: opacity must lie in (0, 1)")
        if label < 0:
            raise SceneFormatError(f"{path}:{ln}: negative class id")
        rows.append(vals + [label])
    if not rows:
        return SurfelScene.empty()
    a = np.array(rows)
    log_s = _exact_inverse(a[:, 7:9], np.log, np.exp)
    lg = _exact_inverse(a[:, 12], logit, sigmoid)
    return SurfelScene(a[:, 0:3], a[:, 3:7], log_s, a[:, 9:12], lg, a[:, 13].astype(np.int64))


def save_cameras(path, cams):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in cams], fh, indent=1)
        fh.write("\n")


def load_cameras(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}:{e.lineno}: {e.msg}") from e
    if not isinstance(data, list):
        raise SceneFormatError(f"{path}:1: expected a JSON array of cameras")
    cams = []
    for i, d in enumerate(data):
        try:
            cams.append(Camera.from_dict(d))
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"{path}: camera {i}: {e}") from e
    return cams
