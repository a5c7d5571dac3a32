"""Front-to-back alpha compositing of surfels with an analytic backward pass.

The compiled kernel (:mod:`beags.raster._kernels`) is used when it has been
built; otherwise the numpy implementation in :mod:`beags.raster._fallback`
is selected at import. ``BEAGS_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import NEAR, Camera, ConfigurationError, NumericalError, SurfelScene, frame_grad_to_quat
from . import _fallback

try:
    if os.environ.get("BEAGS_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced")
    from . import _kernels
except ImportError:
    _kernels = None

BACKENDS = {"python": _fallback}
if _kernels is not None:
    BACKENDS["compiled"] = _kernels
BACKEND = "compiled" if _kernels is not None else "python"

_num_threads = 1
_DIR_CACHE = {}
_DIR_CACHE_MAX = 64


def _directions(cam: Camera):
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
           cam.rotation.tobytes(), cam.translation.tobytes())
    d = _DIR_CACHE.get(key)
    if d is None:
        if len(_DIR_CACHE) >= _DIR_CACHE_MAX:
            _DIR_CACHE.clear()
        d = np.ascontiguousarray(cam.pixel_directions())
        d.flags.writeable = False
        _DIR_CACHE[key] = d
    return d


def set_num_threads(n: int):
    global _num_threads
    _num_threads = max(1, int(n))


def get_backend(name: Optional[str] = None):
    return BACKENDS[name or BACKEND]


@dataclass
class ParamGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n))

    def __add__(self, other):
        return ParamGrads(*(getattr(self, f) + getattr(other, f) for f in SurfelScene.PARAM_FIELDS))

    def __mul__(self, c):
        return ParamGrads(*(getattr(self, f) * c for f in SurfelScene.PARAM_FIELDS))

    __rmul__ = __mul__

    def flat(self):
        return np.concatenate([getattr(self, f).reshape(-1) for f in SurfelScene.PARAM_FIELDS])

    def all_finite(self):
        return all(np.all(np.isfinite(getattr(self, f))) for f in SurfelScene.PARAM_FIELDS)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    semantic: np.ndarray
    boundary: np.ndarray
    t_final: np.ndarray
    _state: dict = field(default=None, repr=False)

    @property
    def shape(self):
        return self.alpha.shape

    def contributions(self, min_weight=0.0):
        """(flat pixel index, surfel id, blend weight) for every composited hit."""
        st = self._state["fwd"]
        pix, idx = _fallback.composited(st["offsets"], st["n_used"], st["hit_index"])
        w = st["hit_w"][idx]
        keep = w > min_weight
        return pix[keep], st["hit_id"][idx[keep]].astype(np.int64), w[keep]

    def mean_boundary(self, supervision):
        sup = np.asarray(supervision)
        m = sup >= 0
        return float(self.boundary[m].mean()) if m.any() else 0.0


def _bboxes(p, tu, tv, su, sv, cam: Camera):
    n = p.shape[0]
    bbox = np.empty((n, 4), dtype=np.int32)
    bbox[:] = (0, -1, 0, -1)
    if n == 0:
        return bbox
    a = 3.0 * su[:, None] * tu
    b = 3.0 * sv[:, None] * tv
    with np.errstate(over="ignore", invalid="ignore"):
        corners = np.stack([p + a + b, p + a - b, p - a + b, p - a - b], axis=1)
        xc = corners @ cam.rotation.T + cam.translation
        z = xc[..., 2]
        behind = np.all(z <= 0.0, axis=1)
        straddle = np.any(z <= NEAR, axis=1) & ~behind
        zs = np.where(z > NEAR, z, 1.0)
        u = cam.fx * xc[..., 0] / zs + cam.cx
        v = cam.fy * xc[..., 1] / zs + cam.cy
    eps = 1e-6
    x0 = np.ceil(u.min(axis=1) - 0.5 - eps)
    x1 = np.floor(u.max(axis=1) - 0.5 + eps)
    y0 = np.ceil(v.min(axis=1) - 0.5 - eps)
    y1 = np.floor(v.max(axis=1) - 0.5 + eps)
    x0 = np.where(straddle, 0, np.clip(x0, 0, cam.width))
    x1 = np.where(straddle, cam.width - 1, np.clip(x1, -1, cam.width - 1))
    y0 = np.where(straddle, 0, np.clip(y0, 0, cam.height))
    y1 = np.where(straddle, cam.height - 1, np.clip(y1, -1, cam.height - 1))
    # NaN compares false everywhere; make sure it can never reach the int cast
    empty = behind | ~(x0 <= x1) | ~(y0 <= y1)
    bbox[:, 0] = np.where(empty, 0, x0)
    bbox[:, 1] = np.where(empty, -1, x1)
    bbox[:, 2] = np.where(empty, 0, y0)
    bbox[:, 3] = np.where(empty, -1, y1)
    return bbox


def _prepare(scene: SurfelScene, cam: Camera, supervision):
    R = scene.frames() if len(scene) else np.zeros((0, 3, 3))
    tu = np.ascontiguousarray(R[:, :, 0])
    tv = np.ascontiguousarray(R[:, :, 1])
    n = np.ascontiguousarray(R[:, :, 2])
    scales = scene.scales
    su = np.ascontiguousarray(scales[:, 0])
    sv = np.ascontiguousarray(scales[:, 1])
    p = np.ascontiguousarray(scene.means)
    if not (np.isfinite(p).all() and np.isfinite(R).all() and np.isfinite(scales).all()):
        raise NumericalError("surfel geometry is not finite")
    if supervision is None:
        sup = np.full(cam.height * cam.width, -1, dtype=np.int32)
    else:
        sup = np.asarray(supervision)
        if sup.shape != (cam.height, cam.width):
            raise ConfigurationError(
                f"supervision shape {sup.shape} does not match camera {(cam.height, cam.width)}")
        sup = np.ascontiguousarray(sup.reshape(-1), dtype=np.int32)
    n_classes = max(scene.n_classes, int(sup.max()) + 1 if sup.size else 1, 1)
    return dict(
        origin=np.ascontiguousarray(cam.center), dirs=_directions(cam),
        p=p, tu=tu, tv=tv, n=n, su=su, sv=sv,
        opa=np.ascontiguousarray(scene.opacities), color=np.ascontiguousarray(scene.colors),
        cls=np.ascontiguousarray(scene.labels, dtype=np.int32),
        bbox=_bboxes(p, tu, tv, su, sv, cam), sup=sup, n_classes=n_classes,
    )


def render(scene: SurfelScene, cam: Camera, supervision=None, *, backend=None, num_threads=None):
    prep = _prepare(scene, cam, supervision)
    k = get_backend(backend)
    fwd = k.forward(prep["origin"], prep["dirs"], prep["p"], prep["tu"], prep["tv"], prep["n"],
                    prep["su"], prep["sv"], prep["opa"], prep["color"], prep["cls"], prep["bbox"],
                    prep["sup"], cam.width, cam.height, prep["n_classes"],
                    num_threads or _num_threads)
    H, W = cam.height, cam.width
    return RenderOutput(
        color=fwd["color"].reshape(H, W, 3), depth=fwd["depth"].reshape(H, W),
        alpha=fwd["alpha"].reshape(H, W), semantic=fwd["semantic"].reshape(H, W),
        boundary=fwd["boundary"].reshape(H, W), t_final=fwd["t_final"].reshape(H, W),
        _state=dict(prep=prep, fwd=fwd, backend=backend, n=len(scene)),
    )


def render_class_subset(scene: SurfelScene, cam: Camera, label: int, **kw):
    """Render only the surfels of class ``label``; unknown labels give an empty render."""
    return render(scene.subset(np.nonzero(scene.labels == label)[0]), cam, **kw)


def backward(scene: SurfelScene, cam: Camera, supervision, upstream, out: Optional[RenderOutput] = None,
             *, backend=None, num_threads=None) -> ParamGrads:
    """Gradients of ``sum(upstream['color'] * color) + sum(upstream['boundary'] * boundary)``."""
    if out is None:
        out = render(scene, cam, supervision, backend=backend, num_threads=num_threads)
    N = len(scene)
    H, W = cam.height, cam.width
    d_color = upstream.get("color")
    d_bound = upstream.get("boundary")
    d_color = np.zeros((H * W, 3)) if d_color is None else np.ascontiguousarray(
        np.asarray(d_color, dtype=np.float64).reshape(H * W, 3))
    d_bound = np.zeros(H * W) if d_bound is None else np.ascontiguousarray(
        np.asarray(d_bound, dtype=np.float64).reshape(H * W))
    if N == 0:
        return ParamGrads.zeros(0)
    prep, fwd = out._state["prep"], out._state["fwd"]
    k = get_backend(backend or out._state["backend"])
    rec = k.backward(prep["origin"], prep["dirs"], prep["p"], prep["tu"], prep["tv"], prep["n"],
                     prep["su"], prep["sv"], prep["opa"], prep["color"], prep["cls"], prep["sup"],
                     fwd["offsets"], fwd["n_used"], fwd["hit_index"], fwd["hit_id"], fwd["hit_t"], fwd["hit_u"],
                     fwd["hit_v"], fwd["hit_g"], d_color, d_bound, num_threads or _num_threads)
    return grads_from_records(scene, rec, prep["opa"])


def grads_from_records(scene, rec, opa):
    g_quat = frame_grad_to_quat(scene.quats, rec[:, 3:6], rec[:, 6:9], rec[:, 9:12])
    return ParamGrads(
        means=rec[:, 0:3].copy(), quats=g_quat, log_scales=rec[:, 12:14].copy(),
        colors=rec[:, 15:18].copy(), opacity_logits=rec[:, 14] * opa * (1.0 - opa),
    )


# ---------------------------------------------------------------- file output

RAW_MAGIC = b"BEAF"


def write_raw(path, image):
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("raw channel files hold a single H x W channel")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    w, h = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {4 * w * h} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_png_color(path, color):
    from PIL import Image
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False)


def write_png_labels(path, labels):
    """Class-id image as 8-bit grayscale; empty (-1) is written as background 0."""
    from PIL import Image
    img = np.clip(np.asarray(labels), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG", optimize=False)


def read_png(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.array(im)
