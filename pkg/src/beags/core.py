"""Surfel and camera primitives shared by the rest of the package.

Conventions: quaternions are ``(w, x, y, z)``; cameras follow the OpenCV
frame (x right, y down, z forward) with a world-to-camera rigid transform;
pixel ``(i, j)`` has its center at image coordinates ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

NEAR = 1e-4
CUTOFF = 3.0
PARALLEL_EPS = 1e-9


class ConfigurationError(ValueError):
    """Inputs that are inconsistent with each other (shapes, missing data)."""


class NumericalError(RuntimeError):
    """Raised when parameters or a loss become non-finite."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quats(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions; normalizes first."""
    q = normalize_quats(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` for a single proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def frame_grad_to_quat(q, g_tu, g_tv, g_n):
    """Chain gradients on the frame columns back to raw quaternions.

    The frame is built from ``q / |q|``, so the result is already projected
    onto the tangent space of the sphere at ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    gu = [g_tu[..., i] for i in range(3)]
    gv = [g_tv[..., i] for i in range(3)]
    gn = [g_n[..., i] for i in range(3)]
    dw = (2 * z * gu[1] - 2 * y * gu[2]
          - 2 * z * gv[0] + 2 * x * gv[2]
          + 2 * y * gn[0] - 2 * x * gn[1])
    dx = (2 * y * gu[1] + 2 * z * gu[2]
          + 2 * y * gv[0] - 4 * x * gv[1] + 2 * w * gv[2]
          + 2 * z * gn[0] - 2 * w * gn[1] - 4 * x * gn[2])
    dy = (-4 * y * gu[0] + 2 * x * gu[1] - 2 * w * gu[2]
          + 2 * x * gv[0] + 2 * z * gv[2]
          + 2 * w * gn[0] + 2 * z * gn[1] - 4 * y * gn[2])
    dz = (-4 * z * gu[0] + 2 * w * gu[1] + 2 * x * gu[2]
          - 2 * w * gv[0] - 4 * z * gv[1] + 2 * y * gv[2]
          + 2 * x * gn[0] + 2 * y * gn[1])
    gq = np.stack([dw, dx, dy, dz], axis=-1)
    gq = gq - qh * np.sum(gq * qh, axis=-1, keepdims=True)
    return gq / norm


@dataclass(frozen=True)
class GaussianSurfel:
    """A single oriented 2D Gaussian; scene storage uses :class:`SurfelScene`."""

    center: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity_logit: float
    label: int = 0

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


@dataclass(frozen=True)
class SplatHit:
    depth: float
    uv: np.ndarray
    density: float


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def point_at(self, t):
        return self.origin + t * self.direction


@dataclass
class SurfelScene:
    """Struct-of-arrays surfel collection.

    Trainable fields are ``means``, ``quats``, ``log_scales``, ``colors``
    and ``opacity_logits``; ``labels`` is fixed class data.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    labels: np.ndarray

    PARAM_FIELDS = ("means", "quats", "log_scales", "colors", "opacity_logits")

    def __post_init__(self):
        n = len(np.atleast_1d(self.opacity_logits))
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_surfels(cls, surfels: Iterable[GaussianSurfel]):
        surfels = list(surfels)
        if not surfels:
            return cls.empty()
        return cls(
            np.array([s.center for s in surfels], dtype=np.float64),
            np.array([s.quat for s in surfels], dtype=np.float64),
            np.array([s.log_scale for s in surfels], dtype=np.float64),
            np.array([s.color for s in surfels], dtype=np.float64),
            np.array([s.opacity_logit for s in surfels], dtype=np.float64),
            np.array([s.label for s in surfels], dtype=np.int64),
        )

    def __len__(self):
        return self.opacity_logits.shape[0]

    def surfel(self, i) -> GaussianSurfel:
        return GaussianSurfel(self.means[i].copy(), self.quats[i].copy(),
                              self.log_scales[i].copy(), self.colors[i].copy(),
                              float(self.opacity_logits[i]), int(self.labels[i]))

    def copy(self):
        return SurfelScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                           self.colors.copy(), self.opacity_logits.copy(), self.labels.copy())

    def subset(self, index):
        index = np.asarray(index)
        return SurfelScene(self.means[index], self.quats[index], self.log_scales[index],
                           self.colors[index], self.opacity_logits[index], self.labels[index])

    def concat(self, other: "SurfelScene"):
        return SurfelScene(*(np.concatenate([getattr(self, f), getattr(other, f)])
                             for f in self.PARAM_FIELDS + ("labels",)))

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def frames(self):
        """(N, 3, 3) rotation matrices; columns are (t_u, t_v, n)."""
        return quat_to_rotmat(self.quats)

    def normalize(self):
        self.quats = normalize_quats(self.quats)
        return self

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 1


def surfel_frame(g: GaussianSurfel):
    R = quat_to_rotmat(np.asarray(g.quat, dtype=np.float64))
    return R[:, 0].copy(), R[:, 1].copy(), R[:, 2].copy()


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                   width, height, R, -R @ eye)

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def forward(self):
        return self.rotation[2].copy()

    @property
    def shape(self):
        return (self.height, self.width)

    def to_camera(self, x):
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def pixel_directions(self):
        """(H*W, 3) unit world-space directions through pixel centers, row-major."""
        jj, ii = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        dc = np.stack([(ii - self.cx) / self.fx, (jj - self.cy) / self.fy, np.ones_like(ii)], axis=-1)
        dc = dc.reshape(-1, 3)
        dc /= np.linalg.norm(dc, axis=1, keepdims=True)
        return dc @ self.rotation

    def to_dict(self):
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
                "width": int(self.width), "height": int(self.height),
                "rotation": [float(v) for v in self.rotation.reshape(-1)],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["translation"], dtype=np.float64))


def generate_ray(cam: Camera, pixel) -> Ray:
    """Ray through continuous image coordinates ``pixel`` (pass ``i + 0.5`` for centers)."""
    u, v = float(pixel[0]), float(pixel[1])
    dc = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    dc /= np.linalg.norm(dc)
    return Ray(cam.center, cam.rotation.T @ dc)


def project_point(cam: Camera, x) -> Optional[tuple]:
    """Pinhole projection; returns ``(pixel, depth)`` or None behind the near plane."""
    xc = cam.to_camera(x)
    z = xc[2]
    if z <= NEAR:
        return None
    return np.array([cam.fx * xc[0] / z + cam.cx, cam.fy * xc[1] / z + cam.cy]), float(z)


def project_points(cam: Camera, X):
    """Vectorized projection: returns (pixels (M, 2), depth (M,)); depth <= NEAR marks invalid."""
    xc = cam.to_camera(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    z = xc[:, 2]
    safe = np.where(z > NEAR, z, 1.0)
    uv = np.stack([cam.fx * xc[:, 0] / safe + cam.cx, cam.fy * xc[:, 1] / safe + cam.cy], axis=1)
    return uv, z


def intersect_splat(ray: Ray, g: GaussianSurfel) -> Optional[SplatHit]:
    tu, tv, n = surfel_frame(g)
    o, d = np.asarray(ray.origin, float), np.asarray(ray.direction, float)
    p = np.asarray(g.center, dtype=np.float64)
    dn = float(d @ n)
    if abs(dn) < PARALLEL_EPS:
        return None
    t = float((p - o) @ n) / dn
    if t <= NEAR:
        return None
    su, sv = np.exp(np.asarray(g.log_scale, dtype=np.float64))
    r = o + t * d - p
    U, V = float(r @ tu) / su, float(r @ tv) / sv
    rr = U * U + V * V
    if rr > CUTOFF * CUTOFF:
        return None
    return SplatHit(t, np.array([U, V]), float(np.exp(-0.5 * rr)))
