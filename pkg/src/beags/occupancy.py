"""Per-class visibility voxel grids and the occupancy loss.

Each class gets a sparse grid built from backprojected semantic renders.
Samples drawn on every surfel's UV disk are penalized by opacity times
density whenever no voxel in the 3x3x3 block around them is occupied by the
surfel's own class.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import CUTOFF, ConfigurationError, SurfelScene, frame_grad_to_quat
from . import raster
from .raster import ParamGrads
from .semantics import ALPHA_GATE

log = logging.getLogger(__name__)

VOXEL_RATIO = (4.0 * np.pi / 3.0) ** (1.0 / 3.0)
MAX_QUERIES = 2048

_BITS = 21
_OFF = 1 << (_BITS - 1)
_LIM = _OFF - 2
_NEIGH = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
                  dtype=np.int64)


def pack_keys(keys):
    """Pack (M, 3) integer voxel coordinates into sortable int64 codes."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    k = np.clip(k, -_LIM - 1, _LIM + 1) + _OFF
    return (k[:, 0] << (2 * _BITS)) | (k[:, 1] << _BITS) | k[:, 2]


def _member(sorted_codes, codes):
    if sorted_codes.size == 0:
        return np.zeros(codes.shape, dtype=bool)
    idx = np.searchsorted(sorted_codes, codes)
    idx = np.minimum(idx, sorted_codes.size - 1)
    return sorted_codes[idx] == codes


@dataclass(frozen=True)
class ClassVoxelGrid:
    label: int
    size: float
    origin: np.ndarray
    keys: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError("voxel size must be positive")
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        if keys.size and np.abs(keys).max() >= _LIM:
            raise ValueError("voxel coordinates exceed the addressable range")
        # keys kept in code order so equal grids serialize identically
        codes, first = np.unique(pack_keys(keys), return_index=True)
        keys = keys[first]
        keys.setflags(write=False)
        codes.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "_codes", codes)
        object.__setattr__(self, "_support", None)

    def __len__(self):
        return self.keys.shape[0]

    def voxel_of(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.floor((x - self.origin) / self.size).astype(np.int64)

    def contains(self, keys):
        return _member(self._codes, pack_keys(keys))

    @property
    def support_codes(self):
        """Codes of every voxel whose 3x3x3 block touches an occupied voxel."""
        if self._support is None:
            if len(self):
                sup = (self.keys[:, None, :] + _NEIGH[None]).reshape(-1, 3)
                codes = np.unique(pack_keys(sup))
            else:
                codes = np.zeros(0, dtype=np.int64)
            codes.setflags(write=False)
            object.__setattr__(self, "_support", codes)
        return self._support

    def supported(self, x):
        """True where ``d_occ(x) > 0``; vectorized over (M, 3) points."""
        return _member(self.support_codes, pack_keys(self.voxel_of(x)))

    def d_occ(self, x):
        """Occupied-voxel count of the 3x3x3 block around the voxel of each point."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        v = self.voxel_of(x.reshape(-1, 3))
        cnt = np.zeros(v.shape[0], dtype=np.int64)
        for off in _NEIGH:
            cnt += self.contains(v + off)
        return int(cnt[0]) if single else cnt

    def digest(self):
        h = hashlib.sha256()
        h.update(struct.pack("<id", int(self.label), float(self.size)))
        h.update(self.origin.tobytes())
        h.update(np.ascontiguousarray(self.keys).tobytes())
        return h.hexdigest()


def d_occ(x, grid: ClassVoxelGrid):
    return grid.d_occ(x)


# ------------------------------------------------------------ point clouds

def build_class_pointclouds(scene: SurfelScene, cams, renders=None, n_classes=None):
    """Backproject every alpha-passing pixel of the semantic renders, grouped by class."""
    if renders is None:
        renders = [raster.render(scene, cam) for cam in cams]
    L = n_classes if n_classes is not None else scene.n_classes
    chunks = {c: [] for c in range(L)}
    for cam, r in zip(cams, renders):
        sem = r.semantic.reshape(-1)
        keep = (r.alpha.reshape(-1) >= ALPHA_GATE) & (sem >= 0)
        pts = cam.center + r.depth.reshape(-1)[keep, None] * cam.pixel_directions()[keep]
        lab = sem[keep]
        for c in np.unique(lab):
            chunks.setdefault(int(c), []).append(pts[lab == c])
    clouds = {}
    for c, parts in sorted(chunks.items()):
        clouds[c] = np.concatenate(parts) if parts else np.zeros((0, 3))
        if c > 0 and clouds[c].shape[0] == 0:
            log.warning("class %d has no visible points; all its samples count as unseen", c)
    return clouds


def knn_mean_distance(P, k, max_queries=MAX_QUERIES, seed=0, full=False):
    """Mean distance to the k-th nearest neighbor, with k clamped to |P|-1."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    if n < 2:
        raise ConfigurationError("k-NN distance needs at least two points")
    kk = int(min(int(k), n - 1))
    if kk < 1:
        raise ConfigurationError("k must be at least 1")
    if full or n <= max_queries:
        Q = P
    else:
        Q = P[np.sort(np.random.default_rng(seed).choice(n, max_queries, replace=False))]
    dist, _ = cKDTree(P).query(Q, k=kk + 1)
    return float(np.mean(dist[:, kk]))


def adaptive_voxel_size(d_k, k):
    if not d_k > 0:
        raise ConfigurationError("d_k must be positive")
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    rho = k / (4.0 / 3.0 * np.pi * d_k ** 3)
    return float(np.cbrt(k / rho))


def voxelize(clouds: dict, s, origin=None, meta=None):
    """Per-class grids on a shared lattice; voxels hit by several classes stay empty."""
    if not s > 0:
        raise ConfigurationError("voxel size must be positive")
    nonempty = [np.asarray(P, dtype=np.float64).reshape(-1, 3) for P in clouds.values()]
    nonempty = [P for P in nonempty if P.shape[0]]
    if origin is None:
        origin = np.min(np.concatenate(nonempty), axis=0) if nonempty else np.zeros(3)
    origin = np.asarray(origin, dtype=np.float64)
    codes = {}
    for c, P in clouds.items():
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        codes[c] = np.unique(pack_keys(np.floor((P - origin) / s).astype(np.int64)))
    allc = np.concatenate([v for v in codes.values()]) if codes else np.zeros(0, np.int64)
    uniq, cnt = np.unique(allc, return_counts=True)
    shared = uniq[cnt > 1]
    grids = {}
    for c, cc in codes.items():
        keep = cc[~np.isin(cc, shared)]
        keys = _unpack(keep)
        grids[c] = ClassVoxelGrid(int(c), float(s), origin, keys, dict(meta or {}))
    return grids


def _unpack(codes):
    codes = np.asarray(codes, dtype=np.int64)
    m = (1 << _BITS) - 1
    return np.stack([(codes >> (2 * _BITS)) & m, (codes >> _BITS) & m, codes & m], axis=1) - _OFF


def build_grids(scene, cams, k, renders=None, n_classes=None, max_queries=MAX_QUERIES, seed=0):
    """Point clouds, adaptive voxel size and voxelization in one call."""
    clouds = build_class_pointclouds(scene, cams, renders, n_classes)
    union = np.concatenate([P for P in clouds.values()]) if clouds else np.zeros((0, 3))
    d_k = knn_mean_distance(union, k, max_queries=max_queries, seed=seed)
    s = adaptive_voxel_size(d_k, k)
    rho = k / (4.0 / 3.0 * np.pi * d_k ** 3)
    meta = {"k": int(k), "k_eff": int(min(k, union.shape[0] - 1)), "d_k": d_k, "rho": rho,
            "n_points": int(union.shape[0])}
    grids = voxelize(clouds, s, meta=meta)
    lost = [c for c, P in clouds.items() if len(P) and not len(grids[c])]
    if lost:
        log.warning("voxel size %.4g empties the grids of classes %s through collisions; "
                    "every sample of those classes counts as unseen (try a smaller k)", s, lost)
    return grids


def grids_digest(grids):
    h = hashlib.sha256()
    for c in sorted(grids):
        h.update(grids[c].digest().encode())
    return h.hexdigest()


# ---------------------------------------------------------------- sampling

def halton(n, base, start=0):
    """Radical-inverse sequence entries ``start .. start + n - 1``."""
    idx = np.arange(start, start + n, dtype=np.int64)
    out = np.zeros(n)
    f = 1.0
    i = idx.copy()
    while np.any(i > 0):
        f /= base
        out += f * (i % base)
        i //= base
    return out


@functools.lru_cache(maxsize=16)
def _halton_base(Z):
    base = np.stack([halton(Z, 2), halton(Z, 3)], axis=-1)
    base.setflags(write=False)
    return base


def sample_uv(Z, seed=None, n=1):
    """(n, Z, 2) UV offsets uniform on the radius-3 disk.

    Points come from a 2-3 Halton sequence mapped by ``r = 3 sqrt(u1)``,
    ``theta = 2 pi u2``. Without a seed the sequence is used as is, so the
    first sample is the disk center. With a seed every surfel gets its own
    random Cranley-Patterson shift, which keeps the stratification but lets
    repeated draws cover the whole disk.
    """
    if Z < 1:
        raise ConfigurationError("Z must be at least 1")
    base = _halton_base(int(Z))
    u = np.broadcast_to(base, (n, Z, 2))
    if seed is not None:
        shift = np.random.default_rng(seed).random((n, 1, 2))
        u = np.mod(u + shift, 1.0)
    r = CUTOFF * np.sqrt(u[..., 0])
    th = 2.0 * np.pi * u[..., 1]
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


@dataclass
class SurfelSampleSet:
    uv: np.ndarray
    world: np.ndarray
    density: np.ndarray


def sample_surfels(scene: SurfelScene, Z, seed=None) -> SurfelSampleSet:
    N = len(scene)
    uv = sample_uv(Z, seed, N)
    R = scene.frames()
    sc = scene.scales
    off = (uv[..., 0:1] * sc[:, None, 0:1]) * R[:, None, :, 0] + \
          (uv[..., 1:2] * sc[:, None, 1:2]) * R[:, None, :, 1]
    world = scene.means[:, None, :] + off
    dens = np.exp(-0.5 * np.sum(uv * uv, axis=-1))
    return SurfelSampleSet(uv, world, dens)


def iteration_seed(seed, iteration):
    return (int(seed) ^ int(iteration)) & 0xFFFFFFFFFFFFFFFF


def unseen_flags(scene: SurfelScene, grids, samples: SurfelSampleSet):
    """(N, Z) True where the sample has no same-class support."""
    N, Z = samples.density.shape
    q = np.ones((N, Z), dtype=bool)
    for c in np.unique(scene.labels):
        idx = np.nonzero(scene.labels == c)[0]
        g = grids.get(int(c))
        if g is None:
            log.warning("no grid for class %d; its samples count as unseen", c)
            continue
        q[idx] = ~g.supported(samples.world[idx].reshape(-1, 3)).reshape(len(idx), Z)
    return q


def occupancy_loss(scene: SurfelScene, grids, Z, seed=None, mode="surface", samples=None):
    """Occupancy loss and its parameter gradients.

    ``mode="surface"`` holds the sample positions fixed and differentiates
    the density there with respect to center, frame and scales as well as
    opacity; ``mode="opacity"`` only differentiates through opacity.
    """
    N = len(scene)
    if N == 0:
        return 0.0, ParamGrads.zeros(0)
    if samples is None:
        samples = sample_surfels(scene, Z, seed)
    Z = samples.density.shape[1]
    q = unseen_flags(scene, grids, samples)
    opa = scene.opacities
    G = samples.density
    norm = 1.0 / (N * Z)
    per = np.sum(np.where(q, G, 0.0), axis=1)
    loss = float(np.sum(opa * per) * norm)

    grads = ParamGrads.zeros(N)
    grads.opacity_logits = per * norm * opa * (1.0 - opa)
    if mode == "opacity":
        return loss, grads
    if mode != "surface":
        raise ConfigurationError(f"unknown occupancy gradient mode {mode!r}")
    R = scene.frames()
    tu, tv = R[:, :, 0], R[:, :, 1]
    sc = scene.scales
    r = samples.world - scene.means[:, None, :]
    # with x' fixed at the current parameters its UV coordinates are the sampled ones
    U = samples.uv[..., 0]
    V = samples.uv[..., 1]
    g = G
    dG = np.where(q, opa[:, None] * norm, 0.0)
    gU = -dG * U * g
    gV = -dG * V * g
    grads.log_scales = np.stack([-(gU * U).sum(1), -(gV * V).sum(1)], axis=1)
    su, sv = sc[:, 0:1], sc[:, 1:2]
    grads.means = -(gU.sum(1)[:, None] * tu / su + gV.sum(1)[:, None] * tv / sv)
    g_tu = np.einsum("nz,nzk->nk", gU, r) / su
    g_tv = np.einsum("nz,nzk->nk", gV, r) / sv
    grads.quats = frame_grad_to_quat(scene.quats, g_tu, g_tv, np.zeros_like(g_tu))
    return loss, grads


def unseen_mass(scene, grids, Z, seed=None):
    return occupancy_loss(scene, grids, Z, seed, mode="opacity")[0]


# -------------------------------------------------------------------- I/O

GRID_MAGIC = b"BEAV"


def write_grid(path, grid: ClassVoxelGrid):
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<Id3dQ", int(grid.label), float(grid.size), *grid.origin, len(grid)))
        fh.write(np.ascontiguousarray(grid.keys, dtype="<i4").tobytes())


def read_grid(path) -> ClassVoxelGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    hdr = struct.calcsize("<Id3dQ")
    label, s, ox, oy, oz, count = struct.unpack("<Id3dQ", data[4:4 + hdr])
    body = data[4 + hdr:]
    if len(body) != 12 * count:
        raise ValueError(f"{path}: expected {count} voxel keys, found {len(body) / 12:g}")
    keys = np.frombuffer(body, dtype="<i4").reshape(-1, 3).astype(np.int64)
    return ClassVoxelGrid(label, s, np.array([ox, oy, oz]), keys)
