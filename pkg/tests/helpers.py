"""Small scenes and finite-difference utilities shared by the tests."""

import numpy as np

from beags import occupancy, raster, trainer
from beags.core import Camera, SurfelScene, logit

FD_STEP = 1e-4


def front_camera(width=32, height=32, fx=40.0, dist=4.0):
    return Camera.look_at([0.0, 0.0, -dist], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], fx, fx, width, height)


def tilted_quats(rng, n, max_tilt_deg=60.0):
    """Random spin about z followed by a tilt of at most ``max_tilt_deg`` off the z axis."""
    spin = rng.uniform(0, 2 * np.pi, n)
    tilt = np.radians(max_tilt_deg) * np.sqrt(rng.uniform(0, 1, n))
    az = rng.uniform(0, 2 * np.pi, n)
    qs = np.stack([np.cos(spin / 2), 0 * spin, 0 * spin, np.sin(spin / 2)], axis=1)
    qt = np.stack([np.cos(tilt / 2), np.sin(tilt / 2) * np.cos(az), np.sin(tilt / 2) * np.sin(az),
                   0 * tilt], axis=1)
    w1, v1 = qt[:, :1], qt[:, 1:]
    w2, v2 = qs[:, :1], qs[:, 1:]
    return np.concatenate([w1 * w2 - np.sum(v1 * v2, 1, keepdims=True),
                           w1 * v2 + w2 * v1 + np.cross(v1, v2)], axis=1)


def random_scene(rng, n=10, n_classes=3, spread=0.6, max_tilt_deg=60.0):
    """Surfels scattered in front of :func:`front_camera`.

    Tilt is bounded because near-grazing surfels make the loss so curved
    that a 1e-4 central difference is no longer accurate to 1e-4.
    """
    return SurfelScene(
        means=rng.normal(0, spread, (n, 3)),
        quats=tilted_quats(rng, n, max_tilt_deg),
        log_scales=np.log(rng.uniform(0.15, 0.45, (n, 2))),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
        opacity_logits=logit(rng.uniform(0.2, 0.8, n)),
        labels=rng.integers(0, n_classes, n),
    )


def stacked_pair(alpha=0.5, classes=(1, 2), colors=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))):
    """Two large surfels facing the front camera, the first one nearer."""
    return SurfelScene(
        means=[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]],
        quats=[[1.0, 0.0, 0.0, 0.0]] * 2,
        log_scales=np.log([[50.0, 50.0]] * 2),
        colors=colors,
        opacity_logits=logit(np.array([alpha, alpha])),
        labels=list(classes),
    )


def iter_params(scene):
    for f in SurfelScene.PARAM_FIELDS:
        arr = getattr(scene, f)
        for idx in np.ndindex(arr.shape):
            yield f, idx


def central_difference(fn, scene, field, idx, h=FD_STEP):
    a = scene.copy()
    getattr(a, field)[idx] += h
    b = scene.copy()
    getattr(b, field)[idx] -= h
    return (fn(a) - fn(b)) / (2 * h)


def relative_error(fd, an, floor=1e-6):
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def hit_signature(scene, cam):
    """Composited (pixel, surfel) pairs in blend order; changes mark a non-smooth point."""
    out = raster.render(scene, cam)
    pix, sid, _ = out.contributions(0.0)
    return pix.tobytes() + sid.tobytes()


def pushed_targets(scene, cam, rng, lo=0.05, hi=0.2):
    """Targets offset from the render so that no residual sits near the L1 kink."""
    color = raster.render(scene, cam).color
    off = rng.uniform(lo, hi, color.shape) * rng.choice([-1.0, 1.0], color.shape)
    return color + off


def smooth_between(scene, cam, field, idx, h=FD_STEP):
    """True when the hit structure is the same at both finite-difference points."""
    a = scene.copy()
    getattr(a, field)[idx] += h
    b = scene.copy()
    getattr(b, field)[idx] -= h
    return hit_signature(a, cam) == hit_signature(b, cam)


def gradcheck_seed(seed, cam=None, n=10):
    """Compare rgb + boundary gradients against central differences for one random scene.

    Returns ``(worst relative error, components checked, components skipped)``.
    A component is skipped when the +h and -h scenes composite different
    (pixel, surfel) pairs: a splat edge crossed the 3 sigma cutoff or the
    depth order flipped, so the loss has a jump inside the interval.
    """
    rng = np.random.default_rng(seed)
    cam = cam or front_camera()
    scene = random_scene(rng, n)
    gt = pushed_targets(scene, cam, rng)
    sup = rng.integers(-1, 3, cam.shape)
    n_sup = int((sup >= 0).sum())

    def loss(s):
        out = raster.render(s, cam, sup)
        return trainer.rgb_loss(out, gt)[0] + out.boundary[sup >= 0].sum() / n_sup

    out = raster.render(scene, cam, sup)
    up = {"color": trainer.rgb_loss(out, gt)[1], "boundary": np.where(sup >= 0, 1.0 / n_sup, 0.0)}
    g = raster.backward(scene, cam, sup, up, out)
    worst, checked, skipped = 0.0, 0, 0
    for f, idx in iter_params(scene):
        if not smooth_between(scene, cam, f, idx):
            skipped += 1
            continue
        fd = central_difference(loss, scene, f, idx)
        worst = max(worst, relative_error(fd, getattr(g, f)[idx]))
        checked += 1
    return worst, checked, skipped


def partial_grids(rng, scene):
    """Same random voxel set for three classes; about half the samples end unsupported."""
    keys = np.unique(rng.integers(-4, 4, (120, 3)), axis=0)
    return {c: occupancy.ClassVoxelGrid(c, 0.25, np.full(3, -1.0), keys) for c in range(3)}


def occ_gradcheck_seed(seed, Z=20):
    """Worst relative error of the occupancy loss gradient w.r.t. opacity logits."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 10)
    grids = partial_grids(rng, scene)
    _, g = occupancy.occupancy_loss(scene, grids, Z, seed=seed)
    worst = 0.0
    for i in range(len(scene)):
        fd = central_difference(lambda s: occupancy.occupancy_loss(s, grids, Z, seed=seed)[0],
                                scene, "opacity_logits", (i,))
        worst = max(worst, relative_error(fd, g.opacity_logits[i], floor=1e-12))
    return worst
