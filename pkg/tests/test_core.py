import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beags.core import (Camera, GaussianSurfel, Ray, generate_ray, intersect_splat, project_point,
                        project_points, quat_to_rotmat, surfel_frame)

from helpers import front_camera


def surfel(center=(0, 0, 0), quat=(1, 0, 0, 0), scale=(1.0, 1.0), opacity_logit=0.0):
    return GaussianSurfel(np.asarray(center, float), np.asarray(quat, float),
                          np.log(np.asarray(scale, float)), np.zeros(3), opacity_logit)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def rotation_oracle(q):
    # Rodrigues form of the same rotation, built independently of quat_to_rotmat
    w, v = q[0], q[1:]
    angle = 2 * np.arctan2(np.linalg.norm(v), w)
    if np.linalg.norm(v) < 1e-15:
        return np.eye(3)
    k = v / np.linalg.norm(v)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


# ---------------------------------------------------------------- frames

def test_identity_frame():
    tu, tv, n = surfel_frame(surfel())
    np.testing.assert_allclose(tu, [1, 0, 0])
    np.testing.assert_allclose(tv, [0, 1, 0])
    np.testing.assert_allclose(n, [0, 0, 1])


def test_quarter_turn_about_z():
    c = np.cos(np.pi / 4)
    tu, tv, n = surfel_frame(surfel(quat=(c, 0, 0, c)))
    np.testing.assert_allclose(tu, [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(tv, [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_frame_matches_rotation_oracle(seed):
    q = random_quat(np.random.default_rng(seed))
    tu, tv, n = surfel_frame(surfel(quat=q))
    R = rotation_oracle(q)
    np.testing.assert_allclose(np.stack([tu, tv, n], axis=1), R, atol=1e-12)


def test_frames_orthonormal_for_many_quats():
    q = np.random.default_rng(1).normal(size=(10_000, 4))
    R = quat_to_rotmat(q)
    tu, tv, n = R[..., 0], R[..., 1], R[..., 2]
    assert np.abs(np.sum(tu * tv, -1)).max() < 1e-9
    assert np.abs(np.linalg.norm(tu, axis=-1) - 1).max() < 1e-9
    assert np.abs(np.linalg.norm(n, axis=-1) - 1).max() < 1e-9
    np.testing.assert_allclose(np.cross(tu, tv), n, atol=1e-12)


# ---------------------------------------------------------------- cameras

def test_camera_rejects_bad_pose():
    with pytest.raises(ValueError):
        Camera(10, 10, 5, 5, 10, 10, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(0, 10, 5, 5, 10, 10)


def test_principal_point_ray_is_forward():
    cam = front_camera()
    r = generate_ray(cam, (cam.cx, cam.cy))
    np.testing.assert_allclose(r.direction, cam.forward, atol=1e-15)
    np.testing.assert_allclose(r.origin, cam.center)


def test_corner_rays_mirror():
    cam = front_camera()
    a = generate_ray(cam, (0.5, 0.5)).direction
    b = generate_ray(cam, (cam.width - 0.5, cam.height - 0.5)).direction
    # mirror through the optical axis: forward parts equal, lateral parts opposite
    f = cam.forward
    np.testing.assert_allclose(a @ f, b @ f, atol=1e-15)
    np.testing.assert_allclose(a - (a @ f) * f, -(b - (b @ f) * f), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(0.0, 32.0), v=st.floats(0.0, 32.0), t=st.floats(0.01, 100.0))
def test_ray_projection_round_trip(u, v, t):
    cam = front_camera()
    r = generate_ray(cam, (u, v))
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-9
    pix, _ = project_point(cam, r.point_at(t))
    np.testing.assert_allclose(pix, [u, v], atol=1e-6)


def test_optical_axis_projection():
    cam = front_camera()
    pix, depth = project_point(cam, cam.center + cam.forward)
    np.testing.assert_allclose(pix, [cam.cx, cam.cy], atol=1e-12)
    assert depth == pytest.approx(1.0, abs=1e-12)


def test_behind_camera():
    cam = front_camera()
    assert project_point(cam, cam.center - cam.forward) is None
    assert project_point(cam, cam.center + 0.5e-4 * cam.forward) is None


def test_backproject_of_projection_round_trip():
    rng = np.random.default_rng(3)
    cam = Camera.look_at([3.0, -2.0, 1.5], [0, 0, 0], [0, 0, 1], 50, 45, 64, 48)
    X = rng.normal(0, 0.5, (200, 3))
    uv, z = project_points(cam, X)
    assert np.all(z > 0)
    for x, p, d in zip(X, uv, z):
        dc = np.array([(p[0] - cam.cx) / cam.fx, (p[1] - cam.cy) / cam.fy, 1.0]) * d
        back = cam.rotation.T @ (dc - cam.translation)
        np.testing.assert_allclose(back, x, atol=1e-9)


def test_camera_dict_round_trip():
    cam = Camera.look_at([3.0, -2.0, 1.5], [0, 0, 0], [0, 0, 1], 50, 45, 64, 48)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    np.testing.assert_array_equal(back.translation, cam.translation)


# ---------------------------------------------------------- intersection

def test_head_on_center_hit():
    g = surfel(center=(0.3, -0.2, 2.0), scale=(0.5, 0.2))
    o = np.array([0.3, -0.2, -1.0])
    hit = intersect_splat(Ray(o, np.array([0.0, 0.0, 1.0])), g)
    assert hit.depth == pytest.approx(3.0, abs=1e-15)
    np.testing.assert_allclose(hit.uv, [0, 0], atol=1e-15)
    assert hit.density == 1.0


def test_parallel_ray_misses():
    g = surfel(center=(0, 0, 2.0))
    assert intersect_splat(Ray(np.zeros(3), np.array([1.0, 0.0, 0.0])), g) is None


def test_plane_behind_origin_misses():
    g = surfel(center=(0, 0, -2.0))
    assert intersect_splat(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0])), g) is None


def test_cutoff():
    g = surfel(center=(0, 0, 1.0), scale=(1.0, 1.0))
    d = np.array([0.0, 0.0, 1.0])
    assert intersect_splat(Ray(np.array([2.99, 0, 0]), d), g) is not None
    assert intersect_splat(Ray(np.array([3.01, 0, 0]), d), g) is None


@pytest.mark.parametrize("seed", range(20))
def test_intersection_matches_linear_solve(seed):
    rng = np.random.default_rng(seed)
    q = random_quat(rng)
    p = rng.normal(0, 1, 3)
    sc = rng.uniform(0.5, 2.0, 2)
    g = surfel(center=p, quat=q, scale=sc)
    o = p + rng.normal(0, 3, 3)
    target = p + rng.normal(0, 0.5, 3)
    d = (target - o) / np.linalg.norm(target - o)
    R = rotation_oracle(q)
    # o + t d = p + a t_u + b t_v  ->  [d, -t_u, -t_v] [t, a, b]^T = p - o
    t, a, b = np.linalg.solve(np.stack([d, -R[:, 0], -R[:, 1]], axis=1), p - o)
    hit = intersect_splat(Ray(o, d), g)
    U, V = a / sc[0], b / sc[1]
    if t <= 1e-4 or U * U + V * V > 9:
        assert hit is None
        return
    assert hit.depth == pytest.approx(t, abs=1e-9)
    np.testing.assert_allclose(hit.uv, [U, V], atol=1e-9)
    assert abs(hit.density - np.exp(-0.5 * (U * U + V * V))) < 1e-12


def test_doubling_scale_halves_uv():
    rng = np.random.default_rng(5)
    g1 = surfel(center=(0, 0, 1), quat=random_quat(rng), scale=(0.8, 0.6))
    g2 = surfel(center=(0, 0, 1), quat=g1.quat, scale=(1.6, 0.6))
    ray = Ray(np.array([0.1, 0.05, -2.0]), np.array([0.0, 0.0, 1.0]))
    h1, h2 = intersect_splat(ray, g1), intersect_splat(ray, g2)
    assert h2.uv[0] == pytest.approx(h1.uv[0] / 2, rel=1e-12)
    assert h2.uv[1] == pytest.approx(h1.uv[1], rel=1e-12)
