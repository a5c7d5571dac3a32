import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from beags import metrics, raster
from beags.core import ConfigurationError

from helpers import front_camera, random_scene

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_identical_masks():
    m = np.zeros((8, 8), bool)
    m[2:5, 3:7] = True
    assert metrics.binary_iou_acc(m, m) == (1.0, 1.0)
    assert metrics.boundary_iou(m, m) == 1.0


def test_disjoint_masks():
    a = np.zeros((8, 8), bool)
    b = a.copy()
    a[:, :2] = True
    b[:, -2:] = True
    assert metrics.binary_iou_acc(a, b)[0] == 0.0


def test_half_overlapping_rectangles():
    a = np.zeros((10, 20), bool)
    b = a.copy()
    a[2:8, 2:10] = True   # 48 px
    b[2:8, 6:14] = True   # 48 px, overlap 24
    iou, acc = metrics.binary_iou_acc(a, b)
    assert iou == 24 / 72
    assert acc == (200 - 48) / 200


def test_both_empty():
    z = np.zeros((5, 5), bool)
    assert metrics.binary_iou_acc(z, z) == (1.0, 1.0)
    assert metrics.boundary_iou(z, z) == 1.0


def test_shape_mismatch():
    with pytest.raises(ConfigurationError):
        metrics.binary_iou_acc(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        metrics.psnr(np.zeros((3, 3)), np.zeros((3, 4)))


@settings(max_examples=80, deadline=None)
@given(masks, st.data())
def test_iou_properties(a, data):
    b = data.draw(arrays(bool, a.shape))
    iou, acc = metrics.binary_iou_acc(a, b)
    assert iou == metrics.binary_iou_acc(b, a)[0]
    assert 0 <= iou <= 1 and 0 <= acc <= 1
    assert (iou == 1.0) == bool(np.array_equal(a, b))


def brute_boundary(m, d):
    h, w = m.shape
    out = np.zeros_like(m)
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            # inside the erosion iff every pixel of the (2d+1)^2 window is in the mask and in the image
            win_ok = all(0 <= i + a < h and 0 <= j + b < w and m[i + a, j + b]
                         for a in range(-d, d + 1) for b in range(-d, d + 1))
            out[i, j] = not win_ok
    return out


def test_boundary_region_brute_force():
    rng = np.random.default_rng(0)
    m = rng.random((20, 24)) < 0.7
    for d in (1, 2, 3):
        np.testing.assert_array_equal(metrics.boundary_region(m, d), brute_boundary(m, d))


def test_biou_against_dilated_square():
    m = np.zeros((100, 100), bool)
    m[20:80, 20:80] = True
    dil = np.zeros_like(m)
    dil[19:81, 19:81] = True
    d = metrics.boundary_width(m.shape)
    assert d == 3
    bp, bg = brute_boundary(dil, d), brute_boundary(m, d)
    expect = (bp & bg).sum() / (bp | bg).sum()
    assert metrics.boundary_iou(dil, m) == pytest.approx(expect, abs=1e-15)
    assert metrics.boundary_iou(dil, m) < metrics.binary_iou_acc(dil, m)[0]


def test_biou_equals_iou_on_thin_lines():
    a = np.zeros((50, 50), bool)
    b = a.copy()
    a[10, 5:40] = True
    b[10, 20:45] = True
    assert metrics.boundary_iou(a, b) == metrics.binary_iou_acc(a, b)[0]


def test_psnr():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert metrics.psnr(a, a) == 99.0
    assert metrics.psnr(np.full((4, 4, 3), 0.6), np.full((4, 4, 3), 0.5)) == pytest.approx(20.0, abs=1e-12)
    b = np.random.default_rng(1).random((8, 8, 3))
    assert metrics.psnr(a, b) == pytest.approx(10 * np.log10(1 / np.mean((a - b) ** 2)), abs=1e-12)


# ------------------------------------------------------------ evaluations

def scene_and_gt(n_classes=3):
    rng = np.random.default_rng(0)
    s = random_scene(rng, 30, n_classes)
    cams = [front_camera(), front_camera(24, 24, fx=30)]
    ext = {c: [raster.render_class_subset(s, cam, c).alpha >= 0.5 for cam in cams] for c in range(1, n_classes)}
    ren = [np.maximum(raster.render(s, cam).semantic, 0) for cam in cams]
    return s, cams, ext, ren


def test_eval_on_own_ground_truth_is_perfect():
    s, cams, ext, ren = scene_and_gt()
    e = metrics.eval_extracted(s, cams, ext)
    r = metrics.eval_rendered(s, cams, ren)
    assert e["mean"] == {"iou": 1.0, "acc": 1.0, "biou": 1.0}
    assert r["mean"]["acc"] == 1.0 and r["mean"]["iou"] == 1.0
    assert sorted(e["classes"]) == [1, 2]


def test_deleted_class_scores_zero():
    s, cams, ext, _ = scene_and_gt()
    gone = s.subset(np.flatnonzero(s.labels != 2))
    e = metrics.eval_extracted(gone, cams, ext)
    assert e["classes"][2]["iou"] == 0.0
    assert e["classes"][1]["iou"] == 1.0


def test_single_class_extracted_equals_full_alpha():
    s, cams, _, _ = scene_and_gt()
    s.labels[:] = 1
    gt = {1: [raster.render(s, cam).alpha >= 0.5 for cam in cams]}
    assert metrics.eval_extracted(s, cams, gt)["mean"]["iou"] == 1.0


def test_all_background_rendered():
    s, cams, _, _ = scene_and_gt()
    s.labels[:] = 0
    r = metrics.eval_rendered(s, cams, [np.zeros(c.shape, int) for c in cams], classes=[1])
    assert r["mean"]["acc"] == 1.0


def test_missing_ground_truth_is_skipped(caplog):
    s, cams, ext, _ = scene_and_gt()
    ext[1][1] = None
    e = metrics.eval_extracted(s, cams, ext)
    assert e["classes"][1]["views"] == 1
    assert "no extracted ground truth" in caplog.text


def test_report_json_and_table():
    s, cams, ext, ren = scene_and_gt()
    rep = metrics.MetricReport("a", metrics.eval_extracted(s, cams, ext), metrics.eval_rendered(s, cams, ren),
                               psnr_after=31.5)
    d = json.loads(rep.to_json())
    assert d["scene_id"] == "a" and d["extracted"]["classes"]["1"]["iou"] == 1.0
    rep2 = metrics.MetricReport("b", rep.extracted, rep.rendered, psnr_after=30.0)
    table = metrics.format_table([rep, rep2])
    lines = table.strip().splitlines()
    assert lines[0].split()[:3] == ["Scene", "Ext.Acc", "Ext.IoU"]
    assert lines[-1].split()[0] == "Mean"
    assert len({len(l) for l in lines if not set(l) <= {"-"}}) == 1


def test_scene_first_averaging():
    mk = lambda v: metrics.MetricReport("s", {"mean": {"iou": v, "acc": v, "biou": v}},
                                        {"mean": {"iou": v, "acc": v, "biou": v}})
    assert metrics.average_reports([mk(0.2), mk(0.6)])["extracted"]["iou"] == pytest.approx(0.4)
