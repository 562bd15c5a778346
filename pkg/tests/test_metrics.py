import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiltrecon.camera import look_at_pose
from tiltrecon.errors import ShapeError
from tiltrecon.mesh import Mesh, box_mesh, colorize, marching_cubes
from tiltrecon.metrics import (
    PSNR_CAP, EvalProtocol, PointCloud, chamfer, evaluate_protocol, f_score, nearest_sq_dist, per_view_csv, psnr,
    rasterize_mesh, report_json, sample_mesh, ssim, volume_iou,
)
from tiltrecon.reconstruct import reference_mesh
from tiltrecon.render import Intrinsics, rays_for_pose
from tiltrecon.triplane import AnalyticField, AnalyticShape, density_grid


def brute_sq(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1)


def brute_chamfer(a, b):
    return 0.5 * (brute_sq(a, b).mean() + brute_sq(b, a).mean())


def brute_f(a, b, tau):
    p = np.mean(brute_sq(a, b) <= tau * tau)
    r = np.mean(brute_sq(b, a) <= tau * tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def test_chamfer_trivial_cases():
    a = np.random.default_rng(0).random((30, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), a)


@pytest.mark.parametrize("seed", range(50))
def test_chamfer_and_fscore_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((rng.integers(20, 200), 3)) * rng.uniform(0.1, 2)
    b = rng.random((rng.integers(20, 200), 3)) * rng.uniform(0.1, 2)
    assert abs(chamfer(a, b) - brute_chamfer(a, b)) <= 1e-12
    assert np.array_equal(nearest_sq_dist(a, b), brute_sq(a, b))
    tau = 0.05 + 0.1 * rng.random()
    assert abs(f_score(a, b, tau) - brute_f(a, b, tau)) <= 1e-12


def test_nearest_neighbour_with_ties_equals_brute_force():
    grid = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    probes = grid[:40] + 0.5  # equidistant from several lattice points
    assert np.array_equal(nearest_sq_dist(probes, grid), brute_sq(probes, grid))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_chamfer_symmetry_and_scaling(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.random((40, 3)), rng.random((60, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)
    assert chamfer(a, b) >= 0
    assert chamfer(s * a, s * b) == pytest.approx(s * s * chamfer(a, b), rel=1e-9)
    assert f_score(a, b, 0.1) == f_score(b, a, 0.1)


def test_fscore_trivial_cases():
    a = np.random.default_rng(0).random((30, 3))
    assert f_score(a, a) == 1.0
    assert f_score(a, a + 100) == 0.0
    # boundary distance counts as matched
    assert f_score([[0, 0, 0]], [[0.25, 0, 0]], tau=0.25) == 1.0
    with pytest.raises(ValueError):
        f_score(a, a, tau=0)


def test_sample_single_triangle_inside():
    tri = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float), [[0, 1, 2]])
    pc = sample_mesh(tri, 5000, seed=1)
    p = pc.points
    assert np.all(p[:, 2] == 0) and np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0)
    assert np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12)
    assert np.array_equal(p, sample_mesh(tri, 5000, seed=1).points)


def test_sample_counts_proportional_to_area():
    box = box_mesh([0, 0, 0], [1, 2, 3])
    pc = sample_mesh(box, 100_000, seed=0)
    areas = box.face_areas()
    counts = np.bincount(pc.face_ids, minlength=len(areas))
    expected = 100_000 * areas / areas.sum()
    np.testing.assert_allclose(counts, expected, rtol=0.05)


def test_sample_rejects_empty():
    with pytest.raises(ValueError):
        sample_mesh(Mesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


def test_iou_identical_and_offset_cubes():
    a = box_mesh([0, 0, 0], [1, 1, 1])
    assert volume_iou(a, a, 32) == 1.0
    b = box_mesh([0.5, 0, 0], [1.5, 1, 1])
    assert volume_iou(a, b, 128) == pytest.approx(1 / 3, rel=0.02)
    far = box_mesh([5, 5, 5], [6, 6, 6])
    assert volume_iou(a, far, 32) == 0.0


def test_iou_sphere_in_cube():
    sphere = AnalyticShape("sphere", (0.5,))
    s = marching_cubes(density_grid(AnalyticField(sphere), 96), sphere.iso)
    c = box_mesh([-0.5] * 3, [0.5] * 3)
    assert volume_iou(s, c, 128) == pytest.approx(math.pi / 6, rel=0.02)


def test_iou_invariant_under_rigid_motion():
    a = box_mesh([0, 0, 0], [1, 1, 1])
    b = box_mesh([0.3, 0.2, 0], [1.3, 1.2, 1])
    theta = 0.4
    R = np.array([[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]])
    move = lambda m: Mesh(m.vertices @ R.T + [0.7, -0.2, 0.1], m.faces)
    base = volume_iou(a, b, 96)
    assert 0 <= base <= 1
    assert volume_iou(move(a), move(b), 96) == pytest.approx(base, abs=0.01)


def test_iou_of_open_mesh_uses_majority_vote():
    a = box_mesh([0, 0, 0], [1, 1, 1])
    holed = Mesh(a.vertices, a.faces[:-1])
    with pytest.warns(RuntimeWarning):
        iou = volume_iou(holed, a, 32)
    assert iou > 0.9


def test_psnr_cases():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(img, img) == PSNR_CAP
    assert psnr(np.full((4, 4), 0.5), np.zeros((4, 4))) == pytest.approx(6.0206, abs=1e-3)
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def naive_ssim(x, y, size=11, sigma=1.5):
    c1, c2 = 0.01**2, 0.03**2
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    vals = []
    for ch in range(x.shape[2]):
        for i in range(x.shape[0] - size + 1):
            for j in range(x.shape[1] - size + 1):
                a = x[i:i + size, j:j + size, ch]
                b = y[i:i + size, j:j + size, ch]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * (a - ma) ** 2).sum()
                vb = (w * (b - mb) ** 2).sum()
                cov = (w * (a - ma) * (b - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return np.mean(vals)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_naive_windows(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((20, 18, 3))
    y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(naive_ssim(x, y), abs=1e-9)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(3)
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_rasterized_sphere_silhouette_matches_disc():
    sphere = AnalyticShape("sphere", (0.5,))
    m = colorize(marching_cubes(density_grid(AnalyticField(sphere), 96), sphere.iso), AnalyticField(sphere))
    pose = look_at_pose(20, 15, 2.5)
    intr = Intrinsics.from_fov(96, 96)
    rgb, mask = rasterize_mesh(m, pose, intr)
    o, d = rays_for_pose(pose, intr)
    disc = np.linalg.norm(np.cross(o, d), axis=-1) < 0.5
    hit = mask > 0.5
    assert (hit & disc).sum() / (hit | disc).sum() > 0.97
    np.testing.assert_allclose(rgb[hit], np.tile(sphere.color, (hit.sum(), 1)), atol=1e-9)
    assert np.all(rgb[~hit] == 0)


def test_rasterizer_depth_order():
    near = box_mesh([0.4, -0.2, -0.2], [0.6, 0.2, 0.2])
    far = box_mesh([-0.6, -0.5, -0.5], [-0.4, 0.5, 0.5])
    verts = np.concatenate([near.vertices, far.vertices])
    faces = np.concatenate([near.faces, far.faces + 8])
    colors = np.concatenate([np.tile([1.0, 0, 0], (8, 1)), np.tile([0, 0, 1.0], (8, 1))])
    m = Mesh(verts, faces, colors)
    rgb, mask = rasterize_mesh(m, look_at_pose(0, 0, 2.5), Intrinsics.from_fov(32, 32))
    np.testing.assert_allclose(rgb[16, 16], [1, 0, 0])


def test_protocol_default_renders_24_views():
    poses = EvalProtocol().poses()
    assert len(poses) == 24
    assert sorted({e for e, _, _ in poses}) == [0, 15, 30]


SMALL = EvalProtocol(rings=[0, 30], views_per_ring=3, resolution=48, n_points=5000, iou_resolution=48)


def test_protocol_identity():
    gt = reference_mesh(AnalyticShape("sphere", (0.5,)), resolution=48)
    r = evaluate_protocol(gt, gt, SMALL)
    assert r["chamfer"] < 1e-3 and r["f_score"] == 1.0 and r["vol_iou"] == 1.0
    assert r["psnr_mean"] == PSNR_CAP and r["ssim_mean"] == pytest.approx(1.0)
    assert len(r["per_view"]) == 6


def test_report_aggregates_equal_csv_recomputation():
    shape = AnalyticShape("sphere", (0.5,))
    gt = reference_mesh(shape, resolution=48)
    gen = reference_mesh(AnalyticShape("sphere", (0.45,)), resolution=32)
    r = evaluate_protocol(gen, gt, SMALL)
    rows = list(csv.DictReader(io.StringIO(per_view_csv(r))))
    assert len(rows) == 6
    assert np.mean([float(x["psnr"]) for x in rows]) == r["psnr_mean"]
    assert np.mean([float(x["ssim"]) for x in rows]) == r["ssim_mean"]
    doc = report_json(r)
    for key in ("chamfer", "vol_iou", "f_score", "psnr_mean", "ssim_mean", "per_view"):
        assert f'"{key}"' in doc
    assert 0 < r["vol_iou"] < 1


def test_protocol_rejects_empty_generated_mesh():
    with pytest.raises(ValueError):
        evaluate_protocol(Mesh(np.zeros((0, 3)), np.zeros((0, 3))), box_mesh([0] * 3, [1] * 3), SMALL)
