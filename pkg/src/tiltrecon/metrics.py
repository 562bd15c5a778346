"""Geometry and texture metrics and the multi-ring evaluation protocol.

Conventions: Chamfer distance uses squared Euclidean distances, averaged
in both directions and halved. F-score counts a point as matched when its
nearest neighbour lies within ``tau`` (inclusive). Volume IoU voxelizes
both solids by ray parity on a shared grid spanning their union bounding
box.
"""

from dataclasses import dataclass, field
import csv
import io
import json
import math
import warnings

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import look_at_pose
from .errors import ShapeError
from .mesh import Mesh


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    face_ids: np.ndarray = None

    def __len__(self):
        return len(self.points)


def sample_mesh(mesh, n_points, seed=0):
    """Area-weighted uniform samples on the surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n_points, p=areas / total)
    r1, r2 = rng.random(n_points), rng.random(n_points)
    s = np.sqrt(r1)
    a, b, c = (1.0 - s), s * (1.0 - r2), s * r2
    tri = mesh.vertices[mesh.faces[face]]
    pts = a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]
    return PointCloud(pts, face)


def _points(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    return pts


def nearest_sq_dist(src, dst):
    """Squared distance from every ``src`` point to its nearest ``dst`` point.

    A KD-tree picks the neighbour; the distance is then recomputed from the
    coordinates, so results match an exhaustive search bit for bit.
    """
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return (diff * diff).sum(axis=1)


def chamfer(a, b):
    pa, pb = _points(a), _points(b)
    return 0.5 * (nearest_sq_dist(pa, pb).mean() + nearest_sq_dist(pb, pa).mean())


def f_score(a, b, tau=0.05):
    if not tau > 0:
        raise ValueError("tau must be positive")
    pa, pb = _points(a), _points(b)
    precision = float(np.mean(nearest_sq_dist(pa, pb) <= tau * tau))
    recall = float(np.mean(nearest_sq_dist(pb, pa) <= tau * tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _covering_pairs(tri2d, ys, zs, max_pairs=1 << 22):
    """Yield (triangle ids, iy, iz) for ray centers inside each projected triangle.

    Edges use a half-open fill rule so a ray through a shared edge or
    vertex is counted by exactly one triangle of a consistent surface.
    """
    area = ((tri2d[:, 1, 0] - tri2d[:, 0, 0]) * (tri2d[:, 2, 1] - tri2d[:, 0, 1])
            - (tri2d[:, 2, 0] - tri2d[:, 0, 0]) * (tri2d[:, 1, 1] - tri2d[:, 0, 1]))
    keep = area != 0
    tid = np.nonzero(keep)[0]
    tri = tri2d[keep].copy()
    flip = area[keep] < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    dy, dz = ys[1] - ys[0] if len(ys) > 1 else 1.0, zs[1] - zs[0] if len(zs) > 1 else 1.0
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    iy0 = np.clip(np.ceil((lo[:, 0] - ys[0]) / dy), 0, len(ys)).astype(np.int64)
    iy1 = np.clip(np.floor((hi[:, 0] - ys[0]) / dy), -1, len(ys) - 1).astype(np.int64)
    iz0 = np.clip(np.ceil((lo[:, 1] - zs[0]) / dz), 0, len(zs)).astype(np.int64)
    iz1 = np.clip(np.floor((hi[:, 1] - zs[0]) / dz), -1, len(zs) - 1).astype(np.int64)
    # widen by one to absorb rounding in the index estimate; the exact test decides
    iy0, iz0 = np.maximum(iy0 - 1, 0), np.maximum(iz0 - 1, 0)
    iy1, iz1 = np.minimum(iy1 + 1, len(ys) - 1), np.minimum(iz1 + 1, len(zs) - 1)
    wy, wz = np.maximum(iy1 - iy0 + 1, 0), np.maximum(iz1 - iz0 + 1, 0)
    counts = wy * wz
    start = 0
    while start < len(tri):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_pairs, side="right")))
        sel = np.arange(start, stop)
        start = stop
        c = counts[sel]
        if c.sum() == 0:
            continue
        rep = np.repeat(sel, c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        iy = iy0[rep] + offs % wy[rep]
        iz = iz0[rep] + offs // wy[rep]
        p = np.stack([ys[iy], zs[iz]], axis=1)
        t = tri[rep]
        inside = np.ones(len(rep), dtype=bool)
        for k in range(3):
            a, b = t[:, k], t[:, (k + 1) % 3]
            d = b - a
            e = d[:, 0] * (p[:, 1] - a[:, 1]) - d[:, 1] * (p[:, 0] - a[:, 0])
            top_left = (d[:, 1] < 0) | ((d[:, 1] == 0) & (d[:, 0] > 0))
            inside &= (e > 0) | ((e == 0) & top_left)
        yield tid[rep[inside]], iy[inside], iz[inside]


def parity_occupancy(mesh, axes_centers, axis=0):
    """Inside/outside at voxel centers by counting surface crossings along +``axis``."""
    others = [a for a in range(3) if a != axis]
    xs, ys, zs = axes_centers[axis], axes_centers[others[0]], axes_centers[others[1]]
    tri = mesh.triangles()
    counts = np.zeros((len(ys), len(zs), len(xs) + 1), dtype=np.int64)
    for tid, iy, iz in _covering_pairs(tri[:, :, others], ys, zs):
        t = tri[tid]
        p = np.stack([ys[iy], zs[iz]], axis=1)
        v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
        a = v1[:, others] - v0[:, others]
        b = v2[:, others] - v0[:, others]
        r = p - v0[:, others]
        det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        u = (r[:, 0] * b[:, 1] - r[:, 1] * b[:, 0]) / det
        v = (a[:, 0] * r[:, 1] - a[:, 1] * r[:, 0]) / det
        x_hit = v0[:, axis] + u * (v1[:, axis] - v0[:, axis]) + v * (v2[:, axis] - v0[:, axis])
        first = np.searchsorted(xs, x_hit, side="right")
        np.add.at(counts, (iy, iz, first), 1)
    parity = np.cumsum(counts[:, :, :-1], axis=2) % 2 == 1
    # back to x, y, z index order
    order = np.argsort([axis] + others)
    return np.transpose(np.moveaxis(parity, 2, 0), order)


def voxel_grid(meshes, resolution, pad=1e-3):
    lo = np.min([m.vertices.min(axis=0) for m in meshes], axis=0) - pad
    hi = np.max([m.vertices.max(axis=0) for m in meshes], axis=0) + pad
    return [lo[a] + (np.arange(resolution) + 0.5) * (hi[a] - lo[a]) / resolution for a in range(3)]


def occupancy(mesh, centers):
    if mesh.is_watertight():
        return parity_occupancy(mesh, centers, 0)
    warnings.warn("mesh is not watertight; using majority vote of three parity axes", RuntimeWarning)
    votes = sum(parity_occupancy(mesh, centers, a).astype(np.int64) for a in range(3))
    return votes >= 2


def volume_iou(mesh_a, mesh_b, resolution=128):
    if mesh_a.is_empty or mesh_b.is_empty:
        return 0.0
    centers = voxel_grid([mesh_a, mesh_b], resolution)
    occ_a, occ_b = occupancy(mesh_a, centers), occupancy(mesh_b, centers)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)


PSNR_CAP = 99.0


def psnr(img, ref):
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    half = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(img, ref, window=11, sigma=1.5, data_range=1.0):
    """Mean SSIM over channels and valid window positions, Gaussian weighting."""
    x, y = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"images smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    g = gaussian_window(window, sigma)
    values = []
    for ch in range(x.shape[2]):
        a, b = x[:, :, ch], y[:, :, ch]
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        var_a = _filter_valid(a * a, g) - mu_a**2
        var_b = _filter_valid(b * b, g) - mu_b**2
        cov = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(num / den)
    return float(np.mean(values))


def rasterize_mesh(mesh, pose, intrinsics, max_pairs=1 << 22):
    """Z-buffered rendering of a vertex-colored mesh: returns (rgb H x W x 3, mask H x W).

    Colors are interpolated perspective-correctly; the background is black.
    Used only to compare meshes under the evaluation protocol.
    """
    h, w = intrinsics.height, intrinsics.width
    rgb = np.zeros((h, w, 3))
    mask = np.zeros((h, w))
    if mesh.is_empty:
        return rgb, mask
    cam = mesh.vertices @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.full((len(mesh.vertices), 3), 0.5)
    faces = mesh.faces[(z[mesh.faces] > 1e-6).all(axis=1)]
    zc = z[faces]
    uv = np.stack([
        intrinsics.focal * cam[:, 0] / np.maximum(z, 1e-6) + intrinsics.cx,
        intrinsics.focal * cam[:, 1] / np.maximum(z, 1e-6) + intrinsics.cy,
    ], axis=1)[faces]
    lo, hi = uv.min(axis=1), uv.max(axis=1)
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, h - 1).astype(np.int64)
    wx, wy = np.maximum(x1 - x0 + 1, 0), np.maximum(y1 - y0 + 1, 0)
    counts = wx * wy
    best_z = np.full(h * w, np.inf)
    best_rgb = np.zeros((h * w, 3))
    start = 0
    while start < len(faces):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_pairs, side="right")))
        sel = np.arange(start, stop)
        start = stop
        c = counts[sel]
        if c.sum() == 0:
            continue
        rep = np.repeat(sel, c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        px = x0[rep] + offs % wx[rep]
        py = y0[rep] + offs // wx[rep]
        p = np.stack([px + 0.5, py + 0.5], axis=1)
        t = uv[rep]
        a, b = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
        r = p - t[:, 0]
        det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        ok = det != 0
        det = np.where(ok, det, 1.0)
        l1 = (r[:, 0] * b[:, 1] - r[:, 1] * b[:, 0]) / det
        l2 = (a[:, 0] * r[:, 1] - a[:, 1] * r[:, 0]) / det
        l0 = 1.0 - l1 - l2
        ok &= (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        rep, px, py, l0, l1, l2 = rep[ok], px[ok], py[ok], l0[ok], l1[ok], l2[ok]
        inv = l0 / zc[rep, 0] + l1 / zc[rep, 1] + l2 / zc[rep, 2]
        depth = 1.0 / inv
        wts = np.stack([l0 / zc[rep, 0], l1 / zc[rep, 1], l2 / zc[rep, 2]], axis=1) * depth[:, None]
        col = np.einsum("nk,nkc->nc", wts, colors[faces[rep]])
        pix = py * w + px
        order = np.lexsort((rep, depth, pix))
        pix, depth, col = pix[order], depth[order], col[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, depth, col = pix[first], depth[first], col[first]
        closer = depth < best_z[pix]
        best_z[pix[closer]] = depth[closer]
        best_rgb[pix[closer]] = col[closer]
    hit = np.isfinite(best_z)
    rgb = np.clip(best_rgb, 0.0, 1.0).reshape(h, w, 3) * hit.reshape(h, w, 1)
    return rgb, hit.reshape(h, w).astype(np.float64)


@dataclass
class EvalProtocol:
    rings: list = field(default_factory=lambda: [0.0, 15.0, 30.0])
    views_per_ring: int = 8
    resolution: int = 128
    radius: float = 2.5
    fov_deg: float = 50.0
    n_points: int = 100_000
    tau: float = 0.05
    iou_resolution: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.views_per_ring < 1:
            raise ValueError("views_per_ring must be >= 1")

    def poses(self):
        return [
            (elev, 360.0 * k / self.views_per_ring, look_at_pose(360.0 * k / self.views_per_ring, elev, self.radius))
            for elev in self.rings
            for k in range(self.views_per_ring)
        ]


def geometry_metrics(gen, gt, protocol):
    a = sample_mesh(gen, protocol.n_points, seed=protocol.seed)
    b = sample_mesh(gt, protocol.n_points, seed=protocol.seed + 1)
    return {
        "chamfer": float(chamfer(a, b)),
        "vol_iou": volume_iou(gen, gt, protocol.iou_resolution),
        "f_score": f_score(a, b, protocol.tau),
    }


def evaluate_protocol(gen, gt, protocol=None):
    """Geometry metrics once, texture metrics averaged over the ring renders.

    ``gt`` is a :class:`Mesh`; callers holding an analytic shape should
    extract and colorize it first (see :func:`tiltrecon.reconstruct.reference_mesh`).
    """
    from .render import Intrinsics

    protocol = protocol or EvalProtocol()
    if gen.is_empty:
        raise ValueError("generated mesh is empty")
    report = geometry_metrics(gen, gt, protocol)
    intr = Intrinsics.from_fov(protocol.resolution, protocol.resolution, protocol.fov_deg)
    per_view = []
    for i, (elev, az, pose) in enumerate(protocol.poses()):
        img_gen, _ = rasterize_mesh(gen, pose, intr)
        img_gt, _ = rasterize_mesh(gt, pose, intr)
        per_view.append({
            "view": i, "azimuth_deg": az, "elevation_deg": elev,
            "psnr": psnr(img_gen, img_gt), "ssim": ssim(img_gen, img_gt),
        })
    report["psnr_mean"] = float(np.mean([v["psnr"] for v in per_view]))
    report["ssim_mean"] = float(np.mean([v["ssim"] for v in per_view]))
    report["per_view"] = per_view
    return report


PER_VIEW_FIELDS = ["view", "azimuth_deg", "elevation_deg", "psnr", "ssim"]


def per_view_csv(report):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PER_VIEW_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in report["per_view"]:
        writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in PER_VIEW_FIELDS})
    return buf.getvalue()


def report_json(report):
    return json.dumps(report, indent=1, sort_keys=True)
