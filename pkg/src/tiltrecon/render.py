"""Pinhole rays and emission-absorption volume rendering of density/color fields.

A field is any callable mapping an (N, 3) tensor of world points to
``(sigma, rgb)`` with shapes (N,) and (N, 3). Pixel rows grow downwards
and columns to the right, matching the camera's y-down convention.
"""

from dataclasses import dataclass
import math

import numpy as np
import torch


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    focal: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or not self.focal > 0:
            raise ValueError("intrinsics need positive width, height and focal length")

    @classmethod
    def from_fov(cls, width, height, fov_deg=50.0):
        return cls(width, height, 0.5 * width / math.tan(math.radians(fov_deg) / 2.0))

    @property
    def cx(self):
        return 0.5 * self.width

    @property
    def cy(self):
        return 0.5 * self.height


@dataclass
class RenderConfig:
    n_samples: int = 128
    margin: float = 1.8
    normal_step: float = 2.0 / 64
    mask_threshold: float = 0.5
    stratified: bool = False
    seed: int = 0
    chunk: int = 4096


@dataclass(eq=False)
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


def rays_for_pose(pose, intrinsics):
    """Per-pixel ray origins and unit directions, each H x W x 3 (float64)."""
    w, h, f = intrinsics.width, intrinsics.height, intrinsics.focal
    u = (np.arange(w) + 0.5 - intrinsics.cx) / f
    v = (np.arange(h) + 0.5 - intrinsics.cy) / f
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def sample_depths(n_rays, near, far, n_samples, generator=None, dtype=torch.float64):
    """Bin-stratified distances; bin midpoints unless a generator supplies jitter."""
    near = torch.as_tensor(near, dtype=dtype).reshape(-1, 1).expand(n_rays, 1)
    far = torch.as_tensor(far, dtype=dtype).reshape(-1, 1).expand(n_rays, 1)
    delta = (far - near) / n_samples
    k = torch.arange(n_samples, dtype=dtype)[None, :]
    if generator is None:
        jitter = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    else:
        jitter = torch.rand((n_rays, n_samples), generator=generator, dtype=dtype)
    return near + (k + jitter) * delta, delta.expand(n_rays, n_samples)


def composite(sigma, rgb, t, delta):
    """Quadrature over samples: returns (rgb, depth, opacity, weights, transmittance)."""
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    weights = trans * alpha
    opacity = weights.sum(dim=1)
    color = (weights[..., None] * rgb).sum(dim=1)
    raw_depth = (weights * t).sum(dim=1)
    safe = opacity >= 1e-6
    depth = torch.where(safe, raw_depth / torch.where(safe, opacity, torch.ones_like(opacity)), torch.zeros_like(opacity))
    return color, depth, opacity, weights, trans


def eval_field(field, points, skip_outside=True):
    """Evaluate the field on (..., 3) points, skipping points outside the cube (they get zero density)."""
    flat = points.reshape(-1, 3)
    if not skip_outside:
        sigma, rgb = field(flat)
    else:
        inside = (flat.abs() <= 1.0).all(dim=1)
        idx = torch.nonzero(inside).squeeze(1)
        s_in, c_in = field(flat[idx])
        sigma = torch.zeros(flat.shape[0], dtype=s_in.dtype).index_put((idx,), s_in)
        rgb = torch.zeros(flat.shape[0], 3, dtype=c_in.dtype).index_put((idx,), c_in)
    return sigma.reshape(points.shape[:-1]), rgb.reshape(*points.shape[:-1], 3)


def render_rays(field, origins, dirs, near, far, n_samples, generator=None, skip_outside=True):
    """Batched :func:`render_ray`; ``origins``/``dirs`` are (N, 3) tensors."""
    if not n_samples >= 2:
        raise ValueError("n_samples must be >= 2")
    if torch.any(torch.as_tensor(near) >= torch.as_tensor(far)):
        raise ValueError("near must be < far")
    dtype = origins.dtype
    t, delta = sample_depths(origins.shape[0], near, far, n_samples, generator, dtype)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma, rgb = eval_field(field, pts, skip_outside)
    return composite(sigma, rgb, t, delta)


def render_ray(field, origin, direction, near, far, n_samples, generator=None):
    """Render one ray; returns (rgb, depth, opacity) as numpy/float values."""
    o = torch.as_tensor(np.asarray(origin, dtype=np.float64))[None]
    d = torch.as_tensor(np.asarray(direction, dtype=np.float64))[None]
    with torch.no_grad():
        rgb, depth, opacity, _, _ = render_rays(field, o, d, near, far, n_samples, generator, skip_outside=False)
    return rgb[0].numpy(), float(depth[0]), float(opacity[0])


def density_normals(field, points, step):
    """-grad(sigma) / |grad(sigma)| by central differences of half-width ``step``."""
    offsets = step * torch.eye(3, dtype=points.dtype)
    probe = torch.cat([points[:, None, :] + offsets[None], points[:, None, :] - offsets[None]], dim=1)
    sigma, _ = eval_field(field, probe)
    grad = (sigma[:, :3] - sigma[:, 3:]) / (2.0 * step)
    norm = grad.norm(dim=1, keepdim=True)
    return -grad / norm.clamp(min=1e-12)


def render_batch(field, origins, dirs, radius, cfg, generator=None):
    """Render rays to (rgb, depth, opacity, normal) tensors, keeping the autograd graph."""
    radius = torch.as_tensor(radius, dtype=origins.dtype)
    near, far = (radius - cfg.margin).clamp(min=1e-3), radius + cfg.margin
    rgb, depth, opacity, _, _ = render_rays(field, origins, dirs, near, far, cfg.n_samples, generator)
    surface = origins + depth[:, None] * dirs
    normal = density_normals(field, surface, cfg.normal_step)
    normal = normal * (opacity > cfg.mask_threshold).to(normal.dtype)[:, None]
    return rgb, depth, opacity, normal


def render_view(field, pose, intrinsics, cfg=None):
    """Render a full :class:`RenderedView` (no gradients)."""
    cfg = cfg or RenderConfig()
    dtype = getattr(field, "dtype", torch.float64)
    origins, dirs = rays_for_pose(pose, intrinsics)
    o = torch.as_tensor(origins.reshape(-1, 3), dtype=dtype)
    d = torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype)
    gen = torch.Generator().manual_seed(int(cfg.seed)) if cfg.stratified else None
    parts = []
    with torch.no_grad():
        for s in range(0, o.shape[0], cfg.chunk):
            parts.append(render_batch(field, o[s:s + cfg.chunk], d[s:s + cfg.chunk], pose.radius, cfg, gen))
    rgb, depth, opacity, normal = (torch.cat([p[k] for p in parts]).double().numpy() for k in range(4))
    h, w = intrinsics.height, intrinsics.width
    return RenderedView(
        rgb=np.clip(rgb.reshape(h, w, 3), 0.0, 1.0),
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        mask=np.clip(opacity.reshape(h, w), 0.0, 1.0),
    )
