"""Tri-plane fields over the cube [-1, 1]^3 and analytic reference shapes.

Plane ``XY`` is indexed ``[i, j]`` with ``i`` along x and ``j`` along y;
likewise ``XZ`` is (x, z) and ``YZ`` is (y, z). Grid node ``i`` sits at
``-1 + 2 i / (R - 1)``, so the outer nodes lie on the cube faces.
"""

from dataclasses import dataclass
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("XY", "XZ", "YZ")


@dataclass(eq=False)
class TriPlane:
    """``planes`` has shape 3 x R x R x F, in XY, XZ, YZ order."""

    planes: torch.Tensor

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise ShapeError(f"tri-plane tensor must be 3 x R x R x F, got {tuple(self.planes.shape)}")

    @property
    def resolution(self):
        return self.planes.shape[1]

    @property
    def channels(self):
        return self.planes.shape[3]

    def flatten(self):
        return self.planes.reshape(-1, self.channels)


def tokens_to_triplane(tokens, resolution, channels, projection=None):
    """Lay out 3 R^2 tokens as three planes: XY first, then XZ, then YZ, each row-major.

    ``projection`` (D x F) maps token channels to plane channels; without it
    the tokens must already have ``channels`` columns.
    """
    t = tokens.tokens if hasattr(tokens, "tokens") else torch.as_tensor(tokens)
    r = int(resolution)
    if t.ndim != 2 or t.shape[0] != 3 * r * r:
        raise ShapeError(f"need {3 * r * r} tokens for resolution {r}, got {t.shape[0] if t.ndim else 0}")
    if projection is not None:
        t = t @ projection
    if t.shape[1] != channels:
        raise ShapeError(f"token width {t.shape[1]} != {channels} channels")
    return TriPlane(t.reshape(3, r, r, channels))


def sample_triplane(tp, points, return_oob=False):
    """Bilinearly sample every plane at the projected points and concatenate (XY, XZ, YZ).

    Points outside the cube are clamped onto it; ``return_oob`` also returns
    a boolean mask of the points that needed clamping.
    """
    pts = torch.as_tensor(points, dtype=tp.planes.dtype)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    oob = (pts.abs() > 1.0).any(dim=1)
    pts = pts.clamp(-1.0, 1.0)
    # grid_sample: last grid coordinate indexes height (our first plane axis)
    grids = torch.stack([pts[:, [b, a]] for a, b in PLANE_AXES])[:, None]
    planes = tp.planes.permute(0, 3, 1, 2)
    feats = F.grid_sample(planes, grids, mode="bilinear", padding_mode="border", align_corners=True)
    feats = feats[:, :, 0].permute(2, 0, 1).reshape(pts.shape[0], 3 * tp.channels)
    if single:
        feats, oob = feats[0], oob[0]
    return (feats, oob) if return_oob else feats


def init_decoder(in_dim, hidden=(64,), seed=0, dtype=torch.float64, zero=False):
    gen = torch.Generator().manual_seed(int(seed))
    sizes = [in_dim, *hidden, 4]
    params = {}
    for k in range(len(sizes) - 1):
        if zero:
            params[f"w{k}"] = torch.zeros(sizes[k], sizes[k + 1], dtype=dtype)
        else:
            params[f"w{k}"] = torch.randn(sizes[k], sizes[k + 1], generator=gen, dtype=dtype) / math.sqrt(sizes[k])
        params[f"b{k}"] = torch.zeros(sizes[k + 1], dtype=dtype)
    return params


def decode(params, features):
    """Map 3F features to (density >= 0 via softplus, rgb in [0, 1] via sigmoid)."""
    x = features
    n = len(params) // 2
    for k in range(n):
        x = x @ params[f"w{k}"] + params[f"b{k}"]
        if k < n - 1:
            x = F.silu(x)
    return F.softplus(x[..., 0]), torch.sigmoid(x[..., 1:4])


class TriPlaneField:
    """Density/color callable backed by a tri-plane and decoder; zero density outside the cube."""

    def __init__(self, triplane, decoder):
        self.triplane = triplane
        self.decoder = decoder

    @property
    def dtype(self):
        return self.triplane.planes.dtype

    def __call__(self, points):
        inside = (points.abs() <= 1.0).all(dim=-1)
        sigma, rgb = decode(self.decoder, sample_triplane(self.triplane, points))
        return sigma * inside.to(sigma.dtype), rgb


def smoothstep(x):
    x = x.clamp(0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


SHAPE_COLORS = {
    "sphere": (0.85, 0.35, 0.2),
    "torus": (0.2, 0.55, 0.85),
    "box": (0.3, 0.8, 0.35),
}


@dataclass(frozen=True)
class AnalyticShape:
    """A reference solid. ``size`` is (r,) for a sphere, (R, r) for a torus around +Z, (h,) half-extent for a box."""

    kind: str = "sphere"
    size: tuple = (0.5,)
    sigma_max: float = 50.0
    sharpness: float = 40.0

    def __post_init__(self):
        if self.kind not in SHAPE_COLORS:
            raise ValueError(f"unknown shape {self.kind!r}")
        need = 2 if self.kind == "torus" else 1
        if len(self.size) != need:
            raise ValueError(f"{self.kind} needs {need} size parameters")

    @property
    def color(self):
        return SHAPE_COLORS[self.kind]

    @property
    def iso(self):
        return 0.5 * self.sigma_max

    def sdf(self, points):
        p = torch.as_tensor(points, dtype=torch.float64) if not isinstance(points, torch.Tensor) else points
        if self.kind == "sphere":
            return p.norm(dim=-1) - self.size[0]
        if self.kind == "torus":
            big, small = self.size
            ring = torch.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - big
            return torch.sqrt(ring**2 + p[..., 2] ** 2) - small
        q = p.abs() - self.size[0]
        outside = q.clamp(min=0.0).norm(dim=-1)
        inside = q.max(dim=-1).values.clamp(max=0.0)
        return outside + inside

    def volume(self):
        if self.kind == "sphere":
            return 4.0 / 3.0 * math.pi * self.size[0] ** 3
        if self.kind == "torus":
            return 2.0 * math.pi**2 * self.size[0] * self.size[1] ** 2
        return (2.0 * self.size[0]) ** 3


def analytic_field(shape, points):
    """Density sigma_max * smoothstep(1/2 - k sdf / 2) and the shape's constant color.

    The density reaches sigma_max once the point is 1/k inside the surface,
    vanishes 1/k outside, and equals half of sigma_max on the surface.
    """
    pts = torch.as_tensor(points) if not isinstance(points, torch.Tensor) else points
    sdf = shape.sdf(pts)
    sigma = shape.sigma_max * smoothstep(0.5 - 0.5 * shape.sharpness * sdf)
    rgb = torch.tensor(shape.color, dtype=sigma.dtype).expand(*sigma.shape, 3)
    return sigma, rgb


class AnalyticField:
    def __init__(self, shape):
        self.shape = shape

    dtype = torch.float64

    def __call__(self, points):
        return analytic_field(self.shape, points)


def density_grid(field, resolution, bound=1.0, chunk=1 << 18):
    """Evaluate a field's density on a resolution^3 lattice spanning [-bound, bound]^3 (index order x, y, z)."""
    axis = np.linspace(-bound, bound, resolution)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    dtype = getattr(field, "dtype", torch.float64)
    out = np.empty(pts.shape[0])
    with torch.no_grad():
        for s in range(0, pts.shape[0], chunk):
            sigma, _ = field(torch.as_tensor(pts[s:s + chunk], dtype=dtype))
            out[s:s + chunk] = sigma.double().numpy()
    return out.reshape(resolution, resolution, resolution)
