"""Per-scene tri-plane reconstruction from multi-view supervision."""

from dataclasses import dataclass, field, asdict
import logging
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera import ViewRole
from .errors import NumericalError, ShapeError
from .fusion import CrossModalFusion
from .mesh import colorize, marching_cubes
from .render import Intrinsics, RenderConfig, RenderedView, rays_for_pose, render_batch, render_view
from .triplane import AnalyticField, TriPlane, TriPlaneField, density_grid, init_decoder, tokens_to_triplane
from .metrics import psnr

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_lpips: float = 2.0
    lambda_mask: float = 1.0
    lambda_depth: float = 0.5
    lambda_normal: float = 0.2
    lambda_reg: float = 0.01
    lambda_rgb: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")

    def scaled(self, c):
        return LossWeights(**{k: c * v for k, v in asdict(self).items()})


@dataclass(eq=False)
class SupervisionView:
    role: ViewRole
    pose: object
    view: RenderedView


@dataclass(eq=False)
class SupervisionSet:
    views: list
    intrinsics: Intrinsics

    def __post_init__(self):
        if not self.views:
            raise ValueError("supervision needs at least one view")
        shape = (self.intrinsics.height, self.intrinsics.width)
        for v in self.views:
            if v.view.mask.shape != shape:
                raise ShapeError(f"view {v.role} is {v.view.mask.shape}, intrinsics say {shape}")

    def __len__(self):
        return len(self.views)


def render_supervision(field, trajectory, intrinsics, cfg=None):
    """Render a field at every (role, pose) of a trajectory."""
    cfg = cfg or RenderConfig()
    views = [SupervisionView(role, pose, render_view(field, pose, intrinsics, cfg)) for role, pose in trajectory]
    return SupervisionSet(views, intrinsics)


LOSS_TERMS = ("rgb", "depth", "normal", "mask", "reg")


def loss_terms(pred, gt, reg=None):
    """Per-term losses on matching tensors ``rgb (.., 3)``, ``depth``, ``normal (.., 3)``, ``mask``.

    Depth and normal terms average over pixels whose ground-truth mask
    exceeds 0.5 and are zero when there are none.
    """
    rgb = ((pred["rgb"] - gt["rgb"]) ** 2).mean()
    sel = gt["mask"] > 0.5
    n_sel = sel.sum()
    if n_sel > 0:
        depth = (pred["depth"][sel] - gt["depth"][sel]).abs().mean()
        pn, gn = pred["normal"][sel], gt["normal"][sel]
        cos = (pn * gn).sum(-1) / (pn.norm(dim=-1).clamp(min=1e-12) * gn.norm(dim=-1).clamp(min=1e-12))
        normal = (1.0 - cos).mean()
    else:
        depth = torch.zeros((), dtype=rgb.dtype)
        normal = torch.zeros((), dtype=rgb.dtype)
    mask = ((pred["mask"] - gt["mask"]) ** 2).mean()
    if reg is None:
        reg = torch.zeros((), dtype=rgb.dtype)
    return {"rgb": rgb, "depth": depth, "normal": normal, "mask": mask, "reg": reg}


def weighted_total(terms, weights):
    # the LPIPS term is not evaluated; its weight is carried for bookkeeping only
    return (weights.lambda_rgb * terms["rgb"] + weights.lambda_depth * terms["depth"]
            + weights.lambda_normal * terms["normal"] + weights.lambda_mask * terms["mask"]
            + weights.lambda_reg * terms["reg"])


def _view_tensors(v, dtype=torch.float64):
    return {
        "rgb": torch.as_tensor(v.rgb, dtype=dtype),
        "depth": torch.as_tensor(v.depth, dtype=dtype),
        "normal": torch.as_tensor(v.normal, dtype=dtype),
        "mask": torch.as_tensor(v.mask, dtype=dtype),
    }


def compute_loss(pred, gt, weights=None, reg=0.0):
    """Reconstruction loss between two :class:`RenderedView` objects; returns (total, breakdown)."""
    weights = weights or LossWeights()
    if pred.rgb.shape != gt.rgb.shape or pred.mask.shape != gt.mask.shape:
        raise ShapeError(f"view shapes differ: {pred.rgb.shape} vs {gt.rgb.shape}")
    terms = loss_terms(_view_tensors(pred), _view_tensors(gt), torch.as_tensor(float(reg), dtype=torch.float64))
    total = weighted_total(terms, weights)
    return float(total), {k: float(v) for k, v in terms.items()}


def triplane_reg(triplane):
    return (triplane.planes ** 2).mean()


class TriPlaneReconstructor(BaseEstimator):
    """Fit a tri-plane and decoder to posed views by Adam on the multi-term render loss.

    The planes start from fused view tokens (patch embedding, residual
    cross-modal attention against a position embedding of 3 R^2 queries,
    linear map to ``channels``) and are then refined jointly with the
    decoder. Each step renders a random batch of ``rays_per_step`` pixels
    drawn from all views.
    """

    def __init__(self, resolution=32, channels=16, decoder_hidden=(64,), steps=2000, learning_rate=1e-2,
                 rays_per_step=1024, n_samples=96, loss_weights=None, patch_size=8, embed_dim=32,
                 margin=1.8, normal_step=2.0 / 64, dtype="float32", seed=0, log_every=0):
        self.resolution = resolution
        self.channels = channels
        self.decoder_hidden = decoder_hidden
        self.steps = steps
        self.learning_rate = learning_rate
        self.rays_per_step = rays_per_step
        self.n_samples = n_samples
        self.loss_weights = loss_weights
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.margin = margin
        self.normal_step = normal_step
        self.dtype = dtype
        self.seed = seed
        self.log_every = log_every

    @property
    def _torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def _render_config(self, stratified=False):
        return RenderConfig(n_samples=self.n_samples, margin=self.margin, normal_step=self.normal_step,
                            stratified=stratified, seed=self.seed)

    def _initial_state(self, supervision):
        dt = self._torch_dtype
        fusion = CrossModalFusion(patch_size=self.patch_size, embed_dim=self.embed_dim,
                                  num_queries=3 * self.resolution**2, seed=self.seed)
        views = [(v.role, v.pose.azimuth_deg, v.view.rgb) for v in supervision.views]
        fused = fusion.fit(views).transform(views)
        gen = torch.Generator().manual_seed(int(self.seed) + 7)
        proj = torch.randn(self.embed_dim, self.channels, generator=gen, dtype=torch.float64) / math.sqrt(self.embed_dim)
        tp = tokens_to_triplane(torch.as_tensor(fused), self.resolution, self.channels, proj)
        planes = tp.planes.to(dt)
        decoder = {k: v.to(dt) for k, v in init_decoder(3 * self.channels, self.decoder_hidden, seed=int(self.seed) + 3).items()}
        self.fusion_ = fusion
        return planes, decoder

    def fit(self, supervision, y=None):
        if not isinstance(supervision, SupervisionSet):
            raise TypeError("fit expects a SupervisionSet")
        weights = self.loss_weights or LossWeights()
        dt = self._torch_dtype
        planes, decoder = self._initial_state(supervision)
        params = [planes.requires_grad_(True)] + [p.requires_grad_(True) for p in decoder.values()]

        origins, dirs, radii, gt = [], [], [], {k: [] for k in ("rgb", "depth", "normal", "mask")}
        for sv in supervision.views:
            o, d = rays_for_pose(sv.pose, supervision.intrinsics)
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
            radii.append(np.full(o.shape[0] * o.shape[1], sv.pose.radius))
            for k in gt:
                arr = getattr(sv.view, k)
                gt[k].append(arr.reshape(-1, 3) if arr.ndim == 3 else arr.reshape(-1))
        origins = torch.as_tensor(np.concatenate(origins), dtype=dt)
        dirs = torch.as_tensor(np.concatenate(dirs), dtype=dt)
        radii = torch.as_tensor(np.concatenate(radii), dtype=dt)
        gt = {k: torch.as_tensor(np.concatenate(v), dtype=dt) for k, v in gt.items()}
        n_rays = origins.shape[0]
        batch = min(self.rays_per_step, n_rays)

        opt = torch.optim.Adam(params, lr=self.learning_rate)
        gen = torch.Generator().manual_seed(int(self.seed) + 11)
        cfg = self._render_config()
        history = []
        last_good = None
        for step in range(int(self.steps)):
            idx = torch.randperm(n_rays, generator=gen)[:batch]
            field = TriPlaneField(TriPlane(planes), decoder)
            rgb, depth, opacity, normal = render_batch(field, origins[idx], dirs[idx], radii[idx], cfg, gen)
            pred = {"rgb": rgb, "depth": depth, "normal": normal, "mask": opacity}
            terms = loss_terms(pred, {k: v[idx] for k, v in gt.items()}, triplane_reg(TriPlane(planes)))
            total = weighted_total(terms, weights)
            if not torch.isfinite(total):
                if last_good is not None:
                    self._store(*last_good, history)
                raise NumericalError(f"non-finite loss at step {step}: {[(k, float(v.detach())) for k, v in terms.items()]}",
                                     state=last_good)
            last_good = (planes.detach().clone(), {k: v.detach().clone() for k, v in decoder.items()})
            opt.zero_grad()
            total.backward()
            opt.step()
            history.append({"step": step, "total": float(total.detach()), **{k: float(terms[k].detach()) for k in LOSS_TERMS}})
            if self.log_every and step % self.log_every == 0:
                log.info("step %d total %.5f", step, history[-1]["total"])
        self._store(planes.detach(), {k: v.detach() for k, v in decoder.items()}, history)
        return self

    def _store(self, planes, decoder, history):
        self.triplane_ = TriPlane(planes.clone())
        self.decoder_ = {k: v.clone() for k, v in decoder.items()}
        self.history_ = history
        self.loss_weights_ = self.loss_weights or LossWeights()

    @property
    def field_(self):
        check_is_fitted(self, "triplane_")
        return TriPlaneField(self.triplane_, self.decoder_)

    def predict(self, poses, intrinsics):
        """Render the fitted field at each pose."""
        check_is_fitted(self, "triplane_")
        return [render_view(self.field_, p, intrinsics, self._render_config()) for p in poses]

    def score(self, supervision, y=None):
        """Mean rgb PSNR over the supervision views."""
        preds = self.predict([v.pose for v in supervision.views], supervision.intrinsics)
        return float(np.mean([psnr(p.rgb, v.view.rgb) for p, v in zip(preds, supervision.views)]))

    def extract_mesh(self, grid_resolution=64, iso=25.0):
        grid = density_grid(self.field_, grid_resolution)
        return colorize(marching_cubes(grid, iso), self.field_)

    def state_tensors(self):
        check_is_fitted(self, "triplane_")
        out = {"planes": self.triplane_.planes}
        out.update({f"decoder.{k}": v for k, v in self.decoder_.items()})
        return out

    def load_state(self, tensors):
        dt = self._torch_dtype
        self.triplane_ = TriPlane(tensors["planes"].to(dt))
        self.decoder_ = {k.split(".", 1)[1]: v.to(dt) for k, v in tensors.items() if k.startswith("decoder.")}
        self.history_ = []
        self.loss_weights_ = self.loss_weights or LossWeights()
        return self


def reference_mesh(shape, resolution=128):
    """High-resolution colored iso-surface of an analytic shape."""
    field = AnalyticField(shape)
    return colorize(marching_cubes(density_grid(field, resolution), shape.iso), field)
