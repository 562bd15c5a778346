"""Dense view interpolation: reference/condition scheduling and a toy conditional DDPM.

The denoiser is a small pixel-space MLP. Its input is the noisy image, the
reference view appended as extra channels, a sinusoidal timestep embedding
and the condition embedding (encoded condition view followed by the
relative pose of the target view).
"""

from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn.functional as F

from ._adam import adam_step
from .errors import NumericalError, ShapeError


@dataclass(frozen=True)
class RefCondAssignment:
    """1-based indices of the two main views bracketing an interpolation gap."""

    ref_index: int
    cond_index: int


def assign_ref_cond(i, n):
    """Slot ``i`` of ``n`` takes the nearer main view as reference.

    The first half of the slots (``i <= n / 2`` over the reals) use the left
    main view as reference and the right one as condition; the rest swap.
    """
    if not isinstance(i, (int, np.integer)) or not isinstance(n, (int, np.integer)):
        raise TypeError("slot and count must be integers")
    if n < 1 or not 1 <= i <= n:
        raise ValueError(f"slot {i} outside [1, {n}]")
    if 2 * i <= n:
        return RefCondAssignment(ref_index=1, cond_index=2)
    return RefCondAssignment(ref_index=2, cond_index=1)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def posterior_variance(self, t):
        if t == 0:
            return 0.0
        return float(self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))


def make_schedule(T, beta_start, beta_end):
    """Linear beta schedule with exact running products for alpha_bar."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    beta = np.maximum.accumulate(beta)  # linspace rounding can dip by an ulp
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for t in range(T):
        acc = acc * alpha[t]
        alpha_bar[t] = acc
    return DiffusionSchedule(beta, alpha, alpha_bar)


def q_sample(x0, t, eps, schedule):
    """Forward-noise ``x0`` to step ``t``: sqrt(abar) x0 + sqrt(1 - abar) eps.

    ``t`` may be a scalar or a length-B sequence when ``x0`` is batched.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = schedule.alpha_bar
    if np.ndim(t) == 0:
        if not 0 <= int(t) < schedule.T:
            raise ValueError(f"t={t} outside [0, {schedule.T})")
        return math.sqrt(ab[int(t)]) * x0 + math.sqrt(1.0 - ab[int(t)]) * eps
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError("timestep outside schedule")
    shape = (-1,) + (1,) * (x0.ndim - 1)
    a = np.sqrt(ab[t]).reshape(shape)
    s = np.sqrt(1.0 - ab[t]).reshape(shape)
    if isinstance(x0, torch.Tensor):
        a = torch.as_tensor(a, dtype=x0.dtype)
        s = torch.as_tensor(s, dtype=x0.dtype)
    return a * x0 + s * eps


def timestep_embedding(t, dim, dtype=torch.float64):
    t = torch.as_tensor(np.atleast_1d(np.asarray(t, dtype=np.float64)), dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


@dataclass
class DenoiserParams:
    """Weights of the condition encoder and the noise-prediction MLP.

    ``weights`` maps names to tensors; ``adam`` carries optimizer moments so
    that :func:`dvi_train_step` stays a pure function of its inputs.
    """

    image_shape: tuple
    patch_size: int
    feature_dim: int
    hidden: tuple
    time_dim: int
    weights: dict
    adam: dict = field(default_factory=dict)

    @property
    def embedding_dim(self):
        return self.feature_dim + 3

    @property
    def input_dim(self):
        h, w, c = self.image_shape
        return 2 * h * w * c + self.time_dim + self.embedding_dim

    def layer_shapes(self):
        return {k: tuple(v.shape) for k, v in self.weights.items()}

    def copy(self):
        return DenoiserParams(
            self.image_shape, self.patch_size, self.feature_dim, self.hidden, self.time_dim,
            {k: v.clone() for k, v in self.weights.items()},
            {
                "step": self.adam.get("step", 0),
                "m": {k: v.clone() for k, v in self.adam.get("m", {}).items()},
                "v": {k: v.clone() for k, v in self.adam.get("v", {}).items()},
            } if self.adam else {},
        )


def init_denoiser(image_shape=(32, 32, 3), patch_size=8, feature_dim=16, hidden=(256, 256),
                  time_dim=32, seed=0, dtype=torch.float64, zero=False):
    """Seeded Gaussian init with 1/sqrt(fan_in) scale and zero biases."""
    h, w, c = image_shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gen = torch.Generator().manual_seed(int(seed))
    params = DenoiserParams(tuple(image_shape), patch_size, feature_dim, tuple(hidden), time_dim, {})

    def dense(fan_in, fan_out):
        if zero:
            return torch.zeros(fan_in, fan_out, dtype=dtype)
        return torch.randn(fan_in, fan_out, generator=gen, dtype=dtype) / math.sqrt(fan_in)

    wts = params.weights
    wts["enc_w"] = dense(patch_size * patch_size * c, feature_dim)
    wts["enc_b"] = torch.zeros(feature_dim, dtype=dtype)
    sizes = [params.input_dim, *hidden, h * w * c]
    for k in range(len(sizes) - 1):
        wts[f"w{k}"] = dense(sizes[k], sizes[k + 1])
        wts[f"b{k}"] = torch.zeros(sizes[k + 1], dtype=dtype)
    # time-gated identity skip from z_t to the output; starts as eps_hat = z_t
    wts["skip_w"] = torch.zeros(time_dim, 1, dtype=dtype)
    wts["skip_b"] = torch.zeros(1, dtype=dtype) if zero else torch.ones(1, dtype=dtype)
    return params


def _patches(images, ps):
    b, h, w, c = images.shape
    x = images.reshape(b, h // ps, ps, w // ps, ps, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // ps) * (w // ps), ps * ps * c)


def embed_condition(encoder_params, cond_image, rel_pose):
    """Condition embedding: pooled patch feature of the condition view, then the scaled pose deltas.

    ``encoder_params`` is a :class:`DenoiserParams` (only the encoder weights
    are used). Pose deltas are scaled to roughly unit range: azimuth / 180,
    elevation / 90, radius as is. Accepts a single H x W x C image or a batch.
    """
    w_enc = encoder_params.weights["enc_w"]
    b_enc = encoder_params.weights["enc_b"]
    img = torch.as_tensor(cond_image, dtype=w_enc.dtype)
    single = img.ndim == 3
    if single:
        img = img[None]
    if tuple(img.shape[1:]) != tuple(encoder_params.image_shape):
        raise ShapeError(f"condition image {tuple(img.shape[1:])} != encoder {encoder_params.image_shape}")
    feats = torch.tanh(_patches(img, encoder_params.patch_size) @ w_enc + b_enc).mean(dim=1)
    pose = torch.as_tensor(np.asarray(rel_pose, dtype=np.float64), dtype=w_enc.dtype).reshape(-1, 3)
    pose = pose * torch.tensor([1.0 / 180.0, 1.0 / 90.0, 1.0], dtype=w_enc.dtype)
    if pose.shape[0] != feats.shape[0]:
        pose = pose.expand(feats.shape[0], 3)
    emb = torch.cat([feats, pose], dim=1)
    return emb[0] if single else emb


def predict_noise(params, z_t, t, cond_embedding, ref):
    """eps_theta(z_t, t, C) with the reference image appended as input channels."""
    wts = params.weights
    b = z_t.shape[0]
    if ref is None:
        ref = torch.zeros_like(z_t)
    if tuple(ref.shape) != tuple(z_t.shape):
        raise ShapeError(f"reference {tuple(ref.shape)} != noisy image {tuple(z_t.shape)}")
    temb = timestep_embedding(np.broadcast_to(np.asarray(t), (b,)), params.time_dim, dtype=z_t.dtype)
    cond = cond_embedding.reshape(-1, params.embedding_dim).expand(b, -1)
    x = torch.cat([z_t.reshape(b, -1), ref.reshape(b, -1), temb, cond], dim=1)
    n_layers = len(params.hidden) + 1
    for k in range(n_layers):
        x = x @ wts[f"w{k}"] + wts[f"b{k}"]
        if k < n_layers - 1:
            x = F.silu(x)
    gain = temb @ wts["skip_w"] + wts["skip_b"]
    return x.reshape(z_t.shape) + gain.reshape((b,) + (1,) * (z_t.ndim - 1)) * z_t


@dataclass
class DVIBatch:
    """One training batch. ``x0`` is the image being denoised (B x H x W x C, in [-1, 1]).

    The condition enters either as a precomputed ``cond_embedding`` or as
    ``cond_image`` + ``rel_pose``, in which case the encoder is trained too.
    """

    x0: torch.Tensor
    t: np.ndarray
    eps: torch.Tensor
    ref: torch.Tensor = None
    cond_embedding: torch.Tensor = None
    cond_image: torch.Tensor = None
    rel_pose: np.ndarray = None


def dvi_loss(params, batch, schedule):
    z_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    if batch.cond_embedding is not None:
        cond = batch.cond_embedding
    else:
        cond = embed_condition(params, batch.cond_image, batch.rel_pose)
    pred = predict_noise(params, z_t, batch.t, cond, batch.ref)
    return ((batch.eps - pred) ** 2).mean()


def loss_and_grads(params, batch, schedule):
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.weights.items()}
    probe = DenoiserParams(params.image_shape, params.patch_size, params.feature_dim,
                           params.hidden, params.time_dim, leaves)
    loss = dvi_loss(probe, batch, schedule)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(leaves, grads)}
    return loss.detach(), grads


def dvi_train_step(params, batch, schedule, learning_rate):
    """One Adam step on the epsilon-prediction loss; returns (new params, loss)."""
    loss, grads = loss_and_grads(params, batch, schedule)
    if not torch.isfinite(loss):
        bad = [k for k, g in grads.items() if not torch.all(torch.isfinite(g))]
        raise NumericalError(f"non-finite DVI loss {loss.item()}; non-finite grads in {bad}", state=params)
    new_w, new_adam = adam_step(params.weights, grads, params.adam, learning_rate)
    out = DenoiserParams(params.image_shape, params.patch_size, params.feature_dim,
                         params.hidden, params.time_dim, new_w, new_adam)
    return out, float(loss)


def optimal_point_denoiser(x_star, schedule):
    """Exact epsilon predictor for a dataset holding the single image ``x_star``."""
    x_star = torch.as_tensor(x_star)

    def denoise(z_t, t, cond_embedding, ref):
        ab = schedule.alpha_bar[t]
        return (z_t - math.sqrt(ab) * x_star) / math.sqrt(1.0 - ab)

    return denoise


def dvi_sample(params, cond_embedding, schedule, seed, ref=None, shape=None):
    """Ancestral DDPM sampling from pure noise over all ``T`` steps.

    ``params`` is either :class:`DenoiserParams` or a callable
    ``(z_t, t, cond_embedding, ref) -> eps``. The reference image, when
    given, is appended as conditioning channels at every step.
    """
    if isinstance(params, DenoiserParams):
        shape = shape or params.image_shape
        dtype = params.weights["w0"].dtype

        def denoise(z, t, c, r):
            return predict_noise(params, z, t, c, r)
    else:
        if shape is None:
            raise ValueError("shape is required with a callable denoiser")
        dtype = torch.float64
        denoise = params
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn((1, *shape), generator=gen, dtype=dtype)
    if ref is not None:
        ref = torch.as_tensor(ref, dtype=dtype).reshape(1, *shape)
    with torch.no_grad():
        for t in range(schedule.T - 1, -1, -1):
            eps = denoise(z, t, cond_embedding, ref)
            beta, alpha, ab = schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]
            z = (z - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
            if t > 0:
                noise = torch.randn(z.shape, generator=gen, dtype=dtype)
                z = z + math.sqrt(schedule.posterior_variance(t)) * noise
    return z[0]
