"""Patch tokenization and residual cross-modal attention fusion of view tokens."""

from dataclasses import dataclass
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError


@dataclass(eq=False)
class TokenSequence:
    """``tokens`` is L x D; ``provenance`` is a list of (view id, patch index) per token."""

    tokens: torch.Tensor
    provenance: list
    azimuth: float = None

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass(eq=False)
class AttentionParams:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    num_heads: int = 1

    def tensors(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def init_attention(dim, seed=0, num_heads=1, dtype=torch.float64):
    if dim % num_heads:
        raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
    gen = torch.Generator().manual_seed(int(seed))
    w = [torch.randn(dim, dim, generator=gen, dtype=dtype) / math.sqrt(dim) for _ in range(3)]
    return AttentionParams(*w, num_heads=num_heads)


def patchify(image, patch_size, projection=None, view_id=0, azimuth=None):
    """Split an H x W x C image into non-overlapping patches and project each.

    ``projection`` is a (ps * ps * C) x D matrix; ``None`` keeps raw flattened
    patches. Patches are enumerated row-major and flattened in (row, col,
    channel) order.
    """
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    ps = int(patch_size)
    if ps < 1 or h % ps or w % ps:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {ps}")
    x = img.reshape(h // ps, ps, w // ps, ps, c).permute(0, 2, 1, 3, 4).reshape(-1, ps * ps * c)
    if projection is not None:
        x = x.to(projection.dtype) @ projection
    prov = [(view_id, k) for k in range(x.shape[0])]
    return TokenSequence(x, prov, azimuth)


def concat_view_tokens(main, left, right):
    """Concatenate along the token axis: mains by index, then interpolated views by azimuth.

    An interpolated view shared between two adjacent mains (the right set of
    one and the left set of the next) contributes its tokens once; identity
    is the view id in the provenance.
    """
    seqs = list(main) + list(left) + list(right)
    if not seqs:
        raise ValueError("no token sequences to concatenate")
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise ShapeError(f"token dims differ: {sorted(dims)}")

    def view_id(s):
        return s.provenance[0][0] if s.provenance else None

    seen = set()
    ordered = []
    for s in main:
        seen.add(view_id(s))
        ordered.append(s)
    interp = []
    for s in list(left) + list(right):
        vid = view_id(s)
        if vid in seen:
            continue
        seen.add(vid)
        interp.append(s)
    interp.sort(key=lambda s: (s.azimuth if s.azimuth is not None else 0.0, str(view_id(s))))
    ordered.extend(interp)
    tokens = torch.cat([s.tokens for s in ordered], dim=0)
    prov = [p for s in ordered for p in s.provenance]
    return TokenSequence(tokens, prov)


def stable_softmax(logits, dim=-1):
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def attention_weights(p, f, params):
    """Softmax(q k^T / sqrt(d)) per head, shape heads x L_p x L_f."""
    p_t = p.tokens if isinstance(p, TokenSequence) else p
    f_t = f.tokens if isinstance(f, TokenSequence) else f
    h = params.num_heads
    d = p_t.shape[1] // h
    q = (p_t @ params.w_q).reshape(p_t.shape[0], h, d).transpose(0, 1)
    k = (f_t @ params.w_k).reshape(f_t.shape[0], h, d).transpose(0, 1)
    return stable_softmax(q @ k.transpose(1, 2) / math.sqrt(d))


def cross_modal_attention(p, f, params):
    """Queries from the position embedding ``p``, keys and values from view tokens ``f``."""
    p_t = p.tokens if isinstance(p, TokenSequence) else p
    f_t = f.tokens if isinstance(f, TokenSequence) else f
    if p_t.shape[1] != f_t.shape[1] or params.w_q.shape != (p_t.shape[1], p_t.shape[1]):
        raise ShapeError("position embedding, tokens and projections must share D")
    h = params.num_heads
    d = p_t.shape[1] // h
    attn = attention_weights(p_t, f_t, params)
    v = (f_t @ params.w_v).reshape(f_t.shape[0], h, d).transpose(0, 1)
    out = (attn @ v).transpose(0, 1).reshape(p_t.shape[0], -1)
    return TokenSequence(out, [("query", i) for i in range(p_t.shape[0])])


def fuse(p, f, params):
    """Residual fusion: f^F = p + attention(p, f)."""
    p_t = p.tokens if isinstance(p, TokenSequence) else p
    out = p_t + cross_modal_attention(p_t, f, params).tokens
    return TokenSequence(out, [("query", i) for i in range(p_t.shape[0])])


class CrossModalFusion(TransformerMixin, BaseEstimator):
    """Tokenize views with a linear patch embedding and fuse them into ``num_queries`` tokens.

    ``fit`` only draws the seeded weights (patch projection, position
    embedding of scale 0.02, attention projections); ``transform`` maps a
    list of views to the fused L_p x D token matrix.

    Views are ``(role, azimuth_deg, image)`` triples, where ``role`` is a
    :class:`~tiltrecon.camera.ViewRole` or its string form.
    """

    def __init__(self, patch_size=8, embed_dim=32, num_queries=48, num_heads=1, seed=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_queries = num_queries
        self.num_heads = num_heads
        self.seed = seed

    def fit(self, X, y=None):
        views = list(X)
        if not views:
            raise ValueError("need at least one view")
        channels = np.asarray(views[0][2]).shape[2]
        gen = torch.Generator().manual_seed(int(self.seed))
        fan_in = self.patch_size * self.patch_size * channels
        self.projection_ = torch.randn(fan_in, self.embed_dim, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
        self.position_embedding_ = 0.02 * torch.randn(self.num_queries, self.embed_dim, generator=gen, dtype=torch.float64)
        self.attention_ = init_attention(self.embed_dim, seed=int(self.seed) + 1, num_heads=self.num_heads)
        self.n_channels_ = channels
        return self

    def tokenize(self, X):
        check_is_fitted(self, "projection_")
        main, right = [], []
        for role, azimuth, image in X:
            role_s = str(role)
            seq = patchify(np.asarray(image, dtype=np.float64), self.patch_size, self.projection_,
                           view_id=role_s, azimuth=float(azimuth))
            (main if role_s.startswith("main") else right).append(seq)
        main.sort(key=lambda s: int(str(s.provenance[0][0]).split(":")[1]))
        return concat_view_tokens(main, [], right)

    def transform(self, X):
        tokens = self.tokenize(X)
        with torch.no_grad():
            return fuse(self.position_embedding_, tokens, self.attention_).tokens.numpy()
