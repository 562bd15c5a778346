"""Estimator wrapper around the conditional denoiser: training on view triples and gap interpolation."""

from dataclasses import dataclass
import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .camera import relative_pose
from .diffusion import (
    DVIBatch, DenoiserParams, assign_ref_cond, dvi_sample, dvi_train_step, embed_condition,
    init_denoiser, make_schedule,
)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class DVIExample:
    """One training triple: the view to synthesize plus its reference and condition main views."""

    ref_image: np.ndarray
    cond_image: np.ndarray
    rel_pose: tuple
    target_image: np.ndarray = None


def gap_examples(main_left, main_right, interp, n):
    """Training examples for one gap.

    ``main_left``/``main_right`` are (image, pose); ``interp`` lists
    (slot, pose, image) with slots 1..n.
    """
    mains = {1: main_left, 2: main_right}
    out = []
    for slot, pose, image in interp:
        a = assign_ref_cond(slot, n)
        ref_img, _ = mains[a.ref_index]
        cond_img, cond_pose = mains[a.cond_index]
        out.append(DVIExample(ref_img, cond_img, relative_pose(cond_pose, pose), image))
    return out


class DVIInterpolator(BaseEstimator):
    """Toy pixel-space conditional DDPM for synthesizing views between two main views.

    Images are H x W x 3 in [0, 1] and are mapped to [-1, 1] internally.
    When an example carries a ``target_image`` that view is the denoising
    target; otherwise the reference view is.
    """

    def __init__(self, image_size=32, patch_size=8, feature_dim=16, hidden=(256, 256), timesteps=200,
                 beta_start=1e-4, beta_end=0.02, steps=200, learning_rate=1e-3, batch_size=8, seed=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def _to_model(self, img):
        arr = check_image(img, channels=3)
        if arr.shape[:2] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {arr.shape[:2]}")
        return torch.as_tensor(2.0 * arr - 1.0)

    def fit(self, X, y=None):
        examples = list(X)
        if not examples:
            raise ValueError("no training examples")
        self.schedule_ = make_schedule(self.timesteps, self.beta_start, self.beta_end)
        params = init_denoiser((self.image_size, self.image_size, 3), self.patch_size, self.feature_dim,
                               tuple(self.hidden), seed=self.seed)
        refs = torch.stack([self._to_model(e.ref_image) for e in examples])
        conds = torch.stack([self._to_model(e.cond_image) for e in examples])
        targets = torch.stack([self._to_model(e.target_image if e.target_image is not None else e.ref_image)
                               for e in examples])
        poses = np.asarray([e.rel_pose for e in examples], dtype=np.float64)
        gen = torch.Generator().manual_seed(int(self.seed) + 1)
        history = []
        for step in range(int(self.steps)):
            idx = torch.randint(len(examples), (self.batch_size,), generator=gen)
            t = torch.randint(self.timesteps, (self.batch_size,), generator=gen).numpy()
            eps = torch.randn(targets[idx].shape, generator=gen, dtype=torch.float64)
            batch = DVIBatch(x0=targets[idx], t=t, eps=eps, ref=refs[idx], cond_image=conds[idx],
                             rel_pose=poses[idx.numpy()])
            params, loss = dvi_train_step(params, batch, self.schedule_, self.learning_rate)
            history.append(loss)
        self.params_ = params
        self.history_ = history
        return self

    def sample(self, ref_image, cond_image, rel_pose, seed=0):
        check_is_fitted(self, "params_")
        cond = embed_condition(self.params_, self._to_model(cond_image), rel_pose).detach()
        out = dvi_sample(self.params_, cond, self.schedule_, seed, ref=self._to_model(ref_image))
        return np.clip((out.numpy() + 1.0) / 2.0, 0.0, 1.0)

    def interpolate(self, main_left, main_right, interp_poses, seed=0):
        """Synthesize views at ``interp_poses`` (slot order) between two (image, pose) main views.

        Returns ``(images, assignments)``; slot ``i`` uses seed ``seed + i``.
        """
        n = len(interp_poses)
        mains = {1: main_left, 2: main_right}
        images, assignments = [], []
        for i, pose in enumerate(interp_poses, start=1):
            a = assign_ref_cond(i, n)
            ref_img, _ = mains[a.ref_index]
            cond_img, cond_pose = mains[a.cond_index]
            images.append(self.sample(ref_img, cond_img, relative_pose(cond_pose, pose), seed=seed + i))
            assignments.append(a)
        return images, assignments

    def load_params(self, params):
        self.params_ = params
        self.schedule_ = make_schedule(self.timesteps, self.beta_start, self.beta_end)
        self.history_ = []
        return self


def params_from_tensors(tensors, meta):
    return DenoiserParams(tuple(meta["image_shape"]), meta["patch_size"], meta["feature_dim"],
                          tuple(meta["hidden"]), meta["time_dim"], dict(tensors))
