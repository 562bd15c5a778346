import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tiltrecon.diffusion import (
    DVIBatch, assign_ref_cond, dvi_loss, dvi_sample, dvi_train_step, embed_condition, init_denoiser,
    make_schedule, optimal_point_denoiser, predict_noise, q_sample, timestep_embedding,
)
from tiltrecon.errors import NumericalError, ShapeError

from fdcheck import directional_fd_errors


def test_assign_ref_cond_documented_cases():
    a = assign_ref_cond(1, 2)
    assert (a.ref_index, a.cond_index) == (1, 2)
    a = assign_ref_cond(2, 2)
    assert (a.ref_index, a.cond_index) == (2, 1)
    a = assign_ref_cond(2, 3)
    assert (a.ref_index, a.cond_index) == (2, 1)


@pytest.mark.parametrize("n", range(1, 9))
def test_assign_ref_cond_rule_and_partition(n):
    refs = []
    for i in range(1, n + 1):
        a = assign_ref_cond(i, n)
        expected = (1, 2) if i <= n / 2 else (2, 1)
        assert (a.ref_index, a.cond_index) == expected
        refs.append(a.ref_index)
    if n % 2 == 0:
        assert refs.count(1) == refs.count(2) == n // 2


@pytest.mark.parametrize("i,n", [(0, 2), (3, 2), (1, 0)])
def test_assign_ref_cond_rejects_out_of_range(i, n):
    with pytest.raises(ValueError):
        assign_ref_cond(i, n)


def test_assign_ref_cond_rejects_non_integers():
    with pytest.raises(TypeError):
        assign_ref_cond(1.0, 2)


def test_schedule_small_cases():
    s = make_schedule(1, 0.5, 0.5)
    assert list(s.alpha_bar) == [0.5]
    s = make_schedule(2, 0.1, 0.2)
    assert s.alpha_bar == pytest.approx([0.9, 0.72], abs=1e-15)


@pytest.mark.parametrize("T,b0,b1", [(1000, 1e-4, 0.02), (200, 1e-4, 0.02), (7, 0.01, 0.3)])
def test_schedule_matches_brute_force_product(T, b0, b1):
    s = make_schedule(T, b0, b1)
    for t in range(T):
        prod = 1.0
        for k in range(t + 1):
            prod *= 1.0 - s.beta[k]
        assert s.alpha_bar[t] == prod
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.beta) >= 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_limits_and_formula():
    s = make_schedule(100, 1e-8, 1e-8)
    x0 = torch.randn(4, 4, 3, dtype=torch.float64)
    eps = torch.randn(4, 4, 3, dtype=torch.float64)
    np.testing.assert_allclose(q_sample(x0, 0, eps, s), x0, atol=1e-3)
    s = make_schedule(100, 1e-4, 0.02)
    out = q_sample(x0, 37, torch.zeros_like(x0), s)
    np.testing.assert_allclose(out, math.sqrt(s.alpha_bar[37]) * x0, rtol=0, atol=1e-15)
    out = q_sample(x0, 37, eps, s)
    ref = np.sqrt(np.prod(1 - s.beta[:38])) * x0.numpy() + np.sqrt(1 - np.prod(1 - s.beta[:38])) * eps.numpy()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_q_sample_batched_timesteps():
    s = make_schedule(50, 1e-4, 0.02)
    x0 = torch.randn(3, 2, 2, 3, dtype=torch.float64)
    eps = torch.randn(3, 2, 2, 3, dtype=torch.float64)
    t = np.array([0, 10, 49])
    out = q_sample(x0, t, eps, s)
    for b in range(3):
        np.testing.assert_allclose(out[b], q_sample(x0[b], int(t[b]), eps[b], s), atol=1e-15)
    with pytest.raises(ValueError):
        q_sample(x0, np.array([0, 1, 50]), eps, s)
    with pytest.raises(ShapeError):
        q_sample(x0, 1, eps[0], s)


@pytest.mark.parametrize("t", [0, 50, 199])
def test_q_sample_variance_contract(t):
    s = make_schedule(200, 1e-4, 0.02)
    rng = np.random.default_rng(t)
    eps = rng.standard_normal(100_000)
    out = q_sample(np.zeros(100_000), t, eps, s)
    assert np.var(out) == pytest.approx(1.0 - s.alpha_bar[t], rel=0.05)


def small_params(seed=0, zero=False):
    return init_denoiser((8, 8, 3), patch_size=4, feature_dim=4, hidden=(16,), time_dim=8, seed=seed, zero=zero)


def small_batch(seed=0, b=3):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(b, 8, 8, 3, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(b, 8, 8, 3, generator=g, dtype=torch.float64)
    ref = torch.rand(b, 8, 8, 3, generator=g, dtype=torch.float64) * 2 - 1
    cond = torch.rand(b, 8, 8, 3, generator=g, dtype=torch.float64) * 2 - 1
    t = np.random.default_rng(seed).integers(0, 20, size=b)
    pose = np.random.default_rng(seed + 1).uniform(-60, 60, size=(b, 3))
    return DVIBatch(x0, t, eps, ref=ref, cond_image=cond, rel_pose=pose)


def test_zero_denoiser_zero_noise_has_zero_loss_and_gradient():
    p = small_params(zero=True)
    batch = small_batch()
    batch.eps = torch.zeros_like(batch.eps)
    batch.x0 = torch.zeros_like(batch.x0)
    s = make_schedule(20, 1e-4, 0.02)
    leaves = {k: v.clone().requires_grad_(True) for k, v in p.weights.items()}
    p.weights = leaves
    loss = dvi_loss(p, batch, s)
    assert float(loss.detach()) == 0.0
    grads = torch.autograd.grad(loss, [leaves["b1"], leaves["w1"]])
    assert all(float(g.abs().max()) == 0.0 for g in grads)


@pytest.mark.parametrize("seed", range(3))
def test_dvi_gradients_match_finite_differences(seed):
    p = small_params(seed)
    # move biases off zero so every path is exercised
    p.weights = {k: v + 0.1 * torch.randn(v.shape, generator=torch.Generator().manual_seed(seed), dtype=v.dtype)
                 if k.startswith(("b", "enc_b")) else v for k, v in p.weights.items()}
    batch = small_batch(seed)
    s = make_schedule(20, 1e-4, 0.02)

    def fn(w):
        q = small_params(seed)
        q.weights = w
        return dvi_loss(q, batch, s)

    errs = directional_fd_errors(fn, p.weights, n_dirs=2, seed=seed)
    assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])


def test_dvi_train_step_is_pure_and_updates():
    p = small_params()
    before = {k: v.clone() for k, v in p.weights.items()}
    s = make_schedule(20, 1e-4, 0.02)
    p2, loss = dvi_train_step(p, small_batch(), s, 1e-3)
    assert all(torch.equal(before[k], p.weights[k]) for k in before)
    assert any(not torch.equal(before[k], p2.weights[k]) for k in before)
    assert p2.adam["step"] == 1 and math.isfinite(loss)


def test_dvi_train_step_raises_on_non_finite_loss():
    p = small_params()
    batch = small_batch()
    batch.eps = batch.eps * float("inf")
    with pytest.raises(NumericalError) as info:
        dvi_train_step(p, batch, make_schedule(20, 1e-4, 0.02), 1e-3)
    assert info.value.state is p


def test_toy_training_halves_loss():
    sched = make_schedule(200, 1e-4, 0.02)
    p = init_denoiser(seed=0)
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64) * 2 - 1
    cond = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64) * 2 - 1
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        t = rng.integers(0, 200, size=8)
        eps = torch.randn(8, 32, 32, 3, generator=g, dtype=torch.float64)
        batch = DVIBatch(x0.expand(8, -1, -1, -1), t, eps, ref=cond.expand(8, -1, -1, -1),
                         cond_image=cond.expand(8, -1, -1, -1), rel_pose=np.tile([30.0, 30.0, 0.0], (8, 1)))
        p, loss = dvi_train_step(p, batch, sched, 1e-3)
        losses.append(loss)
    assert np.mean(losses[-20:]) <= 0.5 * losses[0]


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding([0, 5, 199], 32)
    assert e.shape == (3, 32)
    assert float(e.abs().max()) <= 1.0
    np.testing.assert_allclose(e[0, 16:], 1.0)


def test_embed_condition_cases():
    p = small_params(zero=True)
    emb = embed_condition(p, torch.zeros(8, 8, 3, dtype=torch.float64), (0.0, 0.0, 0.0))
    assert emb.shape == (p.embedding_dim,)
    assert float(emb.abs().max()) == 0.0
    p = small_params(seed=4)
    img = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    e1 = embed_condition(p, img, (30.0, 30.0, 0.0))
    e2 = embed_condition(small_params(seed=4), img, (30.0, 30.0, 0.0))
    assert torch.equal(e1, e2)
    img2 = img.clone()
    img2[3, 3, 1] += 0.5
    assert not torch.equal(e1, embed_condition(p, img2, (30.0, 30.0, 0.0)))
    # pose deltas are appended scaled
    np.testing.assert_allclose(e1[-3:], [30 / 180, 30 / 90, 0.0])
    with pytest.raises(ShapeError):
        embed_condition(p, torch.zeros(4, 4, 3, dtype=torch.float64), (0, 0, 0))


def test_predict_noise_checks_reference_shape():
    p = small_params()
    z = torch.zeros(1, 8, 8, 3, dtype=torch.float64)
    cond = torch.zeros(p.embedding_dim, dtype=torch.float64)
    assert predict_noise(p, z, 3, cond, None).shape == z.shape
    with pytest.raises(ShapeError):
        predict_noise(p, z, 3, cond, torch.zeros(1, 4, 4, 3, dtype=torch.float64))


def test_optimal_predictor_sampling_recovers_point():
    s = make_schedule(200, 1e-4, 0.02)
    x_star = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 2 - 1
    for seed in range(3):
        out = dvi_sample(optimal_point_denoiser(x_star, s), None, s, seed=seed, shape=(8, 8, 3))
        assert float((out - x_star).abs().max()) < 0.05


def test_sampling_is_deterministic():
    p = small_params(seed=2)
    s = make_schedule(20, 1e-4, 0.02)
    cond = torch.zeros(p.embedding_dim, dtype=torch.float64)
    a = dvi_sample(p, cond, s, seed=5)
    b = dvi_sample(p, cond, s, seed=5)
    assert torch.equal(a, b)
    assert not torch.equal(a, dvi_sample(p, cond, s, seed=6))


def test_single_step_sampling_is_one_denoiser_application():
    s = make_schedule(1, 0.999, 0.999)
    calls = []

    def denoise(z, t, c, r):
        calls.append(z.clone())
        return torch.full_like(z, 0.25)

    out = dvi_sample(denoise, None, s, seed=1, shape=(2, 2, 3))
    assert len(calls) == 1
    z = calls[0][0]
    # beta = 1 - alpha = 1 - alpha_bar = 0.999
    expected = (z - 0.999 / math.sqrt(0.999) * 0.25) / math.sqrt(0.001)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_callable_sampler_needs_shape():
    with pytest.raises(ValueError):
        dvi_sample(lambda *a: 0, None, make_schedule(2, 0.1, 0.1), seed=0)


@given(st.integers(1, 30), st.integers(0, 10))
def test_assign_ref_cond_complementary_slots(n, k):
    i = k % n + 1
    a, b = assign_ref_cond(i, n), assign_ref_cond(n + 1 - i, n)
    # mirrored slots take opposite sides unless they coincide
    if i != n + 1 - i:
        assert a.ref_index != b.ref_index
