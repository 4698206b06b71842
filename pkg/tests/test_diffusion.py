import numpy as np
import pytest
from hypothesis import given, strategies as st

from t2v.diffusion import (SamplerConfig, cfg_combine, ddim_sample, ddim_sigma, ddim_step, ddim_timesteps,
                           make_schedule, q_sample, training_loss)
from t2v.rng import Rng
from t2v.tensor import Tensor


def test_hand_schedule():
    s = make_schedule(4, "linear", 0.1, 0.4)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4], atol=1e-12)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024], atol=1e-9)


def test_single_step_schedule():
    s = make_schedule(1, "linear", 0.02, 0.3)
    np.testing.assert_allclose(s.alpha_bar, [0.98])


def test_scaled_linear_reference_schedule():
    s = make_schedule(1000, "scaled_linear", 0.00085, 0.012)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.01
    # sqrt-space interpolation: midpoint of sqrt(beta) squared
    mid = ((0.00085 ** 0.5 + 0.012 ** 0.5) / 2) ** 2
    np.testing.assert_allclose(0.5 * (s.beta[499] + s.beta[500]), mid, rtol=1e-5)


@pytest.mark.parametrize("args", [(0, "linear", 0.1, 0.2), (4, "linear", 0.0, 0.2), (4, "linear", 0.3, 0.2),
                                  (4, "linear", 0.1, 1.0), (4, "cosine", 0.1, 0.2)])
def test_schedule_validation(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


@given(st.integers(1, 500), st.sampled_from(["linear", "scaled_linear"]),
       st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_alpha_bar_strictly_decreasing_in_unit_interval(T, kind, start, extra):
    s = make_schedule(T, kind, start, min(start + extra, 0.999))
    ab = s.alpha_bar
    assert np.all(ab > 0) and np.all(ab <= 1)
    assert np.all(np.diff(ab) < 0)
    assert ab[0] == 1 - s.beta[0]


def test_q_sample_closed_form_cases():
    s = make_schedule(4, "linear", 0.1, 0.4)
    z0 = np.zeros((2, 3))
    eps = np.ones((2, 3))
    np.testing.assert_allclose(q_sample(z0, 2, eps, s), np.sqrt(1 - 0.504))
    # alpha_bar = 0.64: 0.8 * 1.0 + 0.6 * 0.5
    s64 = make_schedule(1, "linear", 0.36, 0.36)
    np.testing.assert_allclose(q_sample(np.array([1.0]), 0, np.array([0.5]), s64), [1.1], atol=1e-12)
    with pytest.raises(ValueError):
        q_sample(z0, 0, np.ones((3, 2)), s)
    with pytest.raises(ValueError):
        q_sample(z0, 4, eps, s)


def test_q_sample_per_item_timesteps():
    s = make_schedule(10, "linear", 0.01, 0.2)
    z0 = np.ones((3, 2, 2))
    eps = np.zeros((3, 2, 2))
    out = q_sample(z0, np.array([0, 4, 9]), eps, s)
    np.testing.assert_allclose(out[:, 0, 0], np.sqrt(s.alpha_bar[[0, 4, 9]]))


def test_q_sample_variance():
    s = make_schedule(100, "linear", 1e-4, 0.05)
    t = 40
    z0 = Rng(0).normal((10_000,), dtype=np.float64) * 2.0
    eps = Rng(1).normal((10_000,), dtype=np.float64)
    zt = q_sample(z0, t, eps, s)
    expected = s.alpha_bar[t] * 4.0 + (1 - s.alpha_bar[t])
    assert abs(zt.var() / expected - 1) < 0.05


def _loss_with(model, z0, seed=0):
    s = make_schedule(10, "linear", 0.01, 0.2)
    return training_loss(z0, Tensor(np.zeros((z0.shape[0], 3, 4))), model, s, Rng(seed)).item()


def test_loss_zero_for_noise_oracle():
    # rebuild the noise the loss will draw, from the same stream
    z0 = Rng(3).normal((2, 2, 4, 2, 2))
    eps = Rng(0).split(1).normal(z0.shape)
    assert _loss_with(lambda z, c, t: Tensor(eps), z0) == 0.0


def test_loss_of_zero_model_is_about_one():
    z0 = np.zeros((8, 4, 4, 8, 8), np.float32)  # 8192 elements
    vals = [_loss_with(lambda z, c, t: Tensor(np.zeros(z.shape, np.float32)), z0, seed) for seed in range(2)]
    assert abs(np.mean(vals) - 1.0) < 0.05


def test_loss_scalar_case():
    z0 = np.zeros((1, 1, 1, 1, 1), np.float32)
    eps = float(Rng(0).split(1).normal((1, 1, 1, 1, 1))[0, 0, 0, 0, 0])
    loss = _loss_with(lambda z, c, t: Tensor(np.full(z.shape, eps - 1.0, np.float32)), z0)
    assert loss == pytest.approx(1.0, rel=1e-6)


def test_caption_drop_uses_null_context():
    seen = []

    def model(z, c, t):
        seen.append(c.data.copy())
        return Tensor(np.zeros(z.shape, np.float32))

    s = make_schedule(10, "linear", 0.01, 0.2)
    B = 64
    ctx = Tensor(np.ones((B, 3, 4), np.float32))
    null = Tensor(np.zeros((3, 4), np.float32))
    training_loss(np.zeros((B, 1, 4, 1, 1), np.float32), ctx, model, s, Rng(2), null_context=null, p_uncond=0.1)
    dropped = (seen[0].reshape(B, -1) == 0).all(axis=1)
    kept = (seen[0].reshape(B, -1) == 1).all(axis=1)
    assert np.all(dropped | kept)
    expected = Rng(2).split(2).bernoulli(0.1, (B,))
    np.testing.assert_array_equal(dropped, expected)


def test_cfg_combine():
    c, u = np.array([1.0, -2.0]), np.array([0.3, 0.7])
    np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    assert cfg_combine(np.array(2.0), np.array(0.0), 1.5) == 3.0
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(3), 2.0)


@given(st.floats(0, 20), st.floats(-5, 5), st.floats(-5, 5))
def test_cfg_combine_is_affine(s, c, u):
    assert cfg_combine(np.array(c), np.array(u), s) == pytest.approx(u + s * (c - u), abs=1e-9)


def test_timestep_subsets():
    np.testing.assert_array_equal(ddim_timesteps(100, 4), [75, 50, 25, 0])
    np.testing.assert_array_equal(ddim_timesteps(10, 10), np.arange(10)[::-1])
    assert len(ddim_timesteps(1000, 50)) == 50 and ddim_timesteps(1000, 50)[0] == 980
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_zero_noise_prediction_hand_trace():
    s = make_schedule(9, "linear", 0.05, 0.3)
    zero = lambda z, c, t: np.zeros(z.shape, np.float32)  # noqa: E731
    out = ddim_sample(zero, np.zeros((2, 3)), (1, 4, 1, 1), SamplerConfig(3, 1.0), s, Rng(4))
    zT = Rng(4).split(0).normal((1, 1, 4, 1, 1), dtype=np.float64)[0]
    ts = [6, 3, 0]
    z = zT
    # hand recurrence: x0 = z/sqrt(ab_t); z' = sqrt(ab_prev) x0
    for i, t in enumerate(ts):
        ab_prev = s.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        z = np.sqrt(ab_prev) * (z / np.sqrt(s.alpha_bar[t]))
    np.testing.assert_allclose(out, z.astype(np.float32), rtol=1e-6)
    np.testing.assert_allclose(out, (zT / np.sqrt(s.alpha_bar[6])).astype(np.float32), rtol=1e-6)


def test_ddim_eta_one_matches_ddpm_posterior():
    # one step from t to t-1: mean and variance of the DDPM posterior q(z_{t-1} | z_t, x0)
    s = make_schedule(20, "linear", 0.01, 0.2)
    t = 7
    ab_t, ab_p = s.alpha_bar[t], s.alpha_bar[t - 1]
    beta_t = s.beta[t]
    zt = np.array([0.4, -1.3, 2.0])
    eps = np.array([0.1, 0.5, -0.7])
    x0 = (zt - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
    mean_ddpm = (np.sqrt(ab_p) * beta_t / (1 - ab_t)) * x0 + (np.sqrt(s.alpha[t]) * (1 - ab_p) / (1 - ab_t)) * zt
    var_ddpm = beta_t * (1 - ab_p) / (1 - ab_t)
    mean_ddim, _ = ddim_step(zt, eps, ab_t, ab_p, eta=1.0, noise=np.zeros(3))
    np.testing.assert_allclose(mean_ddim, mean_ddpm, rtol=1e-10)
    assert ddim_sigma(ab_t, ab_p, 1.0) ** 2 == pytest.approx(var_ddpm, rel=1e-10)


class _LinearModel:
    """Deterministic toy denoiser whose output depends on z, c and t."""

    def __call__(self, z, c, t):
        zd = z.data
        bias = c.data.mean(axis=(1, 2)).reshape(-1, 1, 1, 1, 1)
        return Tensor((0.3 * zd + bias + 0.01 * np.asarray(t).reshape(-1, 1, 1, 1, 1)).astype(np.float32))


def test_sampler_deterministic_and_guidance_identity():
    s = make_schedule(50, "linear", 1e-3, 0.05)
    m = _LinearModel()
    cond = np.full((3, 4), 0.2, np.float32)
    null = np.zeros((3, 4), np.float32)
    a = ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(10, 4.0), s, Rng(1), null_context=null)
    b = ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(10, 4.0), s, Rng(1), null_context=null)
    np.testing.assert_array_equal(a, b)
    g1 = ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(10, 1.0), s, Rng(1), null_context=null)
    c_only = ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(10, 1.0), s, Rng(1))
    assert np.abs(g1 - c_only).max() < 1e-6
    assert np.abs(a - g1).max() > 1e-3
    with pytest.raises(ValueError):
        ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(10, 4.0), s, Rng(1))
    with pytest.raises(ValueError):
        ddim_sample(m, cond, (2, 4, 2, 2), SamplerConfig(51, 1.0), s, Rng(1))


def test_initial_noise_is_independent_across_frames():
    s = make_schedule(10, "linear", 0.01, 0.2)
    ident = lambda z, c, t: np.zeros(z.shape, np.float32)  # noqa: E731
    out = ddim_sample(ident, np.zeros((2, 3)), (4, 4, 2, 2), SamplerConfig(1, 1.0), s, Rng(0))
    flat = out.reshape(4, -1)
    assert not any(np.allclose(flat[i], flat[j]) for i in range(4) for j in range(i + 1, 4))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(0)
    with pytest.raises(ValueError):
        SamplerConfig(10, -1.0)
    with pytest.raises(ValueError):
        SamplerConfig(10, 1.0, eta=1.5)
    assert SamplerConfig().num_steps == 50
