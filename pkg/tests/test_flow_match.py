import numpy as np
import pytest

from errors import DomainError, NonFiniteError
from flow_match import (
    PARAM_NAMES,
    ContextCache,
    DenoiserParams,
    LatentSequence,
    ModelConfig,
    RMSProp,
    TrainConfig,
    causal_context,
    closed_form_velocity_gaussian,
    euler_sample,
    fm_loss,
    interpolate,
    sample_timestep_logitnormal,
    target_velocity,
    time_embedding,
    train_denoiser,
    velocity_error_vs_closed_form,
)
from schedule_core import ad_schedule
from gradcheck import assert_grads_close

SMALL = ModelConfig(dim=3, max_frames=3, hidden=5, n_prompts=2, time_freqs=2)


@pytest.fixture
def small_params():
    return DenoiserParams.init(SMALL, np.random.default_rng(0))


# ---------- interpolation and targets ----------

def test_interpolate_endpoints(rng):
    x1, x0 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    np.testing.assert_array_equal(interpolate(x1, x0, np.zeros(4)), x0)
    np.testing.assert_array_equal(interpolate(x1, x0, np.ones(4)), x1)


def test_interpolate_example():
    out = interpolate(LatentSequence([[2.0]]), LatentSequence([[0.0]]), np.array([0.25]))
    assert out.frames[0, 0] == 0.5
    assert out.per_frame_t[0] == 0.75


def test_interpolate_uses_each_frames_time(rng):
    x1, x0 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    t = np.array([0.0, 0.5, 1.0])
    out = interpolate(x1, x0, t)
    for i in range(3):
        np.testing.assert_allclose(out[i], t[i] * x1[i] + (1 - t[i]) * x0[i])


def test_interpolate_rejects_bad_input():
    with pytest.raises(DomainError):
        interpolate(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(DomainError):
        interpolate(np.zeros((2, 3)), np.zeros((2, 3)), np.array([0.5, 1.5]))


def test_target_velocity_examples(rng):
    np.testing.assert_array_equal(target_velocity([[3.0, 1.0]], [[1.0, 1.0]]), [[2.0, 0.0]])
    a = rng.standard_normal((2, 4))
    assert not np.any(target_velocity(a, a))
    b = rng.standard_normal((2, 4))
    np.testing.assert_array_equal(target_velocity(a, b), -target_velocity(b, a))
    with pytest.raises(DomainError):
        target_velocity(a, b[:1])


def test_latent_sequence_validation():
    with pytest.raises(DomainError):
        LatentSequence(np.zeros(3))
    with pytest.raises(DomainError):
        LatentSequence(np.zeros((2, 3)), per_frame_t=[0.1, 1.2])


def test_time_embedding_shape():
    emb = time_embedding(np.zeros((2, 5)), 4)
    assert emb.shape == (2, 5, 8)
    np.testing.assert_array_equal(emb[..., :4], 0.0)
    np.testing.assert_array_equal(emb[..., 4:], 1.0)


# ---------- logit-normal timesteps ----------

def test_logitnormal_median_and_support():
    t = sample_timestep_logitnormal(np.random.default_rng(0), 0.0, 1.0, size=100_000)
    assert abs(np.median(t) - 0.5) < 0.01
    assert np.all(t > 0) and np.all(t < 1)


def test_logitnormal_is_reproducible():
    a = sample_timestep_logitnormal(np.random.default_rng(3), size=50)
    b = sample_timestep_logitnormal(np.random.default_rng(3), size=50)
    np.testing.assert_array_equal(a, b)


def test_logitnormal_rejects_bad_scale(rng):
    with pytest.raises(DomainError):
        sample_timestep_logitnormal(rng, 0.0, 0.0)


# ---------- loss and gradients ----------

def test_fm_loss_gradients_match_finite_differences():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = DenoiserParams.init(SMALL, rng)
        x1 = rng.standard_normal((2, 3, 3))
        x0 = rng.standard_normal((2, 3, 3))
        t = rng.uniform(0, 1, size=(2, 3))
        cond = np.array([0, 1])
        _, grads = fm_loss(params, x1, x0, t, cond)
        assert_grads_close(params, grads, lambda: fm_loss(params, x1, x0, t, cond)[0], PARAM_NAMES)


def test_fm_loss_zero_for_perfect_model(small_params, rng):
    # with every weight zero except b_out the model outputs b_out for all inputs
    params = small_params
    for name in PARAM_NAMES:
        getattr(params, name)[...] = 0.0
    x0 = rng.standard_normal((1, 3))
    x1 = x0 + np.array([1.0, -2.0, 0.5])
    params.b_out[:] = [1.0, -2.0, 0.5]
    loss, _ = fm_loss(params, x1, x0, np.full(1, 0.3))
    assert loss == pytest.approx(0.0, abs=1e-24)


def test_fm_loss_frame_permutation_invariance(small_params, rng):
    params = small_params
    params.pos[...] = 0.0
    # the causal context depends on frame order too
    params.w_ctx[...] = 0.0
    x1, x0 = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    t = rng.uniform(0, 1, size=(2, 3))
    perm = [2, 0, 1]
    a, _ = fm_loss(params, x1, x0, t)
    b, _ = fm_loss(params, x1[:, perm], x0[:, perm], t[:, perm])
    assert a == pytest.approx(b, rel=1e-12)


def test_fm_loss_rejects_nan(small_params):
    x1 = np.zeros((1, 2, 3))
    x1[0, 1, 2] = np.nan
    with pytest.raises(NonFiniteError) as info:
        fm_loss(small_params, x1, np.zeros((1, 2, 3)), np.full((1, 2), 0.5))
    assert "x1" in info.value.diagnostics["arrays"]


def test_rmsprop_flags_non_finite_parameters(small_params):
    grads = small_params.zeros_like()
    grads["b_out"][:] = np.inf
    with pytest.raises(NonFiniteError):
        RMSProp().step(small_params, grads)


# ---------- causal context ----------

def test_causal_context_is_mean_of_predecessors(rng):
    x = rng.standard_normal((2, 4, 3))
    ctx = causal_context(x)
    np.testing.assert_array_equal(ctx[:, 0], 0.0)
    for f in range(1, 4):
        np.testing.assert_allclose(ctx[:, f], x[:, :f].mean(axis=1))


def test_context_cache_gives_identical_outputs(rng):
    params = DenoiserParams.init(ModelConfig(dim=4, max_frames=5, hidden=8), rng)
    x = rng.standard_normal((5, 4))
    t = rng.uniform(0, 1, size=5)
    cache = ContextCache()
    plain = params.velocity(x, t)
    first = params.velocity(x, t, cache=cache, frozen=2)
    x2 = x.copy()
    x2[2:] += 1.0
    second = params.velocity(x2, t, cache=cache, frozen=2)
    np.testing.assert_array_equal(first, plain)
    np.testing.assert_array_equal(second, params.velocity(x2, t))


def test_denoiser_is_causal(rng):
    params = DenoiserParams.init(ModelConfig(dim=4, max_frames=6, hidden=8), rng)
    x = rng.standard_normal((6, 4))
    t = rng.uniform(0, 1, size=6)
    base = params.velocity(x, t)
    for k in range(6):
        bumped = x.copy()
        bumped[k] += 0.5
        out = params.velocity(bumped, t)
        np.testing.assert_array_equal(out[:k], base[:k])
        assert not np.allclose(out[k:], base[k:])


def test_forward_rejects_wrong_dim_and_too_many_frames(small_params):
    with pytest.raises(DomainError):
        small_params.velocity(np.zeros((2, 4)), 0.5)
    with pytest.raises(DomainError):
        small_params.velocity(np.zeros((4, 3)), 0.5)


# ---------- closed-form oracle ----------

def test_closed_form_coefficient_examples():
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(closed_form_velocity_gaussian(x, 0.5, 1.0), 0.0, atol=1e-15)
    assert not np.any(closed_form_velocity_gaussian(np.zeros(3), 0.3, 2.0))
    np.testing.assert_allclose(closed_form_velocity_gaussian(x, 1.0, 2.0), x)


@pytest.mark.parametrize("t,sigma1", [(0.5, 1.0), (0.3, 2.0), (0.9, 2.0)])
def test_closed_form_matches_monte_carlo_regression(t, sigma1):
    rng = np.random.default_rng(11)
    n = 1_000_000
    x1 = sigma1 * rng.standard_normal(n)
    x0 = rng.standard_normal(n)
    xt = t * x1 + (1 - t) * x0
    slope = np.dot(xt, x1 - x0) / np.dot(xt, xt)
    assert slope == pytest.approx(float(closed_form_velocity_gaussian(1.0, t, sigma1)), abs=0.01)


# ---------- sampling ----------

def test_euler_constant_velocity(rng):
    w = np.array([0.5, -1.0, 2.0])
    x_init = rng.standard_normal((4, 3))
    out = euler_sample(lambda x, t, c: np.broadcast_to(w, x.shape), ad_schedule(4, 10, 0), x_init)
    np.testing.assert_allclose(out.frames, x_init + w, atol=1e-12)
    np.testing.assert_array_equal(out.per_frame_t, 0.0)


def test_euler_sample_gaussian_covariance():
    rng = np.random.default_rng(2)
    sigma1 = 2.0
    x_init = rng.standard_normal((4000, 1, 2))
    out = euler_sample(lambda x, t, c: closed_form_velocity_gaussian(x, t, sigma1),
                       ad_schedule(1, 200, 0), x_init)
    cov = np.cov(out.reshape(-1, 2), rowvar=False)
    target = sigma1 ** 2 * np.eye(2)
    assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.1


def test_autoregressive_first_frame_matches_single_frame_run(rng):
    params = DenoiserParams.init(ModelConfig(dim=4, max_frames=3, hidden=8), rng)
    x_init = np.random.default_rng(9).standard_normal((3, 4))
    full = euler_sample(params, ad_schedule(3, 6, 6), x_init)
    single = euler_sample(params, ad_schedule(1, 6, 0), x_init[:1])
    np.testing.assert_array_equal(full.frames[0], single.frames[0])


def test_euler_sample_is_deterministic(small_params, rng):
    x_init = rng.standard_normal((3, 3))
    plan = ad_schedule(3, 5, 2)
    a = euler_sample(small_params, plan, x_init, cond=1)
    b = euler_sample(small_params, plan, x_init, cond=1)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_euler_sample_rejects_frame_mismatch(small_params):
    with pytest.raises(DomainError):
        euler_sample(small_params, ad_schedule(2, 5, 0), np.zeros((3, 3)))


# ---------- training ----------

def _gaussian_data(n, frames, dim, sigma1, seed):
    return sigma1 * np.random.default_rng(seed).standard_normal((n, frames, dim))


def test_training_reduces_loss():
    data = _gaussian_data(256, 2, 2, 2.0, 0)
    params = DenoiserParams.init(ModelConfig(dim=2, max_frames=2, hidden=16), np.random.default_rng(0))
    cfg = TrainConfig(learning_rate=3e-3, batch_size=32, steps=300, seed=1)
    params, history = train_denoiser(params, data, cfg)
    assert list(history.columns) == ["step", "loss"]
    assert len(history) == 300
    assert history["loss"].iloc[-50:].mean() < history["loss"].iloc[:50].mean()
    assert params.is_finite()


@pytest.mark.slow
def test_smoothed_loss_decreases_over_first_steps():
    data = _gaussian_data(2000, 4, 4, 2.0, 0)
    params = DenoiserParams.init(ModelConfig(dim=4, max_frames=4, hidden=64), np.random.default_rng(0))
    cfg = TrainConfig(batch_size=64, steps=500, seed=0)
    _, history = train_denoiser(params, data, cfg)
    smooth = history["loss"].rolling(50).mean().dropna().to_numpy()
    blocks = smooth[::50]
    assert blocks[-1] < blocks[0]
    assert np.all(blocks[1:] < blocks[:-1] * 1.02)


@pytest.mark.slow
def test_learned_field_matches_gaussian_oracle():
    sigma1 = 2.0
    data = _gaussian_data(4096, 4, 4, sigma1, 0)
    params = DenoiserParams.init(ModelConfig(dim=4, max_frames=4, hidden=64), np.random.default_rng(0))
    cfg = TrainConfig(batch_size=64, steps=5000, seed=0)
    params, _ = train_denoiser(params, data, cfg)
    rng = np.random.default_rng(100)
    assert velocity_error_vs_closed_form(params, sigma1, 4, rng) < 0.1
    x_init = rng.standard_normal((2500, 4, 4))
    out = euler_sample(params, ad_schedule(4, 50, 0), x_init)
    cov = np.cov(out.reshape(-1, 4), rowvar=False)
    target = sigma1 ** 2 * np.eye(4)
    assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.1
