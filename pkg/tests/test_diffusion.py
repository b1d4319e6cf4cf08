import math

import numpy as np
import pytest
import torch

from maskel.diffusion import (
    DenoiserConfig,
    NoiseSchedule,
    denoiser_loss,
    load_denoiser,
    make_linear_schedule,
    p_sample,
    q_sample_marginal,
    q_sample_step,
    save_denoiser,
    train_denoiser,
)
from maskel.errors import ConfigError, ShapeError, StepOutOfRange, TrainingError
from maskel.layers import UNet, count_parameters
from maskel.oracles import finite_difference_check
from maskel.phantom import validate_image
from maskel.training import smoothed


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.beta.tolist() == [0.5]
    assert s.alpha_bar.tolist() == [0.5]


def test_default_schedule_terminal_alpha_bar():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for k in range(1000):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 999)
    assert prod < 1e-3
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(1000, 1e-4, 1.0), (0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_derived_fields_follow_beta():
    s = make_linear_schedule(10, 0.1, 0.2)
    np.testing.assert_array_equal(s.alpha, 1 - s.beta)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5


def test_step_identity_limit():
    s = NoiseSchedule(np.array([1e-12]))
    x = np.linspace(0, 1, 17)
    # noise kept inside [-1, 1] so the sqrt(beta) term alone stays under 1e-6
    out = q_sample_step(x, 1, np.random.default_rng(0).uniform(-0.9, 0.9, 17), s)
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_step_noise_free_scaling():
    s = NoiseSchedule(np.array([0.19]))
    x = np.array([0.2, -0.7, 1.0])
    np.testing.assert_allclose(q_sample_step(x, 1, np.zeros(3), s), 0.9 * x, rtol=1e-15)


def test_step_monte_carlo_moments():
    s = NoiseSchedule(np.array([0.04]))
    noise = np.random.default_rng(1).standard_normal(100_000)
    out = q_sample_step(np.full(100_000, 0.3), 1, noise, s)
    assert out.mean() == pytest.approx(0.3 * math.sqrt(0.96), rel=0.01)
    assert out.var() == pytest.approx(0.04, rel=0.02)


def test_step_range_and_shape_errors():
    s = make_linear_schedule(10)
    with pytest.raises(StepOutOfRange):
        q_sample_step(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(StepOutOfRange):
        q_sample_marginal(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ShapeError):
        q_sample_step(np.zeros(3), 1, np.zeros(4), s)


def test_marginal_with_unit_alpha_bar():
    s = NoiseSchedule(np.array([0.0]))
    x = np.random.default_rng(0).random(5)
    np.testing.assert_array_equal(q_sample_marginal(x, 1, np.ones(5), s), x)


def test_torch_batch_steps():
    s = make_linear_schedule(100)
    x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    t = torch.tensor([1, 50, 100])
    out = q_sample_marginal(x0, t, torch.zeros_like(x0), s)
    np.testing.assert_allclose(out[:, 0, 0, 0].numpy(), np.sqrt(s.alpha_bar[[0, 49, 99]]))


def micro_denoiser():
    torch.manual_seed(0)
    net = UNet(1, 1, (3,), tdim=6).double()
    assert count_parameters(net) <= 1000
    return net


def test_loss_gradient_matches_finite_differences():
    s = make_linear_schedule(50, 1e-3, 0.2)
    net = micro_denoiser()
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand((2, 1, 8, 8), generator=g, dtype=torch.float64) * 2 - 1
    noise = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 40])
    res = finite_difference_check(lambda: denoiser_loss(net, x0, t, noise, s), net.parameters(), n=100)
    assert max(r[2] for r in res) <= 1e-4


def _tiny_cfg(**kw):
    base = dict(steps=200, batch_size=8, lr=2e-3, channels=(8, 16), resolution=16, log_every=0)
    base.update(kw)
    return DenoiserConfig(**base)


def test_black_dataset_learnable():
    s = make_linear_schedule(100, 1e-3, 0.1)
    model = train_denoiser([np.zeros((16, 16))] * 32, s, _tiny_cfg())
    assert np.mean(model.losses[-20:]) < np.mean(model.losses[:20])


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError):
        train_denoiser([], make_linear_schedule(10), _tiny_cfg())


def test_wrong_resolution_rejected():
    with pytest.raises(ShapeError):
        train_denoiser([np.zeros((32, 32))], make_linear_schedule(10), _tiny_cfg())


def test_non_finite_loss_aborts():
    data = [np.full((16, 16), np.nan)]
    with pytest.raises(TrainingError, match="non-finite"):
        train_denoiser(data, make_linear_schedule(10), _tiny_cfg(steps=3))


@pytest.fixture(scope="module")
def black_model():
    s = make_linear_schedule(100, 1e-3, 0.1)
    cfg = _tiny_cfg(steps=1500, lr=1e-3, channels=(16, 32), resolution=8)
    return train_denoiser([np.zeros((8, 8))] * 32, s, cfg), s


def test_sampling_deterministic(black_model):
    model, s = black_model
    a = p_sample(model, s, 4, seed=3)
    b = p_sample(model, s, 4, seed=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, p_sample(model, s, 4, seed=4))


def test_black_model_samples_dark(black_model):
    model, s = black_model
    imgs = p_sample(model, s, 16, seed=0)
    assert imgs.shape == (16, 8, 8)
    for im in imgs:
        validate_image(im)
    assert imgs.mean() < 0.05


def test_schedule_mismatch_rejected(black_model):
    model, _ = black_model
    with pytest.raises(ConfigError):
        p_sample(model, make_linear_schedule(100, 1e-4, 0.02), 1, seed=0)


def test_checkpoint_round_trip(black_model, tmp_path):
    model, s = black_model
    save_denoiser(tmp_path / "d.ckpt", model)
    loaded = load_denoiser(tmp_path / "d.ckpt")
    assert loaded.resolution == 8 and loaded.step == model.step
    np.testing.assert_array_equal(loaded.schedule.beta, s.beta)
    np.testing.assert_array_equal(p_sample(loaded, s, 2, seed=1), p_sample(model, s, 2, seed=1))


@pytest.mark.slow
def test_phantom_training_curve_decreases():
    from maskel.phantom import render_arrays
    _, xrays = render_arrays(64, 64, seed=0)
    cfg = DenoiserConfig(steps=2000, batch_size=8, channels=(16, 32, 32), log_every=0, lr=2e-4)
    model = train_denoiser(xrays, make_linear_schedule(), cfg)
    curve = smoothed(model.losses, 100)
    assert curve[-1] < curve[0]
    # windowed curve trends downward: least-squares slope is negative
    assert np.polyfit(np.arange(len(curve)), curve, 1)[0] < 0
    assert curve[-5:].mean() < curve[:5].mean()
    assert count_parameters(model.net) <= 2_000_000
