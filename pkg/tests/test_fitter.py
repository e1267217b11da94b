import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vadecomp.eventgen import DecompositionHypothesis, make_event
from vadecomp.fitter import (
    Adam,
    FitConfig,
    Parameterization,
    fit_best_image,
    fit_likelihood,
    interval_from_curve,
    neg2_log_likelihood,
    profile_interval,
    profile_parameter,
    run_seeds,
)
from vadecomp.forward import ForwardModel, generate, loss_and_gradient, neg2_log_likelihood_grad
from vadecomp.imaging import CROP_GRID, GridMismatch, GridSpec, VoxelImage
from vadecomp.physics import ParticleKinematics
from vadecomp.seeder import peel

from oracles import neg2ll_mp


ONE = GridSpec(1, 10.0)


def img(values):
    return VoxelImage(ONE, np.asarray(values, dtype=float))


def test_likelihood_examples():
    assert neg2_log_likelihood(img([2.0]), img([1.0])) == pytest.approx(0.77259, abs=5e-6)
    assert neg2_log_likelihood(img([2.0]), img([1.0])) == pytest.approx(2 * (2 * math.log(2) - 1), rel=1e-14)
    assert neg2_log_likelihood(img([0.0]), img([3.0])) == pytest.approx(6.0, rel=1e-14)
    x = np.abs(np.random.default_rng(0).normal(50, 20, 343)) + 1.0
    full = VoxelImage(CROP_GRID, x)
    assert neg2_log_likelihood(full, full) == 0.0


def test_likelihood_grid_mismatch():
    with pytest.raises(GridMismatch):
        neg2_log_likelihood(img([1.0]), VoxelImage(CROP_GRID, np.ones(343)))


@given(st.integers(1, 343).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0.0, 1e4)),
    arrays(np.float64, n, elements=st.floats(0.0, 1e4)))))
def test_likelihood_matches_high_precision(pair):
    obs, exp = pair
    ours = neg2_log_likelihood_grad(obs, exp)[0]
    assert ours >= 0.0
    assert ours == pytest.approx(neg2ll_mp(obs, exp), rel=1e-10, abs=1e-12)


def test_adam_first_step_and_fixed_point():
    opt = Adam(np.array([0.05]))
    x = opt.step(np.array([1.0]), np.array([1.0]))
    assert x[0] == pytest.approx(1.0 - 0.05 / (1.0 + 1e-8), rel=1e-15)
    opt = Adam(np.array([0.05, 0.2]))
    y = np.array([0.3, -0.7])
    for _ in range(10):
        y2 = opt.step(y, np.zeros(2))
        assert np.array_equal(y2, y)


def test_adam_learning_rate_ratio():
    opt = Adam(np.array([0.005, 0.2]))
    x0 = np.zeros(2)
    x1 = opt.step(x0, np.array([0.7, 0.7]))
    assert (x1[1] - x0[1]) / (x1[0] - x0[0]) == pytest.approx(40.0)


def test_adam_matches_reference_sequence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    opt = Adam(np.array([lr]), b1, b2, eps)
    x, m, v = 2.0, 0.0, 0.0
    xv = np.array([x])
    for t in range(1, 6):
        g = 2 * x                       # d/dx x^2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        xv = opt.step(xv, 2 * xv)
        assert xv[0] == pytest.approx(x, rel=1e-14)


@pytest.mark.parametrize("kw", [{"n": 0}, {"m_factor": 0}, {"lr_ke": 0.0}, {"lr_dir": -1.0}])
def test_fit_config_validation(kw):
    with pytest.raises(ValueError):
        FitConfig(**kw)


def test_parameterization_roundtrip():
    ev = make_event(2, 1)
    par = Parameterization(ev.truth)
    h = par.hypothesis(par.initial())
    assert np.allclose(h.vertex, ev.truth.vertex)
    for a, b in zip(h.particles, ev.truth.particles):
        assert a.ke == pytest.approx(b.ke)
        assert np.allclose(a.direction, b.direction, atol=1e-12)


def test_parameterization_pullback():
    ev = make_event(2, 2)
    par = Parameterization(ev.truth)
    fm = ForwardModel(ev.muon)
    rng = np.random.default_rng(0)
    x = par.initial() + rng.normal(0, 0.02, par.size)
    tgt = ev.target.pe

    def f(y):
        v, kes, us, _ = par.decode(y)
        return fm.value_and_grad(v, par.ptypes, kes, us, tgt, "neg2ll")

    _, g, _ = f(x)
    gx = par.pullback(x, g)
    for i in range(par.size):
        e = np.zeros(par.size)
        e[i] = 1e-6
        fd = (f(x + e)[0] - f(x - e)[0]) / 2e-6
        assert gx[i] == pytest.approx(fd, rel=1e-4, abs=1e-4)


def small_cfg(**kw):
    return FitConfig(**{"n": 4, "m_factor": 4, **kw})


def test_best_image_contract():
    ev = make_event(3, 0)
    seed = peel(ev.target, ev.muon).hypothesis()
    cfg = small_cfg()
    res = fit_best_image(ev.target, seed, ev.muon, cfg)
    assert res.best_loss == min(res.per_run_losses)
    assert len(res.per_run_losses) == 4
    assert all(a >= b for a, b in zip(res.loss_history, res.loss_history[1:]))
    assert res.best_loss == res.loss_history[-1]
    start = loss_and_gradient(seed, ev.muon, ev.target, "mse", "sample", run_seeds(cfg, 4)[res.best_run])[0]
    assert res.best_loss <= start


def test_best_image_order_free_and_min_monotone():
    ev = make_event(3, 1)
    seed = peel(ev.target, ev.muon).hypothesis()
    cfg = small_cfg(m_factor=2)
    zs = run_seeds(cfg, 4)
    a = fit_best_image(ev.target, seed, ev.muon, cfg, noise_seeds=zs)
    b = fit_best_image(ev.target, seed, ev.muon, cfg, noise_seeds=zs[::-1])
    assert a.best_loss == b.best_loss
    assert a.hypothesis.to_dict() == b.hypothesis.to_dict()
    sub = fit_best_image(ev.target, seed, ev.muon, cfg, noise_seeds=zs[1:3])
    assert sub.per_run_losses == a.per_run_losses[1:3]
    assert a.best_loss <= sub.best_loss


def test_likelihood_closure():
    ev = make_event(4, 0)
    truth_loss = loss_and_gradient(ev.truth, ev.muon, ev.target, "neg2ll")[0]
    assert truth_loss <= 2e-9 * 343
    seed = peel(ev.target, ev.muon).hypothesis()
    seed_loss = loss_and_gradient(seed, ev.muon, ev.target, "neg2ll")[0]
    res = fit_likelihood(ev.target, seed, ev.muon, FitConfig(), expectation=True)
    assert res.best_loss <= seed_loss
    assert all(a >= b for a, b in zip(res.loss_history, res.loss_history[1:]))
    assert res.best_loss == min(res.loss_history)
    assert res.iterations == 50 * len(seed.particles)


def test_likelihood_sampled_templates():
    ev = make_event(4, 1)
    seed = peel(ev.target, ev.muon).hypothesis()
    res = fit_likelihood(ev.target, seed, ev.muon, FitConfig(n=5, m_factor=3, seed=9))
    again = fit_likelihood(ev.target, seed, ev.muon, FitConfig(n=5, m_factor=3, seed=9))
    assert res.best_loss == again.best_loss
    assert all(a >= b for a, b in zip(res.loss_history, res.loss_history[1:]))


def test_template_is_mean_of_draws():
    ev = make_event(4, 2)
    fm = ForwardModel(ev.muon)
    pe = generate(ev.truth, ev.muon).pe
    keys = [11, 12, 13]
    manual = sum(fm.sample(pe, z) for z in keys) / 3.0
    assert np.allclose(fm.template(pe, keys), manual, rtol=1e-14, atol=1e-12)


def test_seeding_beats_adversarial_start():
    ev = make_event(6, 3, n_protons=2)
    seed = peel(ev.target, ev.muon).hypothesis()
    flipped = DecompositionHypothesis(seed.vertex + 12.0, [
        ParticleKinematics(p.ptype, 6.0, 180.0 - p.theta, (p.phi + 180.0) % 360.0, p.start)
        for p in seed.particles])
    good = fit_likelihood(ev.target, seed, ev.muon, FitConfig(), expectation=True)
    bad = fit_likelihood(ev.target, flipped, ev.muon, FitConfig(), expectation=True)
    assert good.best_loss < 0.01 * bad.best_loss


# ---------------------------------------------------------------- profiles

def test_quadratic_interval():
    grid = np.linspace(-3, 7, 11)
    a, s = 2.0, 1.5
    lo, hi, olo, ohi = interval_from_curve(grid, ((grid - a) / s) ** 2)
    # linear interpolation of a parabola is conservative by at most the grid curvature
    assert lo == pytest.approx(a - s, abs=0.1) and hi == pytest.approx(a + s, abs=0.1)
    assert not olo and not ohi


def test_open_interval_flag():
    grid = np.linspace(0, 1, 5)
    lo, hi, olo, ohi = interval_from_curve(grid, 0.1 * grid)
    assert olo and ohi and lo == 0.0 and hi == 1.0


def test_linear_gaussian_profile():
    mu = np.array([1.0, -2.0])
    cov = np.array([[4.0, 2.4], [2.4, 9.0]])
    prec = np.linalg.inv(cov)

    def fg(x):
        d = x - mu
        return float(d @ prec @ d), 2.0 * prec @ d

    grid = mu[0] + np.linspace(-4, 4, 17)
    values, lo, hi, olo, ohi, best = profile_interval(fg, mu, 0, grid)
    sigma = math.sqrt(cov[0, 0])
    assert (hi - lo) / 2 == pytest.approx(sigma, rel=0.02)
    assert values[8] == pytest.approx(best, abs=1e-12)


def test_profile_passes_through_minimum():
    ev = make_event(4, 3)
    grid = ev.truth.particles[0].ke + np.linspace(-1.0, 1.0, 5)
    pr = profile_parameter(ev.target, ev.truth, ev.muon, "ke0", grid)
    assert pr.values[2] == pytest.approx(pr.best, abs=1e-6)
    assert pr.contains(ev.truth.particles[0].ke)
    assert pr.lo < pr.theta_star < pr.hi
    with pytest.raises(ValueError):
        profile_parameter(ev.target, ev.truth, ev.muon, "mass0", grid)
