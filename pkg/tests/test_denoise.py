import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amp_lab.denoise import (
    Denoiser,
    NumericError,
    ParameterError,
    apply_denoiser,
    bayes_denoiser_for,
    bg_cond_mean,
    bg_cond_mean_deriv,
    point_mass_cond_mean,
    point_mass_cond_mean_deriv,
    soft_threshold,
    soft_threshold_deriv,
    tanh_denoiser,
    tanh_denoiser_deriv,
    to_general_functions,
)
from amp_lab.model import SignalPrior

from oracles import MP_BG_POSTERIOR_MEAN, bg_posterior_mean

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("s,theta,expected", [(2.0, 0.5, 1.5), (0.3, 0.5, 0.0), (-2.0, 0.5, -1.5)])
def test_soft_threshold_branches(s, theta, expected):
    assert soft_threshold(s, theta) == expected


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ParameterError):
        soft_threshold(1.0, -0.1)


def test_soft_threshold_derivative_values():
    s = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    assert soft_threshold_deriv(s, 0.5).tolist() == [1.0, 0.0, 0.0, 0.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(0, 10))
def test_soft_threshold_is_one_lipschitz(a, b, theta):
    assert abs(soft_threshold(a, theta) - soft_threshold(b, theta)) <= abs(a - b) + 1e-12


@settings(max_examples=200, deadline=None)
@given(finite, st.floats(0, 10))
def test_soft_threshold_odd_and_shrinks(s, theta):
    out = soft_threshold(s, theta)
    assert soft_threshold(-s, theta) == -out
    assert abs(out) <= abs(s)


def test_tanh_examples():
    assert tanh_denoiser(0.0, 3.0) == 0.0
    assert tanh_denoiser(1e6, 1.0) == 1.0
    assert tanh_denoiser(1.0, 1.0) == pytest.approx(0.7615941559557649, abs=1e-15)
    with pytest.raises(ParameterError):
        tanh_denoiser(1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(0.05, 5))
def test_tanh_derivative_matches_finite_difference(s, tau_sq):
    h = 1e-6
    fd = (tanh_denoiser(s + h, tau_sq) - tanh_denoiser(s - h, tau_sq)) / (2 * h)
    assert tanh_denoiser_deriv(s, tau_sq) == pytest.approx(fd, abs=1e-6)


def test_bg_cond_mean_examples():
    assert bg_cond_mean(0.0, 0.7, 0.3, 2.0) == 0.0
    assert bg_cond_mean(2.0, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert bg_cond_mean(1.5, 0.5, 0.1, 1.0) == pytest.approx(MP_BG_POSTERIOR_MEAN, abs=1e-8)


def test_bg_cond_mean_matches_posterior_integration():
    rng = np.random.default_rng(7)
    for _ in range(100):
        s, tau_sq = rng.uniform(-6, 6), rng.uniform(0.05, 3)
        xi, v = rng.uniform(0.02, 0.98), rng.uniform(0.1, 4)
        assert float(bg_cond_mean(s, tau_sq, xi, v)) == pytest.approx(
            bg_posterior_mean(s, tau_sq, xi, v), abs=1e-8)


def test_bg_cond_mean_extreme_inputs_are_finite():
    s = np.array([-1e4, -40.0, 40.0, 1e4])
    out = bg_cond_mean(s, 1e-3, 0.01, 1.0)
    assert np.all(np.isfinite(out))
    assert np.all(np.isfinite(bg_cond_mean_deriv(s, 1e-3, 0.01, 1.0)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-8, 8), st.floats(0.1, 3), st.floats(0.05, 0.95))
def test_bg_derivative_matches_finite_difference(s, tau_sq, xi):
    h = 1e-5
    fd = (bg_cond_mean(s + h, tau_sq, xi, 1.0) - bg_cond_mean(s - h, tau_sq, xi, 1.0)) / (2 * h)
    assert bg_cond_mean_deriv(s, tau_sq, xi, 1.0) == pytest.approx(fd, abs=1e-5)


def test_point_mass_posterior_reduces_to_tanh():
    s = np.linspace(-4, 4, 41)
    pm = point_mass_cond_mean(s, 0.8, (-1.0, 1.0), (0.5, 0.5))
    assert np.allclose(pm, tanh_denoiser(s, 0.8), atol=1e-14)
    pmd = point_mass_cond_mean_deriv(s, 0.8, (-1.0, 1.0), (0.5, 0.5))
    assert np.allclose(pmd, tanh_denoiser_deriv(s, 0.8), atol=1e-12)


def test_point_mass_posterior_far_tail():
    out = point_mass_cond_mean(np.array([-500.0, 500.0]), 0.01, (-2.0, 0.0, 2.0), (0.2, 0.6, 0.2))
    assert out.tolist() == [-2.0, 2.0]


def test_apply_denoiser_examples():
    v = np.array([2.0, -0.5, 0.1, -3.0])
    out, md = apply_denoiser(Denoiser("zero"), v, 1.0, 2)
    assert out.tolist() == [0.0] * 4 and md == 0.0
    out, md = apply_denoiser(Denoiser("identity"), v, 1.0, 2)
    assert out.tolist() == v.tolist() and md == 2.0
    out, md = apply_denoiser(Denoiser.soft(1.0), v, 1.0, 2)
    assert out.tolist() == [1.0, 0.0, 0.0, -2.0] and md == 1.0


def test_apply_denoiser_rejects_non_finite():
    with pytest.raises(NumericError):
        apply_denoiser(Denoiser.soft(1.0), np.array([1.0, np.nan]), 1.0, 2)


def test_general_functions():
    gf = to_general_functions(Denoiser.soft(1.0), [1.0, 0.25])
    assert gf.g(3.0, 1.0) == 2.0
    assert gf.g_prime(3.0, 1.0) == 1.0
    beta0 = np.array([1.0, -2.0, 0.0])
    assert gf.f(0, np.zeros(3), beta0).tolist() == [-1.0, 2.0, -0.0]
    a = np.array([0.5, 0.5, 0.5])
    # f_1(a, b) = eta_0(b - a) - b with threshold 1
    assert gf.f(1, a, beta0).tolist() == [-1.0, 0.5, 0.0]
    assert gf.f_prime(1, a, beta0).tolist() == [-0.0, -1.0, -0.0]


@pytest.mark.parametrize("prior,family", [
    (SignalPrior.rademacher(), "tanh_bayes"),
    (SignalPrior.bernoulli_gaussian(0.1, 1.0), "bg_bayes"),
    (SignalPrior.point_mass({-1.0: 0.5, 1.0: 0.5}), "point_mass_bayes"),
])
def test_bayes_denoiser_for(prior, family):
    d = bayes_denoiser_for(prior)
    assert d.family == family and d.is_bayes


def test_bayes_denoiser_for_gaussian_unsupported():
    with pytest.raises(ParameterError):
        bayes_denoiser_for(SignalPrior.gaussian(1.0))


@pytest.mark.parametrize("d", [
    Denoiser.soft(1.5), Denoiser("tanh_bayes"), Denoiser("identity"), Denoiser("zero"),
    Denoiser("bg_bayes", sparsity=0.2, variance=1.0),
    Denoiser("point_mass_bayes", atoms=((-1.0, 0.25), (0.0, 0.5), (1.0, 0.25))),
])
def test_lipschitz_constant_bounds_slope(d):
    s = np.linspace(-10, 10, 20001)
    slopes = np.abs(np.diff(d.eta(s, 0.5))) / np.diff(s)
    assert slopes.max() <= d.lipschitz(0.5) * (1 + 1e-6) + 1e-12
    assert Denoiser.from_dict(d.to_dict()) == d


def test_denoiser_validation():
    with pytest.raises(ParameterError):
        Denoiser("soft_threshold")
    with pytest.raises(ParameterError):
        Denoiser("median")
    with pytest.raises(ParameterError):
        Denoiser.from_dict({"family": "tanh_bayes", "alpha": 1.0})
    assert Denoiser.soft(1.5).kinks(4.0) == (-3.0, 3.0)
    assert Denoiser.soft(1.5).breakpoints(4.0) == (-3.0, 3.0)
    assert Denoiser("bg_bayes", sparsity=0.1, variance=1.0).breakpoints(0.5) == ()


def test_breakpoints_straddle_steep_transitions():
    tanh = Denoiser("tanh_bayes").breakpoints(0.04)
    assert len(tanh) == 7 and 0.0 in tanh and max(tanh) == pytest.approx(8 * 0.04)
    atoms = ((-1.0, 0.2), (0.0, 0.6), (2.0, 0.2))
    pm = Denoiser("point_mass_bayes", atoms=atoms)
    tau_sq = 0.05
    centres = pm.breakpoints(tau_sq)[3::7]
    values, probs = zip(*atoms)
    for c, (lo, hi) in zip(centres, [(0, 1), (1, 2)]):
        # neighbouring atoms are equally likely a posteriori at each centre
        logpost = np.log(probs) - (c - np.array(values)) ** 2 / (2 * tau_sq)
        assert logpost[lo] == pytest.approx(logpost[hi], abs=1e-12)
