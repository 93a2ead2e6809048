import io
import math

import numpy as np
import pytest

from amp_lab.denoise import Denoiser, NumericError, ParameterError
from amp_lab.model import NoiseSpec, PriorError, SignalPrior
from amp_lab.se import (
    TRACE_COLUMNS,
    SingularityError,
    StoppingCriterion,
    check_stopping,
    covariance_tables,
    gh_expect,
    limit_scalars,
    projection_constants,
    pure_process_coefficients,
    run_state_evolution,
    se_init,
    se_step,
    write_trace_csv,
)

from conftest import (
    DEFAULT_DELTA,
    DEFAULT_DENOISER,
    DEFAULT_NOISE,
    DEFAULT_PRIOR,
)
from oracles import (
    MC_TANH_SIGMA1_SE,
    MC_TANH_SIGMA1_SQ,
    MP_DEFAULT_LAMBDA1,
    MP_DEFAULT_SIGMA1_SQ,
    MP_DEFAULT_SIGMA2_SQ,
    MP_TANH_SIGMA1_SQ,
    MP_TANH_STEEP_SIGMA6_SQ,
)


# -- quadrature ---------------------------------------------------------------

def test_gh_expect_basic_moments():
    assert gh_expect(lambda z: z * z) == pytest.approx(1.0, abs=1e-12)
    assert gh_expect(lambda z1, z2: z1 * z2, rho=0.3) == pytest.approx(0.3, abs=1e-10)
    assert abs(gh_expect(np.tanh)) < 1e-12


def test_gh_expect_rejects_bad_correlation():
    with pytest.raises(ParameterError):
        gh_expect(lambda z1, z2: z1 * z2, rho=1.2)


@pytest.mark.parametrize("rho", [-1.0, 1.0])
def test_gh_expect_degenerate_correlation(rho):
    assert gh_expect(lambda z1, z2: z1 * z2, rho=rho) == pytest.approx(rho, abs=1e-12)


def test_gh_expect_with_marginal():
    # E[(X + Z)^2] = E[X^2] + 1
    prior = SignalPrior.point_mass({-2.0: 0.5, 2.0: 0.5})
    assert gh_expect(lambda z, x: (x + z) ** 2, prior) == pytest.approx(5.0, abs=1e-12)
    noise = NoiseSpec("uniform", 0.3)
    assert gh_expect(lambda z, w: w * w + 0.0 * z, noise) == pytest.approx(0.3, abs=1e-12)


def test_gh_expect_kinked_integrand():
    # E|Z| = sqrt(2/pi), kink at 0
    val = gh_expect(np.abs, kinks=lambda x: np.zeros(1) if x is None else np.zeros(np.shape(x) + (1,)))
    assert val == pytest.approx(math.sqrt(2 / math.pi), abs=1e-12)


def test_gh_expect_bivariate_kinked():
    # E[max(Z1, 0) max(Z2, 0)] for corr rho has a closed form
    rho = 0.4
    kink = lambda x: np.zeros(1) if x is None else np.zeros(np.shape(x) + (1,))
    val = gh_expect(lambda z1, z2: np.maximum(z1, 0) * np.maximum(z2, 0), rho=rho,
                    kinks=(kink, kink))
    exact = (rho * (math.pi - math.acos(rho)) + math.sqrt(1 - rho ** 2)) / (2 * math.pi)
    assert val == pytest.approx(exact, abs=1e-9)


# -- scalar recursion -----------------------------------------------------------

def test_se_init_examples():
    assert se_init(SignalPrior.rademacher(), 0.5) == 2.0
    assert se_init(SignalPrior.bernoulli_gaussian(0.1, 1.0), 0.2) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(PriorError):
        se_init(SignalPrior.gaussian(0.0), 0.5)


def test_se_step_identity_and_zero():
    prior = DEFAULT_PRIOR
    s, t = se_step(prior, 0.01, 0.5, Denoiser("identity"), 0.3)
    assert s == pytest.approx(0.6, rel=1e-12) and t == pytest.approx(0.61, rel=1e-12)
    s, _ = se_step(prior, 0.01, 0.5, Denoiser("zero"), 0.3)
    assert s == pytest.approx(se_init(prior, 0.5), rel=1e-12)


def test_se_step_tanh_monte_carlo_oracle():
    s, t = se_step(SignalPrior.rademacher(), 0.2, 0.5, Denoiser("tanh_bayes"), 2.2)
    assert abs(s - MC_TANH_SIGMA1_SQ) < 3 * MC_TANH_SIGMA1_SE
    assert s == pytest.approx(MP_TANH_SIGMA1_SQ, abs=1e-10)
    assert t == pytest.approx(s + 0.2, abs=1e-15)


def test_steep_tanh_trace_matches_high_precision_oracle():
    # small tau makes the posterior mean nearly a step; breakpoints keep quadrature exact
    trace = run_state_evolution(SignalPrior.rademacher(), NoiseSpec("gaussian", 0.1), 1.0,
                                Denoiser("tanh_bayes"), t_max=6, compute_tables=False)
    assert trace.sigma_sq[6] == pytest.approx(MP_TANH_STEEP_SIGMA6_SQ, abs=1e-13)


def test_default_trace_matches_high_precision_oracle(default_trace):
    assert default_trace.sigma_sq[0] == pytest.approx(0.2, rel=1e-15)
    assert default_trace.tau_sq[0] == pytest.approx(0.21, rel=1e-15)
    assert default_trace.sigma_sq[1] == pytest.approx(MP_DEFAULT_SIGMA1_SQ, abs=1e-9)
    assert default_trace.lambda_hat[1] == pytest.approx(MP_DEFAULT_LAMBDA1, abs=1e-9)
    # the oracle's second step starts from its own sigma_1^2
    s2, _ = se_step(DEFAULT_PRIOR, 0.01, 0.5, DEFAULT_DENOISER, MP_DEFAULT_SIGMA1_SQ + 0.01)
    assert s2 == pytest.approx(MP_DEFAULT_SIGMA2_SQ, abs=1e-9)


def test_se_step_quadrature_order_escalation_agrees():
    lo = se_step(DEFAULT_PRIOR, 0.01, 0.5, DEFAULT_DENOISER, 0.21, order=61)
    hi = se_step(DEFAULT_PRIOR, 0.01, 0.5, DEFAULT_DENOISER, 0.21, order=121)
    assert lo[0] == pytest.approx(hi[0], abs=1e-10)


def test_lambda_hat_soft_threshold_monte_carlo():
    trace = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, DEFAULT_DELTA, DEFAULT_DENOISER,
                                t_max=2, compute_tables=False)
    rng = np.random.default_rng(3)
    beta = rng.standard_normal(10**6) * (rng.random(10**6) < 0.1)
    tau = math.sqrt(trace.tau_sq[1])
    p = np.mean(np.abs(beta + tau * rng.standard_normal(10**6)) > 1.5 * tau)
    se = math.sqrt(p * (1 - p) / 10**6) / DEFAULT_DELTA
    assert abs(trace.lambda_hat[2] + p / DEFAULT_DELTA) < 4 * se


def test_limit_scalars(default_trace):
    assert limit_scalars(default_trace, DEFAULT_PRIOR, DEFAULT_DENOISER, 0) == (0.0, 1.0)
    lam, xi = limit_scalars(default_trace, DEFAULT_PRIOR, DEFAULT_DENOISER, 3)
    assert lam == default_trace.lambda_hat[3] and xi == 1.0
    ident = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, Denoiser("identity"),
                                t_max=3, compute_tables=False)
    assert ident.lambda_hat[1:] == pytest.approx([-2.0] * 3, abs=1e-12)
    assert ident.xi_hat == [1.0] * 4


# -- stopping -------------------------------------------------------------------

def test_check_stopping_examples():
    bayes = StoppingCriterion.bayes(1e-3, 0.05)
    assert check_stopping([1.0, 5e-4], bayes).reason == "small_error"
    assert check_stopping([1.0, 0.99], bayes).reason == "stalled"
    assert not check_stopping([1.0, 0.5], bayes).stop
    general = StoppingCriterion.general(1e-3, 1e-4, 1e-4)
    assert check_stopping([1.0, 0.5], general, 1e-5, 1.0).reason == "sigma_perp_floor"
    assert check_stopping([1.0, 0.5], general, 1.0, 1e-5).reason == "tau_perp_floor"
    assert not check_stopping([1.0, 0.5], general, 1.0, 1.0).stop
    with pytest.raises(ValueError):
        check_stopping([1.0], bayes)


def test_stopping_validation():
    with pytest.raises(ParameterError):
        StoppingCriterion.bayes(1e-3, 1.5)
    with pytest.raises(ParameterError):
        StoppingCriterion.general(1e-3, 0.0, 1e-3)
    c = StoppingCriterion.general(1e-3, 1e-4, 1e-5)
    assert StoppingCriterion.from_dict(c.to_dict()) == c


def test_zero_denoiser_stops_at_one():
    trace = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, Denoiser("zero"),
                                stopping=StoppingCriterion.bayes(1e-6, 0.1), compute_tables=False)
    assert trace.T_star == 1 and trace.stop_reason == "stalled"
    assert trace.sigma_sq[0] == pytest.approx(trace.sigma_sq[1], rel=1e-12)


def test_large_eps0_stops_at_one():
    trace = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, DEFAULT_DENOISER,
                                stopping=StoppingCriterion.bayes(1.0, 0.01), compute_tables=False)
    assert (trace.T_star, trace.stop_reason) == (1, "small_error")


def test_general_stopping_on_perpendicular_floor(default_trace):
    trace = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, DEFAULT_DENOISER,
                                stopping=StoppingCriterion.general(1e-6, 1e-3, 1e-6))
    # first t with sigma_perp^2 below 1e-3 in the reference trace
    expected = next(t for t in range(1, 10) if default_trace.sigma_perp_sq[t] < 1e-3)
    assert trace.T_star == expected and trace.stop_reason == "sigma_perp_floor"


def test_bayes_trace_non_increasing(bayes_trace):
    assert np.all(np.diff(bayes_trace.sigma_sq) <= 1e-12)
    bg = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5,
                             Denoiser("bg_bayes", sparsity=0.1, variance=1.0),
                             t_max=8, compute_tables=False)
    assert np.all(np.diff(bg.sigma_sq) <= 1e-12)


def test_trace_csv_schema(default_trace):
    buf = io.StringIO()
    write_trace_csv(default_trace, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == TRACE_COLUMNS
    assert len(lines) == len(default_trace.sigma_sq) + 1
    assert lines[-1].endswith("t_max")


def test_t_max_must_be_positive():
    with pytest.raises(ValueError):
        run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, DEFAULT_DENOISER, t_max=0)


# -- covariance tables ----------------------------------------------------------

def test_table_diagonals(default_trace):
    tab = default_trace.tables
    assert np.allclose(np.diag(tab.E_tilde), default_trace.sigma_sq, atol=1e-9, rtol=0)
    assert np.allclose(np.diag(tab.E_breve), default_trace.tau_sq, atol=1e-9, rtol=0)


def test_breve_is_tilde_plus_noise(default_trace):
    tab = default_trace.tables
    assert np.allclose(tab.E_breve, tab.E_tilde + DEFAULT_NOISE.variance, atol=1e-9, rtol=0)


def test_tables_symmetric_psd(default_trace):
    for E in (default_trace.tables.E_tilde, default_trace.tables.E_breve):
        assert np.array_equal(E, E.T)
        assert np.linalg.eigvalsh(E).min() > 0


def test_bayes_tables_structure(bayes_trace):
    tab, s = bayes_trace.tables, bayes_trace.sigma_sq
    for t in range(1, 7):
        for r in range(t):
            assert tab.E_tilde[r, t] == pytest.approx(s[t], abs=1e-6)
        g = tab.gamma_hat[t]
        expected = np.zeros(t)
        expected[-1] = s[t] / s[t - 1]
        assert np.allclose(g, expected, atol=1e-6, rtol=0)
        assert tab.sigma_perp_sq[t] == pytest.approx(s[t] * (1 - s[t] / s[t - 1]), abs=1e-6)


def test_tables_match_monte_carlo_joint_moment(default_trace):
    # E_tilde[1, 2] = E[f_1 f_2] / delta with the engine's correlation
    tsq = default_trace.tau_sq
    rho = default_trace.tables.E_breve[0, 1] / math.sqrt(tsq[0] * tsq[1])
    rng = np.random.default_rng(11)
    M = 10**6
    beta = rng.standard_normal(M) * (rng.random(M) < 0.1)
    z1 = rng.standard_normal(M)
    z2 = rho * z1 + math.sqrt(1 - rho * rho) * rng.standard_normal(M)
    f1 = DEFAULT_DENOISER.eta(beta + math.sqrt(tsq[0]) * z1, tsq[0]) - beta
    f2 = DEFAULT_DENOISER.eta(beta + math.sqrt(tsq[1]) * z2, tsq[1]) - beta
    vals = f1 * f2 / DEFAULT_DELTA
    assert abs(vals.mean() - default_trace.tables.E_tilde[1, 2]) < 4 * vals.std() / math.sqrt(M)


def test_covariance_tables_rebuild(default_trace):
    tab = covariance_tables(default_trace, DEFAULT_PRIOR, DEFAULT_NOISE, DEFAULT_DENOISER, 4)
    assert tab.T == 4
    assert np.allclose(tab.E_tilde, default_trace.tables.E_tilde[:5, :5], atol=1e-14, rtol=0)
    with pytest.raises(ValueError):
        covariance_tables(default_trace, DEFAULT_PRIOR, DEFAULT_NOISE, DEFAULT_DENOISER, 50)


def test_projection_constants(default_trace):
    tab = default_trace.tables
    g, a, sp, tp = projection_constants(tab, 1)
    assert g[0] == pytest.approx(tab.E_tilde[0, 1] / tab.E_tilde[0, 0], rel=1e-12)
    assert a[0] == pytest.approx(tab.E_breve[0, 1] / tab.E_breve[0, 0], rel=1e-12)
    for t in range(1, tab.T + 1):
        g, a, sp, tp = projection_constants(tab, t)
        assert np.allclose(g, tab.gamma_hat[t], rtol=1e-10, atol=1e-14)
        assert sp == pytest.approx(default_trace.sigma_perp_sq[t], rel=1e-8)
        assert 0 < sp <= default_trace.sigma_sq[t] and 0 < tp <= default_trace.tau_sq[t]


def test_singular_table_detected():
    # identity denoiser with no noise: every f_t is a multiple of the same vector
    tab_trace = run_state_evolution(SignalPrior.rademacher(), NoiseSpec("gaussian", 0.0), 1.0,
                                    Denoiser("zero"), t_max=3, compute_tables=False)
    with pytest.raises(SingularityError):
        covariance_tables(tab_trace, SignalPrior.rademacher(), NoiseSpec("gaussian", 0.0),
                          Denoiser("zero"), 2)


def test_nan_perpendicular_without_tables():
    trace = run_state_evolution(DEFAULT_PRIOR, DEFAULT_NOISE, 0.5, DEFAULT_DENOISER, t_max=2,
                                compute_tables=False)
    assert all(math.isnan(v) for v in trace.sigma_perp_sq)
    assert trace.tables is None


def test_pure_process_coefficients(default_trace):
    tab = default_trace.tables
    T = tab.T
    coef = pure_process_coefficients(tab.gamma_hat, tab.alpha_hat, T)
    assert coef.c[0].tolist() == [1.0]
    assert coef.c[1][0] == pytest.approx(tab.gamma_hat[1][0], rel=1e-15)
    for k in range(T + 1):
        recon_s = np.sum(tab.sigma_perp_sq[: k + 1] * coef.c[k] ** 2)
        recon_t = np.sum(tab.tau_perp_sq[: k + 1] * coef.d[k] ** 2)
        assert recon_s == pytest.approx(default_trace.sigma_sq[k], abs=1e-8)
        assert recon_t == pytest.approx(default_trace.tau_sq[k], abs=1e-8)


def test_quadrature_non_finite_raises():
    with pytest.raises(NumericError):
        gh_expect(lambda z: np.where(z > 0, np.inf, 0.0))

