import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln

from odflow.evaluation import stationary_params
from odflow.model import (LatentState, ModelParams, emission_logpdf, emission_sd,
                          lambda_transition_logpdf, phi_prior_logpdf, sample_truncnorm_positive,
                          simulate, synthetic_schedule, truncnorm_mean)
from odflow.network import Topology, aggregate, build_topology

from oracles import lognormal_segment_logpdf, unimodal_on_grid


def test_transition_zero_residual():
    lam_prev = np.array([2.0, 0.5])
    th1 = np.array([0.1, -0.3])
    th2 = np.array([0.4, 0.9])
    lam = lam_prev ** 0.8 * np.exp(th1)
    expect = -0.5 * np.sum(np.log(2 * np.pi * th2)) - np.sum(np.log(lam))
    assert lambda_transition_logpdf(lam, lam_prev, th1, th2, 0.8) == pytest.approx(expect, abs=1e-12)


def test_transition_scalar_plugin():
    v = lambda_transition_logpdf(np.array([np.exp(0.9)]), np.array([np.e]), 0.0, 1.0, 0.9)
    assert v == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.9, abs=1e-12)


def test_transition_integrates_to_one():
    f = lambda l: np.exp(lambda_transition_logpdf(np.array([l]), np.array([1.7]), 0.2, 0.3, 0.9))  # noqa: E731
    total = integrate.quad(f, 0, np.inf, limit=200)[0]
    assert total == pytest.approx(1.0, abs=0.01)


def test_emission_table_value():
    v = emission_logpdf(np.array([1.0]), np.array([1.0]), np.log(2.0), 2.0)
    assert stats.norm.cdf(1.0) == pytest.approx(0.841345, abs=1e-6)
    assert v == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(stats.norm.cdf(1.0)), abs=1e-12)


def test_emission_concentrates_as_phi_vanishes():
    vals = [emission_logpdf(np.array([2.0]), np.array([2.0]), phi, 2.0) for phi in (1e-2, 1e-4, 1e-8)]
    assert vals[0] < vals[1] < vals[2]
    sd = emission_sd(2.0, 1e-8, 2.0)
    assert vals[2] == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(sd), rel=1e-9)


def test_emission_integrates_to_one():
    for lam, phi in ((0.3, 2.0), (1.0, 0.1), (5.0, 0.7)):
        f = lambda x: np.exp(emission_logpdf(np.array([x]), np.array([lam]), phi, 2.0))  # noqa: E731
        sd = float(emission_sd(lam, phi, 2.0))
        total = integrate.quad(f, 0, lam + 40 * sd, points=[lam], limit=200)[0]
        assert total == pytest.approx(1.0, abs=1e-6)


def test_emission_truncation_negligible_far_from_zero():
    lam, phi = 10.0, np.log1p(1 / 81.0)  # lam / sd = 9
    sd = float(emission_sd(lam, phi, 2.0))
    assert lam / sd > 8
    exact = emission_logpdf(np.array([9.0]), np.array([lam]), phi, 2.0)
    untrunc = stats.norm(lam, sd).logpdf(9.0)
    assert abs(exact - untrunc) < 1e-15


def test_emission_per_particle_phi():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    lam = np.array([[1.5, 1.5], [1.5, 1.5]])
    v = emission_logpdf(x, lam, np.array([0.2, 0.5]), 2.0)
    assert v[0] == pytest.approx(emission_logpdf(x[0], lam[0], 0.2, 2.0))
    assert v[1] == pytest.approx(emission_logpdf(x[1], lam[1], 0.5, 2.0))


def test_variance_ratio_lognormal_analogy():
    lam, phi = 3.0, 0.4
    assert float(emission_sd(lam, phi, 2.0)) ** 2 / lam ** 2 == pytest.approx(np.expm1(phi))


def test_phi_prior_mean_by_sampling():
    rng = np.random.default_rng(0)
    alpha, beta = 2.0, 0.3
    draws = rng.gamma(alpha, beta / alpha, 10 ** 6)
    assert abs(draws.mean() - beta) < 3 * draws.std() / 1e3
    # the density used for inference is the one sampled from
    assert phi_prior_logpdf(0.25, alpha, beta) == pytest.approx(
        stats.gamma(alpha, scale=beta / alpha).logpdf(0.25))


def test_phi_prior_exponential_case():
    assert phi_prior_logpdf(0.7, 1.0, 2.0) == pytest.approx(stats.expon(scale=2.0).logpdf(0.7))


def test_phi_prior_mode_closed_form():
    beta = 0.6
    mode = beta / 2  # (alpha - 1) beta / alpha with alpha = 2
    scale = beta / 2
    expect = np.log(mode) - mode / scale - gammaln(2.0) - 2 * np.log(scale)
    assert phi_prior_logpdf(mode, 2.0, beta) == pytest.approx(expect, abs=1e-12)


def test_truncnorm_mean_matches_scipy():
    for m, s in ((1.0, 1.0), (-3.0, 1.0), (0.2, 5.0)):
        ref = stats.truncnorm(-m / s, np.inf, loc=m, scale=s).mean()
        assert truncnorm_mean(m, s) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("mean,sd", [(1.0, 1.0), (-2.0, 1.0), (-8.0, 1.0), (-30.0, 2.0)])
def test_truncnorm_sampler_distribution(mean, sd):
    # the last two cases take the exponential tail branch
    rng = np.random.default_rng(1)
    z = sample_truncnorm_positive(np.full(20_000, mean), sd, rng)
    assert np.all(z > 0)
    ref = stats.truncnorm(-mean / sd, np.inf, loc=mean, scale=sd)
    assert stats.kstest(z, ref.cdf).pvalue > 0.01


def test_truncnorm_sampler_mean_on_1e5_draws():
    rng = np.random.default_rng(2)
    lam, phi = 0.8, 1.2
    sd = float(emission_sd(lam, phi, 2.0))
    z = sample_truncnorm_positive(np.full(10 ** 5, lam), sd, rng)
    assert abs(z.mean() - truncnorm_mean(lam, sd)) < 3 * z.std() / np.sqrt(z.size)


def test_simulate_aggregates_exactly_and_is_reproducible():
    A = build_topology(Topology("star", k=3))
    sched = synthetic_schedule(9, 50, seed=4)
    a = simulate(A, sched, stationary_params(sched), 50, seed=9)
    b = simulate(A, sched, stationary_params(sched), 50, seed=9)
    np.testing.assert_array_equal(a.x.values, b.x.values)
    np.testing.assert_array_equal(aggregate(a.x, A).values, a.y.values)
    for t in range(50):
        LatentState(a.lam[t], float(a.phi[t]), a.x.values[t])


def test_simulate_schedule_too_short():
    A = build_topology(Topology("chain3"))
    with pytest.raises(ValueError):
        simulate(A, synthetic_schedule(6, 10, 0), ModelParams(), 11, 0)


def test_large_theta2_gives_spikes():
    A = build_topology(Topology("star", k=3))
    spiky = 0
    for r in range(30):
        sched = synthetic_schedule(9, 300, seed=r, lambda_cv=2.0)
        x = simulate(A, sched, stationary_params(sched), 300, seed=1000 + r).x.values
        spiky += (x.max(0) / np.median(x, 0)).max() > 5
    assert spiky >= 25


def test_synthetic_schedule_stationary_level():
    s = synthetic_schedule(4, 10, seed=0, level_range=(1.0, 1.0), lambda_cv=0.5, rho=0.9)
    mu = s.theta1[0] / 0.1
    var = s.theta2[0] / (1 - 0.81)
    np.testing.assert_allclose(np.exp(mu + var / 2), 1.0)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(rho_model=1.0)
    with pytest.raises(ValueError):
        ModelParams(lambda0_mean=np.array([1.0, 0.0]))


def _lognormal_premise_draw(rng):
    """Prior whose log-concave region covers the whole segment ``x1 + x2 = y``.

    ``log f`` of a log-normal coordinate is concave for ``x <= exp(mu + 1 - s**2)``.
    """
    y = float(np.exp(rng.uniform(0.0, np.log(100.0))))
    s = rng.uniform(0.1, 1.0, 2)
    mu = np.log(y) - 1 + s ** 2 + rng.uniform(0.0, 2.0, 2)
    return y, mu, s


def test_segment_restriction_unimodal_under_premise():
    rng = np.random.default_rng(20110611)
    for _ in range(50):
        y, mu, s = _lognormal_premise_draw(rng)
        _, g = lognormal_segment_logpdf(y, mu, s)
        assert unimodal_on_grid(g, tol=1e-9)


def test_diffuse_product_lognormal_can_be_bimodal():
    # without quasiconcavity the restriction can have two separated modes
    _, g = lognormal_segment_logpdf(10.0, np.array([0.0, 0.0]), np.array([3.0, 3.0]))
    assert not unimodal_on_grid(g)
    _, g = lognormal_segment_logpdf(100.0, np.array([0.0, 0.0]), np.array([0.4, 0.4]))
    assert not unimodal_on_grid(g)


def test_grid_check_detects_valley():
    u = np.linspace(0, 1, 1000)
    assert unimodal_on_grid(-(u - 0.3) ** 2)
    assert not unimodal_on_grid(np.cos(4 * np.pi * u))
