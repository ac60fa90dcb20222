import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from epr.dy import (
    DyFamily,
    DyKind,
    DyParams,
    dy_log_density,
    dy_mean_variance,
    dy_posterior_update,
    dy_sample,
    psi,
)
from epr.errors import InvalidParamsError, MomentsUndefinedError

G, LG, LB = DyFamily.gaussian(), DyFamily.log_gamma(), DyFamily.logit_beta()


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- families

def test_psi_values():
    y = np.array([0.0, 1.0, -2.0])
    assert np.allclose(psi(DyKind.GAUSSIAN, y), y**2)
    assert np.allclose(psi(DyKind.LOG_GAMMA, y), np.exp(y))
    assert np.allclose(psi(DyKind.LOGIT_BETA, y), np.log1p(np.exp(y)))
    assert np.allclose(psi(DyKind.STUDENT_T, y, 3.0), np.log1p(y**2 / 3.0))


def test_student_t_family_needs_nu():
    with pytest.raises(InvalidParamsError):
        DyFamily(DyKind.STUDENT_T)
    with pytest.raises(InvalidParamsError):
        DyFamily.student_t(-1.0)
    with pytest.raises(InvalidParamsError):
        DyFamily(DyKind.GAUSSIAN, 3.0)


@pytest.mark.parametrize("fam,alpha,kappa", [
    (LB, 2.0, 2.0),       # kappa <= alpha
    (LB, 0.0, 1.0),
    (LG, 0.0, 1.0),
    (LG, -1.0, 1.0),
    (G, 0.0, 0.0),
    (G, 0.0, -1.0),
    (DyFamily.student_t(3.0), 0.5, 2.0),  # StudentT needs alpha = 0
    (G, math.nan, 1.0),
])
def test_invalid_params_rejected(fam, alpha, kappa):
    with pytest.raises(InvalidParamsError):
        DyParams(fam, alpha, kappa)


# ---------------------------------------------------------------- sampling

def test_gaussian_standard_normal():
    x = dy_sample(DyParams(G, 0.0, 0.5), rng(1), size=200_000)
    assert abs(x.mean()) < 5 / math.sqrt(x.size)
    assert abs(x.var() - 1.0) < 5 * math.sqrt(2 / x.size)


def test_logit_beta_standard_logistic():
    x = dy_sample(DyParams(LB, 1.0, 2.0), rng(2), size=100_000)
    assert stats.kstest(x, stats.logistic.cdf).pvalue > 0.01


def test_log_gamma_mean_is_minus_euler():
    x = dy_sample(DyParams(LG, 1.0, 1.0), rng(3), size=1_000_000)
    se = x.std() / math.sqrt(x.size)
    assert abs(x.mean() - special.digamma(1.0)) < 4 * se
    assert abs(special.digamma(1.0) + 0.5772156649) < 1e-9


def test_scalar_sample_returns_float():
    assert isinstance(dy_sample(DyParams(LG, 2.0, 1.0), rng()), float)


def test_tiny_shape_log_gamma_is_finite():
    x = dy_sample(DyParams(LG, 1e-3, 1.0), rng(4), size=10_000)
    assert np.all(np.isfinite(x))
    x = dy_sample(DyParams(LB, 1e-3, 1.0 + 2e-3), rng(4), size=10_000)
    assert np.all(np.isfinite(x))


def _random_params(kind, r):
    if kind is DyKind.GAUSSIAN:
        return DyParams(G, r.uniform(-5, 5), r.uniform(0.1, 5))
    if kind is DyKind.LOG_GAMMA:
        return DyParams(LG, r.uniform(0.1, 10), r.uniform(0.1, 5))
    if kind is DyKind.LOGIT_BETA:
        a = r.uniform(0.2, 10)
        return DyParams(LB, a, a + r.uniform(0.2, 10))
    # finite fourth moment keeps the variance standard error meaningful
    nu = r.uniform(1.0, 20.0)
    return DyParams(DyFamily.student_t(nu), 0.0, r.uniform(4.6, 15.0))


@pytest.mark.parametrize("kind", list(DyKind))
def test_moments_match_analytic(kind):
    r = rng(10 + kind)
    n = 100_000
    for _ in range(50):
        p = _random_params(kind, r)
        x = dy_sample(p, r, size=n)
        mean, var = dy_mean_variance(p)
        m, v = x.mean(), x.var(ddof=1)
        se_m = math.sqrt(var / n)
        c = x - m
        se_v = math.sqrt(max(np.mean(c**4) - v**2, 1e-300) / n)
        assert abs(m - mean) < 5 * se_m, (p, m, mean)
        assert abs(v - var) < 5 * se_v, (p, v, var)


# ----------------------------------------------------------------- density

def test_gaussian_density_at_mode():
    assert dy_log_density(DyParams(G, 0.0, 0.5), 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    assert dy_log_density(DyParams(G, 0.0, 0.5), 0.0) == pytest.approx(-0.918938533204672, abs=1e-12)


def test_log_gamma_normalizer_by_quadrature():
    p = DyParams(LG, 2.0, 3.0)
    kernel = lambda y: math.exp(2.0 * y - 3.0 * math.exp(y))  # noqa: E731
    total, _ = integrate.quad(kernel, -30, 10, epsabs=1e-14, epsrel=1e-13, limit=200)
    assert dy_log_density(p, 0.0) == pytest.approx(-3.0 - math.log(total), abs=1e-8)


def test_student_t_density_at_zero():
    p = DyParams.student_t(3.0)
    direct = math.log(special.gamma(2.0) / (math.sqrt(3 * math.pi) * special.gamma(1.5)))
    assert dy_log_density(p, 0.0) == pytest.approx(direct, abs=1e-12)
    assert dy_log_density(p, 0.0) == pytest.approx(stats.t.logpdf(0.0, 3), abs=1e-12)
    kernel = lambda y: (1 + y * y / 3) ** -2  # noqa: E731
    total, _ = integrate.quad(kernel, -np.inf, np.inf, epsabs=1e-13)
    assert direct == pytest.approx(-math.log(total), abs=1e-9)


def test_density_vectorised():
    p = DyParams(LB, 2.0, 5.0)
    y = np.linspace(-3, 3, 7)
    out = dy_log_density(p, y)
    assert out.shape == (7,)
    assert out[3] == pytest.approx(dy_log_density(p, 0.0))


@pytest.mark.parametrize("kind", list(DyKind))
def test_density_integrates_to_one(kind):
    r = rng(100 + kind)
    for _ in range(20):
        p = _random_params(kind, r)
        mean, var = dy_mean_variance(p)
        sd = math.sqrt(var)
        f = lambda y: math.exp(dy_log_density(p, y))  # noqa: E731
        pts = [mean - sd, mean, mean + sd]
        total, err = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-10, limit=500)
        if abs(total - 1) > 1e-6:  # fall back to a finite range split at the bulk
            lo, hi = mean - 60 * sd, mean + 60 * sd
            total = integrate.quad(f, lo, hi, points=pts, epsabs=1e-12, limit=1000)[0]
            total += integrate.quad(f, -np.inf, lo)[0] + integrate.quad(f, hi, np.inf)[0]
        assert total == pytest.approx(1.0, abs=1e-6), p


def test_family_densities_match_scipy():
    y = np.linspace(-4, 3, 11)
    assert np.allclose(dy_log_density(DyParams(G, 2.0, 1.0), y), stats.norm.logpdf(y, 1.0, math.sqrt(0.5)))
    # log of Gamma(a, rate k) has density k^a e^{a y - k e^y} / Gamma(a)
    assert np.allclose(dy_log_density(DyParams(LG, 2.5, 1.5), y),
                       stats.loggamma.logpdf(y + math.log(1.5), 2.5))
    # logit of Beta(a, b): density is Beta pdf times the Jacobian x(1-x)
    a, b = 2.0, 3.0
    x = special.expit(y)
    ref = stats.beta.logpdf(x, a, b) + np.log(x) + np.log1p(-x)
    assert np.allclose(dy_log_density(DyParams(LB, a, a + b), y), ref)


# ---------------------------------------------------------------- updates

def test_posterior_update_examples():
    assert dy_posterior_update(DyParams(LG, 1.0, 1.0), 3, 1) == DyParams(LG, 4.0, 2.0)
    assert dy_posterior_update(DyParams(LB, 1.0, 2.0), 0, 5) == DyParams(LB, 1.0, 7.0)
    post = dy_posterior_update(DyParams(G, 0.0, 0.5), 0.0, 0.5)
    assert post == DyParams(G, 0.0, 1.0)
    assert dy_mean_variance(post) == (0.0, 0.5)


def test_posterior_update_rejects_bad_support():
    with pytest.raises(InvalidParamsError):
        dy_posterior_update(DyParams(LG, 1.0, 1.0), -1, 1)
    with pytest.raises(InvalidParamsError):
        dy_posterior_update(DyParams(LG, 1.0, 1.0), 1.5, 1)
    with pytest.raises(InvalidParamsError):
        dy_posterior_update(DyParams(LB, 1.0, 2.0), 6, 5)
    with pytest.raises(InvalidParamsError):
        dy_posterior_update(DyParams(G, 0.0, 1.0), 0.0, 0.0)
    with pytest.raises(InvalidParamsError):
        dy_posterior_update(DyParams.student_t(3.0), 0.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.01, 50), k=st.floats(0.01, 50), z=st.integers(0, 100))
def test_posterior_update_adds(a, k, z):
    post = dy_posterior_update(DyParams(LG, a, k), z, 1.0)
    assert post.alpha == a + z and post.kappa == k + 1.0 and post.family == LG


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.05, 20), extra=st.floats(0.05, 20), m=st.integers(1, 40), data=st.data())
def test_binomial_update_stays_valid(a, extra, m, data):
    z = data.draw(st.integers(0, m))
    post = dy_posterior_update(DyParams(LB, a, a + extra), z, m)
    assert 0 < post.alpha < post.kappa


def test_poisson_conjugacy_ks():
    r = rng(77)
    cases = 20
    for _ in range(cases):
        a, k, z = r.uniform(0.1, 5), r.uniform(0.1, 5), int(r.integers(0, 30))
        post = dy_posterior_update(DyParams(LG, a, k), z, 1)
        x = dy_sample(post, r, size=5000)
        direct = np.log(r.gamma(a + z, 1.0 / (k + 1), size=5000))
        assert stats.ks_2samp(x, direct).pvalue > 0.01 / cases


# ----------------------------------------------------------------- moments

def test_mean_variance_examples():
    assert dy_mean_variance(DyParams(G, 2.0, 1.0)) == (1.0, 0.5)
    m, v = dy_mean_variance(DyParams.student_t(5.0))
    assert m == 0.0 and v == pytest.approx(5 / 3)
    m, v = dy_mean_variance(DyParams(LG, 5.0, 2.0))
    assert m == pytest.approx(special.digamma(5.0) - math.log(2.0))
    x = dy_sample(DyParams(LG, 5.0, 2.0), rng(5), size=1_000_000)
    assert abs(x.mean() - m) < 4 * math.sqrt(v / x.size)


def test_student_t_variance_undefined():
    with pytest.raises(MomentsUndefinedError):
        dy_mean_variance(DyParams.student_t(2.0))
    with pytest.raises(MomentsUndefinedError):
        dy_mean_variance(DyParams.student_t(1.5))


def test_general_student_t_kappa():
    # kappa != (nu+1)/2 is a scaled t with d = 2 kappa - 1 degrees of freedom
    p = DyParams(DyFamily.student_t(4.0), 0.0, 3.0)
    y = np.linspace(-5, 5, 9)
    d = 5.0
    ref = stats.t.logpdf(y / math.sqrt(4.0 / d), d) - 0.5 * math.log(4.0 / d)
    assert np.allclose(dy_log_density(p, y), ref)
