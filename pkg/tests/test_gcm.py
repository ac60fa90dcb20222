import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import polygamma

from epr.dy import DyKind, log_density_array
from epr.errors import DimensionMismatchError, ExhaustedError, SingularBlockError
from epr.gcm import (
    BlockDiagonal,
    DenseMap,
    GcmSpec,
    HQMap,
    TruncationRegion,
    cgcm_log_density_given_theta,
    gcm_log_density_given_theta,
    gcm_sample,
    latent_coordinates,
    truncated_gcm_sample,
)
from epr.projection import build_h, build_projection

GA, LG, LB = int(DyKind.GAUSSIAN), int(DyKind.LOG_GAMMA), int(DyKind.LOGIT_BETA)


def identity_d(n):
    return lambda theta: BlockDiagonal.identity(n)


def make_spec(kinds, alpha, kappa, v_inv, mu=None, d_builder=None, theta_prior=None):
    n = len(kinds)
    kw = {}
    if theta_prior is not None:
        kw["theta_prior"] = theta_prior
    return GcmSpec(np.array(alpha, float), np.array(kappa, float), np.array(kinds), np.full(n, np.nan),
                   DenseMap(v_inv), d_builder or identity_d(n), mu=mu, **kw)


# ---------------------------------------------------------- block diagonal

def test_block_diagonal_matches_dense():
    r = np.random.default_rng(0)
    L = np.tril(r.standard_normal((3, 3))) + 3 * np.eye(3)
    S = r.standard_normal((2, 2)) + 3 * np.eye(2)
    d = BlockDiagonal([(2, 1.5), L, (1, -0.5), S])
    M = d.dense()
    x = r.standard_normal((4, 8))
    assert np.allclose(d.apply(x), x @ M.T)
    assert np.allclose(d.solve(x), np.linalg.solve(M, x.T).T)
    assert d.logabsdet() == pytest.approx(np.linalg.slogdet(M)[1])


def test_block_diagonal_rejects_zero_scale():
    with pytest.raises(SingularBlockError):
        BlockDiagonal([(2, 0.0)])
    with pytest.raises(DimensionMismatchError):
        BlockDiagonal.identity(3).apply(np.zeros(4))


# ---------------------------------------------------------------- sampling

def test_identity_transform_gives_independent_gaussians():
    alpha, kappa = [1.0, -2.0, 0.0], [0.5, 2.0, 1.0]
    spec = make_spec([GA] * 3, alpha, kappa, np.eye(3))
    r = np.random.default_rng(1)
    ys = np.array([gcm_sample(spec, r)[1] for _ in range(20_000)])
    mean = np.array(alpha) / (2 * np.array(kappa))
    var = 1 / (2 * np.array(kappa))
    assert np.all(np.abs(ys.mean(0) - mean) < 4 * np.sqrt(var / len(ys)))
    assert np.all(np.abs(ys.var(0) - var) < 5 * var * math.sqrt(2 / len(ys)))
    assert abs(np.corrcoef(ys.T)[0, 1]) < 4 / math.sqrt(len(ys))


def test_triangular_v_covariance():
    V = np.array([[1.0, 0.0], [1.0, 1.0]])
    alpha, kappa = np.array([2.0, 3.0]), np.array([1.0, 2.0])
    spec = make_spec([LG, LG], alpha, kappa, np.linalg.inv(V))
    r = np.random.default_rng(2)
    # composition with a batched transform (1e6 draws), plus the per-draw sampler on a subset
    w = spec.sample_w_m(r, 1_000_000)
    y = spec.v.forward(w)
    cov_w = np.diag(polygamma(1, alpha))
    target = V @ cov_w @ V.T
    emp = np.cov(y.T)
    assert np.allclose(emp, target, rtol=0.01, atol=0.005)
    ys = np.array([gcm_sample(spec, r)[1] for _ in range(20_000)])
    assert np.allclose(np.cov(ys.T), target, rtol=0.06, atol=0.03)


def test_scale_mixture_is_heavy_tailed():
    def d_builder(theta):
        return BlockDiagonal([(1, math.sqrt(theta))])

    def prior(rng):
        return 1.0 / rng.gamma(3.0, 1.0)  # inverse gamma(3, 1)

    spec = make_spec([GA], [0.0], [0.5], np.eye(1), d_builder=d_builder, theta_prior=prior)
    r = np.random.default_rng(3)
    y = np.array([gcm_sample(spec, r)[1][0] for _ in range(50_000)])
    assert stats.kurtosis(y, fisher=False) > 3.5


def test_inverse_transform_recovers_dy_coordinates():
    r = np.random.default_rng(4)
    M = r.standard_normal((3, 3)) + 2 * np.eye(3)
    kinds, alpha, kappa = [GA, LG, LB], [1.0, 2.0, 1.5], [1.0, 0.7, 4.0]
    mu = np.array([1.0, -1.0, 0.5])
    spec = make_spec(kinds, alpha, kappa, M, mu=mu)
    draws = [gcm_sample(spec, r) for _ in range(5000)]
    w = np.array([latent_coordinates(spec, y, th) for th, y in draws])
    direct = spec.sample_w_m(np.random.default_rng(5), 5000)
    for j in range(3):
        assert stats.ks_2samp(w[:, j], direct[:, j]).pvalue > 0.01 / 3


# ----------------------------------------------------------------- density

def test_identity_density_is_sum_of_dy():
    kinds, alpha, kappa = np.array([GA, LG, LB]), np.array([0.3, 2.0, 1.0]), np.array([1.0, 1.0, 3.0])
    spec = make_spec(kinds, alpha, kappa, np.eye(3))
    y = np.array([0.2, -0.4, 1.1])
    ref = log_density_array(kinds, alpha, kappa, np.full(3, np.nan), y).sum()
    assert gcm_log_density_given_theta(spec, y, None) == pytest.approx(ref, abs=1e-12)


def test_density_change_of_variables():
    r = np.random.default_rng(6)
    M = r.standard_normal((3, 3)) + 2 * np.eye(3)
    kinds, alpha, kappa = np.array([GA, LG, LB]), np.array([0.3, 2.0, 1.0]), np.array([1.0, 1.0, 3.0])
    mu = r.standard_normal(3)
    spec = make_spec(kinds, alpha, kappa, M, mu=mu)
    for _ in range(10):
        y = r.standard_normal(3)
        u = M @ (y - mu)
        ref = np.log(abs(np.linalg.det(M))) + log_density_array(kinds, alpha, kappa, np.full(3, np.nan), u).sum()
        assert abs(gcm_log_density_given_theta(spec, y, None) - ref) <= 1e-10


def test_scaling_v_shifts_log_density():
    r = np.random.default_rng(7)
    M = r.standard_normal((3, 3)) + 2 * np.eye(3)
    kinds, alpha, kappa = [GA, LG, GA], [0.0, 2.0, 1.0], [0.5, 1.0, 2.0]
    a = make_spec(kinds, alpha, kappa, M)
    b = make_spec(kinds, alpha, kappa, M / 2)  # V doubled
    y = r.standard_normal(3)
    diff = gcm_log_density_given_theta(a, y, None) - gcm_log_density_given_theta(b, 2 * y, None)
    assert diff == pytest.approx(3 * math.log(2), abs=1e-10)


def test_density_integrates_on_grid():
    M = np.array([[1.0, 0.3], [-0.2, 0.8]])
    spec = make_spec([GA, LG], [0.5, 2.0], [1.0, 1.5], M, mu=np.array([0.2, -0.1]))
    xs = np.linspace(-12, 12, 801)
    Y1, Y2 = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([Y1.ravel(), Y2.ravel()], axis=1)
    with np.errstate(over="ignore"):
        dens = np.exp(gcm_log_density_given_theta(spec, pts, None))
    h = xs[1] - xs[0]
    assert dens.sum() * h * h == pytest.approx(1.0, abs=1e-3)


def test_density_dimension_mismatch():
    spec = make_spec([GA, GA], [0, 0], [1, 1], np.eye(2))
    with pytest.raises(DimensionMismatchError):
        gcm_log_density_given_theta(spec, np.zeros(3), None)


def test_spec_validation():
    with pytest.raises(DimensionMismatchError):
        GcmSpec(np.zeros(2), np.ones(3), np.array([GA, GA]), np.full(2, np.nan), DenseMap(np.eye(2)), identity_d(2))
    with pytest.raises(DimensionMismatchError):
        make_spec([GA, GA], [0, 0], [1, 1], np.eye(3))
    spec = make_spec([GA], [0.0], [1.0], np.eye(1))
    with pytest.raises(ValueError):
        spec.alpha[0] = 1.0


# -------------------------------------------------------------- truncation

def test_truncation_everything_matches_plain():
    spec = make_spec([LG, GA], [2.0, 0.0], [1.0, 0.5], np.array([[1.0, 0.0], [0.5, 1.0]]))
    r1, r2 = np.random.default_rng(8), np.random.default_rng(9)
    a = np.array([truncated_gcm_sample(spec, TruncationRegion.everything(), r1)[1] for _ in range(4000)])
    b = np.array([gcm_sample(spec, r2)[1] for _ in range(4000)])
    for j in range(2):
        assert stats.ks_2samp(a[:, j], b[:, j]).pvalue > 0.005


def test_truncated_normal_moments():
    spec = make_spec([GA], [0.0], [0.5], np.eye(1))
    region = TruncationRegion(lambda y: y[0] > 0, "positive half line")
    r = np.random.default_rng(10)
    y = np.array([truncated_gcm_sample(spec, region, r)[1][0] for _ in range(20_000)])
    tn = stats.truncnorm(0, np.inf)
    assert abs(y.mean() - tn.mean()) < 4 * tn.std() / math.sqrt(y.size)
    assert abs(y.var() - tn.var()) < 0.03


def test_truncation_exhausts():
    spec = make_spec([GA], [0.0], [0.5], np.eye(1))
    with pytest.raises(ExhaustedError) as info:
        truncated_gcm_sample(spec, TruncationRegion(lambda y: False, "nothing"), np.random.default_rng(0), max_tries=50)
    assert info.value.tries == 50


def test_acceptance_rate_matches_probability():
    spec = make_spec([LG], [1.5], [1.0], np.eye(1))
    region = TruncationRegion(lambda y: y[0] > 0.5, "upper tail")
    r = np.random.default_rng(11)
    tries = [truncated_gcm_sample(spec, region, r, return_tries=True)[2] for _ in range(3000)]
    rate = len(tries) / sum(tries)
    probe = spec.sample_w_m(np.random.default_rng(12), 200_000)[:, 0]
    p = float(np.mean(probe > 0.5))
    se = math.sqrt(p * (1 - p) / sum(tries)) + math.sqrt(p * (1 - p) / probe.size)
    assert abs(rate - p) < 3 * se


# ----------------------------------------------------------- conditional

def _gaussian_setup(seed=13):
    r = np.random.default_rng(seed)
    M = r.standard_normal((3, 3)) + 2 * np.eye(3)
    alpha, kappa = np.array([0.5, -1.0, 0.2]), np.array([0.5, 1.0, 2.0])
    mu = r.standard_normal(3)
    return r, M, alpha, kappa, mu, make_spec([GA] * 3, alpha, kappa, M, mu=mu)


def test_cgcm_gaussian_conditional():
    r, M, alpha, kappa, mu, spec = _gaussian_setup()
    V = np.linalg.inv(M)
    mean = mu + V @ (alpha / (2 * kappa))
    cov = V @ np.diag(1 / (2 * kappa)) @ V.T
    k = 2
    y2 = r.standard_normal(1)
    S11, S12, S22 = cov[:k, :k], cov[:k, k:], cov[k:, k:]
    cm = mean[:k] + S12 @ np.linalg.solve(S22, y2 - mean[k:])
    cc = S11 - S12 @ np.linalg.solve(S22, S12.T)
    law = stats.multivariate_normal(cm, cc)
    pts = r.standard_normal((6, k))
    ours = np.array([cgcm_log_density_given_theta(spec, p, y2, None) for p in pts])
    ref = law.logpdf(pts)
    assert np.max(np.abs(np.diff(ours) - np.diff(ref))) <= 1e-8


def test_cgcm_full_partition_reduces_to_joint():
    r, M, alpha, kappa, mu, spec = _gaussian_setup(14)
    pts = r.standard_normal((5, 3))
    ours = np.array([cgcm_log_density_given_theta(spec, p, np.zeros(0), None) for p in pts])
    joint = np.array([gcm_log_density_given_theta(spec, p, None) for p in pts])
    assert np.ptp(ours - joint) <= 1e-10


def test_cgcm_poisson_grid_normalization():
    M = np.array([[1.0, 0.4], [0.3, 1.0]])
    spec = make_spec([LG, LG], [2.0, 1.5], [1.0, 2.0], M)
    y2 = np.array([0.3])
    grid = np.linspace(-2.0, 2.0, 20)
    cond = np.array([cgcm_log_density_given_theta(spec, np.array([g]), y2, None) for g in grid])
    joint = np.array([gcm_log_density_given_theta(spec, np.array([g, y2[0]]), None) for g in grid])
    pc = np.exp(cond - cond.max())
    pj = np.exp(joint - joint.max())
    assert np.allclose(pc / pc.sum(), pj / pj.sum(), atol=1e-12)


def test_cgcm_partition_mismatch():
    _, _, _, _, _, spec = _gaussian_setup()
    with pytest.raises(DimensionMismatchError):
        cgcm_log_density_given_theta(spec, np.zeros(2), np.zeros(2), None)


# --------------------------------------------------------------- HQ map

def test_hq_map_round_trip():
    r = np.random.default_rng(15)
    X, G = r.standard_normal((5, 2)), r.standard_normal((5, 1))
    hq = HQMap(build_projection(X, G))
    y = r.standard_normal(hq.dim)
    assert np.allclose(hq.forward(hq.inverse(y)), y, atol=1e-10)
    assert np.allclose(hq.inverse(hq.forward(y)), y, atol=1e-10)
    full = np.hstack([build_h(X, G), hq.Q])
    assert hq.logabsdet_inverse() == pytest.approx(np.linalg.slogdet(full)[1], abs=1e-10)
