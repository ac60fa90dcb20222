"""Simulation designs and metrics for the EPR arm of the benchmark studies.

* study 1: three response types sharing a quadratic trend design and an
  exponential radial basis, scored by RMSPE of y, y_hat and y_tilde,
  RMSE of beta and joint-interval coverage.
* study 2: single-type Poisson or Bernoulli regression, scored by the MSE
  of posterior medians on the inverse-link scale.
* CAR study: Gaussian plus Poisson areal data on a synthetic planar graph
  with a bivariate CAR random effect, scored by leave-one-out CV.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special
from scipy.spatial import Delaunay

from .dy import DyKind
from .errors import DimensionMismatchError, InvalidParamsError, NumericError
from .model import (
    DataBlock,
    EffectPrior,
    GlmmSpec,
    ThetaPrior,
    ThetaPriorComponent,
    mcar_covariance_chol,
    rho_bounds,
)
from .projection import IDENTITY, IdentityG
from .sampler import DrawSet, EprConfig, epr_run, joint_credible_region

BETA_TRUE = (9.0, -3.0, 3.0, -0.2, -1.0, 2.0, 2.6, -0.5, 2.0)
KINDS = ("gaussian", "poisson", "binomial")


def _seed_rng(seed, *path) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


# -------------------------------------------------------------------- study 1

@dataclass(frozen=True)
class Study1Design:
    """Study-1 construction at configurable scale.

    ``coef_kinds[j]`` names the response type that uses the j-th triple of
    ``beta_true``. The default sends the second triple to the binomial block
    and the third to the Poisson block; see the project notes for why.
    """

    n_per_block: int = 500
    basis_count: int = 20
    beta_true: tuple = BETA_TRUE
    sigma_true_sq: float = 1.0
    binomial_m_mean: float = 20.0
    coef_kinds: tuple = ("gaussian", "binomial", "poisson")
    eta_var: float | None = None
    prior_nu: float = 2.0
    prior_scale: float = 2.0

    def __post_init__(self):
        if self.n_per_block < self.basis_count:
            raise InvalidParamsError("n_per_block must be at least basis_count")
        if sorted(self.coef_kinds) != sorted(KINDS):
            raise InvalidParamsError(f"coef_kinds must be a permutation of {KINDS}")
        if len(self.beta_true) != 9:
            raise InvalidParamsError("beta_true must have 9 entries")


@dataclass
class Study1Truth:
    X: np.ndarray
    G: np.ndarray
    beta_true: np.ndarray
    eta_true: np.ndarray
    y_true: np.ndarray
    slices: dict
    m: np.ndarray


def trend_matrix(n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)
    return np.column_stack([np.ones(n), s, s**2])


def radial_basis(n: int, k: int) -> np.ndarray:
    i = np.arange(1, n + 1)[:, None]
    j = np.arange(1, k + 1)[None, :]
    return np.exp(-np.abs(i - j))


def study1_design_matrices(design: Study1Design):
    n, k = design.n_per_block, design.basis_count
    M = trend_matrix(n)
    X = np.zeros((3 * n, 9))
    for b in range(3):
        X[b * n:(b + 1) * n, 3 * b:3 * b + 3] = M
    stacked = np.vstack([radial_basis(n, k)] * 3)
    coef, *_ = np.linalg.lstsq(X, stacked, rcond=None)
    G = stacked - X @ coef
    return X, G


def gen_study1(design: Study1Design, seed: int):
    """Simulate one study-1 data set. Returns (GlmmSpec, Study1Truth)."""
    rng = _seed_rng(seed, 1)
    n = design.n_per_block
    X, G = study1_design_matrices(design)
    beta = np.asarray(design.beta_true, dtype=float)
    xb = X @ beta
    var = design.eta_var if design.eta_var is not None else float(np.var(xb))
    eta = rng.normal(0.0, math.sqrt(var), size=design.basis_count)
    y_true = xb + G @ eta
    blocks, slices = [], {}
    m = np.zeros(0)
    for j, kind in enumerate(design.coef_kinds):
        rows = slice(j * n, (j + 1) * n)
        slices[kind] = rows
        y, Xk, Gk = y_true[rows], X[rows], G[rows]
        if kind == "gaussian":
            z = y + rng.normal(0.0, math.sqrt(design.sigma_true_sq), n)
            blocks.append(DataBlock.gaussian(z, Xk, np.full(n, design.sigma_true_sq), Gk))
        elif kind == "poisson":
            blocks.append(DataBlock.poisson(rng.poisson(np.exp(y)), Xk, Gk))
        else:
            m = np.maximum(rng.poisson(design.binomial_m_mean, n), 1)
            blocks.append(DataBlock.binomial(rng.binomial(m, special.expit(y)), Xk, m, Gk))
    prior = EffectPrior.student_t(design.prior_nu, design.prior_scale)
    glmm = GlmmSpec(blocks, beta_prior=prior, eta_prior=prior)
    return glmm, Study1Truth(X, G, beta, eta, y_true, slices, m)


@dataclass
class MetricReport:
    rmspe: dict = field(default_factory=dict)  # (kind, predictor) -> value
    rmse_beta: float = float("nan")
    coverage_beta: float = float("nan")
    coverage_y: dict = field(default_factory=dict)
    mse_lambda: float = float("nan")
    mse_p: float = float("nan")
    cv: dict = field(default_factory=dict)
    pearson_corr: dict = field(default_factory=dict)
    cpu_seconds: float = float("nan")
    extra: dict = field(default_factory=dict)


def rmspe(truth, estimate) -> float:
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise DimensionMismatchError("truth and estimate must align")
    return float(np.sqrt(np.mean((truth - estimate) ** 2)))


def metrics_study1(drawset: DrawSet, truth: Study1Truth, level: float = 0.95) -> MetricReport:
    if drawset.y_tilde.shape[1] != truth.y_true.shape[0] or drawset.beta.shape[1] != truth.beta_true.shape[0]:
        raise DimensionMismatchError("draws and truth are misaligned")
    rep = MetricReport()
    preds = {"y": drawset.y_rep, "y_hat": drawset.y_hat, "y_tilde": drawset.y_tilde}
    for kind, rows in truth.slices.items():
        yt = truth.y_true[rows]
        for name, arr in preds.items():
            rep.rmspe[(kind, name)] = rmspe(yt, arr[:, rows].mean(axis=0))
        lo, hi = np.quantile(preds["y_tilde"][:, rows], [(1 - level) / 2, (1 + level) / 2], axis=0)
        rep.coverage_y[kind] = float(np.mean((yt >= lo) & (yt <= hi)))
    rep.rmse_beta = float(np.sqrt(np.mean((truth.beta_true - drawset.beta.mean(axis=0)) ** 2)))
    if len(drawset) >= 50:
        rep.coverage_beta = float(joint_credible_region(drawset.beta, level).contains(truth.beta_true))
    return rep


def lag1_autocorrelation(x) -> np.ndarray:
    """Lag-1 sample autocorrelation of each column."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean(axis=0)
    den = np.sum(c * c, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sum(c[1:] * c[:-1], axis=0) / den


def run_study1(design: Study1Design, replicates: int, rate: float, draws: int = 100, seed: int = 0,
               workers: int = 1):
    """List of (MetricReport, DrawSet-free summary) per replicate."""
    out = []
    for rep in range(replicates):
        t0 = time.process_time()
        glmm, truth = gen_study1(design, seed * 100_003 + rep)
        ds = epr_run(glmm, EprConfig(draws=draws, rate=rate, seed=seed * 100_003 + rep, workers=workers))
        m = metrics_study1(ds, truth)
        m.cpu_seconds = time.process_time() - t0
        m.extra["lag1"] = lag1_autocorrelation(ds.beta)
        m.extra["omega"] = ds.omega_used
        out.append(m)
    return out


def table1(design: Study1Design, replicates: int = 10, rates=(1.0, 0.5, 0.25), draws: int = 100,
           seed: int = 0, workers: int = 1) -> list[dict]:
    """Average RMSPE by acceptance rate and response type."""
    rows = []
    for rate in rates:
        reports = run_study1(design, replicates, rate, draws, seed, workers)
        for kind in design.coef_kinds:
            rows.append({
                "acceptance": rate,
                "k": KINDS.index(kind) + 1,
                "kind": kind,
                "rmspe_y_tilde": float(np.mean([r.rmspe[(kind, "y_tilde")] for r in reports])),
                "rmspe_y_hat": float(np.mean([r.rmspe[(kind, "y_hat")] for r in reports])),
                "rmspe_y": float(np.mean([r.rmspe[(kind, "y")] for r in reports])),
                "rmse_beta": float(np.mean([r.rmse_beta for r in reports])),
                "coverage_beta": float(np.mean([r.coverage_beta for r in reports])),
            })
    rows.sort(key=lambda d: (d["k"], -d["acceptance"]))
    return rows


# -------------------------------------------------------------------- study 2

@dataclass
class Study2Truth:
    kind: str
    X: np.ndarray
    G: np.ndarray | None
    linear_predictor: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        lp = self.linear_predictor
        return np.exp(lp) if self.kind == "poisson" else special.expit(lp)


def study2_prior() -> EffectPrior:
    return EffectPrior.student_t(2.0, 2.0)


def gen_study2(n: int = 100, r: int = 0, seed: int = 0, alpha_xi: float = 0.1):
    """Poisson and Bernoulli single-type data sets.

    With ``r = 0`` the covariate g ~ U(1, 20) enters X next to the intercept
    (coefficients 0.5, 0.1 and -5, 0.5). With ``r > 0`` the r uniform
    columns form G and share the coefficients 0.005 (Poisson) and 0.025
    (Bernoulli); X is the intercept alone.
    Returns ``{"poisson": (GlmmSpec, truth), "bernoulli": (GlmmSpec, truth)}``.
    """
    if n < 1:
        raise InvalidParamsError("n must be positive")
    out = {}
    specs = {"poisson": (0.5, 0.1 if r == 0 else 0.005), "bernoulli": (-5.0, 0.5 if r == 0 else 0.025)}
    for idx, (kind, (b0, b1)) in enumerate(specs.items()):
        rng = _seed_rng(seed, 2, idx)
        g = rng.uniform(1.0, 20.0, size=(n, max(r, 1)))
        ones = np.ones((n, 1))
        if r == 0:
            X, G = np.hstack([ones, g]), None
            lp = b0 + b1 * g[:, 0]
        else:
            X, G = ones, g
            lp = b0 + b1 * g.sum(axis=1)
        if kind == "poisson":
            block = DataBlock.poisson(rng.poisson(np.exp(lp)), X, G)
        else:
            block = DataBlock.binomial(rng.binomial(1, special.expit(lp)), X, np.ones(n), G)
        glmm = GlmmSpec([block], beta_prior=study2_prior(), eta_prior=study2_prior(), alpha_xi=alpha_xi)
        out[kind] = (glmm, Study2Truth("poisson" if kind == "poisson" else "binomial", X, G, lp))
    return out


def metrics_study2(drawset: DrawSet, truth: Study2Truth) -> float:
    """MSE of posterior medians of the inverse-link mean against the true mean."""
    yt = drawset.y_tilde
    if yt.shape[1] != truth.linear_predictor.shape[0]:
        raise DimensionMismatchError("draws and truth are misaligned")
    mean = np.exp(yt) if truth.kind == "poisson" else special.expit(yt)
    est = np.median(mean, axis=0)
    return float(np.mean((est - truth.mean) ** 2))


def table2(replicates: int = 20, n: int = 100, r: int = 0, rate: float = 0.5, draws: int = 600,
           seed: int = 0, workers: int = 1, alpha_xi: float = 0.1) -> list[dict]:
    res = {"poisson": [], "bernoulli": []}
    cpu = {"poisson": [], "bernoulli": []}
    for rep in range(replicates):
        data = gen_study2(n, r, seed * 100_003 + rep, alpha_xi)
        for kind, (glmm, truth) in data.items():
            t0 = time.process_time()
            ds = epr_run(glmm, EprConfig(draws=draws, rate=rate, seed=seed * 100_003 + rep, workers=workers))
            res[kind].append(metrics_study2(ds, truth))
            cpu[kind].append(time.process_time() - t0)
    rows = []
    for kind, vals in res.items():
        v = np.asarray(vals)
        sd = v.std(ddof=1) if v.size > 1 else 0.0
        rows.append({
            "regression": "logistic" if kind == "bernoulli" else "poisson",
            "metric": "mse_p" if kind == "bernoulli" else "mse_lambda",
            "average_mse": float(v.mean()),
            "ci_low": float(v.mean() - 2 * sd),
            "ci_high": float(v.mean() + 2 * sd),
            "average_cpu": float(np.mean(cpu[kind])),
        })
    return rows


# ---------------------------------------------------------------- CAR study

def planar_adjacency(n: int, rng: np.random.Generator):
    """Binary adjacency of the Delaunay triangulation of n uniform points."""
    pts = rng.uniform(size=(n, 2))
    tri = Delaunay(pts)
    A = np.zeros((n, n))
    for simplex in tri.simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = simplex[a], simplex[b]
                A[i, j] = A[j, i] = 1.0
    return A, pts


@dataclass(frozen=True)
class CarDesign:
    n_areas: int = 67
    beta_true: tuple = (10.5, 0.3, -0.2, 6.0, 0.4, -0.3)
    sigma1sq: float = 0.02
    sigma2sq: float = 0.01
    gamma: float = 0.8
    rho_fraction: float = 0.9
    survey_var_range: tuple = (0.0005, 0.005)
    prior_nu: float = 3.0


@dataclass
class CarTruth:
    adjacency: np.ndarray
    y_true: np.ndarray
    beta_true: np.ndarray
    eta_true: np.ndarray


def car_model(blocks, adjacency, prior_nu: float = 3.0, alpha_xi: float = 0.1, sigma2_xi: float = 1.0) -> GlmmSpec:
    """Hyperprior and D(theta) wiring for the bivariate CAR model."""
    p = blocks[0].X.shape[1]
    comps = [
        ThetaPriorComponent.uniform_rho("rho", adjacency),
        ThetaPriorComponent.inverse_gamma("sigma2_eta1", 3.0, 2.0),
        ThetaPriorComponent.inverse_gamma("sigma2_eta2", 3.0, 2.0),
        ThetaPriorComponent.student_t("gamma", 3.0),
    ] + [ThetaPriorComponent.inverse_gamma(f"sigma2_beta{i + 1}", 1.5, 0.5) for i in range(p)]

    def beta_scale(theta):
        return np.array([theta[f"sigma2_beta{i + 1}"] for i in range(p)])

    def eta_scale(theta):
        return mcar_covariance_chol(theta["sigma2_eta1"], theta["sigma2_eta2"], theta["gamma"], theta["rho"], adjacency)

    return GlmmSpec(
        blocks,
        beta_prior=EffectPrior.student_t(prior_nu, beta_scale),
        eta_prior=EffectPrior.gaussian(eta_scale),
        alpha_xi=alpha_xi,
        sigma2_xi=sigma2_xi,
        theta_prior=ThetaPrior(comps),
    )


def gen_car_study(design: CarDesign = CarDesign(), seed: int = 0):
    """Synthetic areal data: log-income-like Gaussian block and a Poisson block.

    Both responses get their own intercept and a centred quadratic in a
    standardised covariate (the survey variance for the Gaussian block);
    eta follows the bivariate CAR law.
    """
    rng = _seed_rng(seed, 3)
    n = design.n_areas
    A, _ = planar_adjacency(n, rng)
    lo, hi = rho_bounds(A)
    rho = design.rho_fraction * hi
    L = mcar_covariance_chol(design.sigma1sq, design.sigma2sq, design.gamma, rho, A)
    eta = L @ rng.standard_normal(2 * n)
    sv = rng.uniform(*design.survey_var_range, size=n)
    v1 = (sv - sv.mean()) / sv.std()
    v2 = rng.standard_normal(n)
    M1 = np.column_stack([np.ones(n), v1, v1**2 - np.mean(v1**2)])
    M2 = np.column_stack([np.ones(n), v2, v2**2 - np.mean(v2**2)])
    X = np.zeros((2 * n, 6))
    X[:n, :3] = M1
    X[n:, 3:] = M2
    beta = np.asarray(design.beta_true, dtype=float)
    y = X @ beta + eta
    z1 = y[:n] + rng.normal(0.0, np.sqrt(sv))
    z2 = rng.poisson(np.exp(y[n:]))
    blocks = [DataBlock.gaussian(z1, X[:n], sv, IDENTITY), DataBlock.poisson(z2, X[n:], IDENTITY)]
    return car_model(blocks, A, design.prior_nu), CarTruth(A, y, beta, eta)


def _drop_row(glmm: GlmmSpec, block_index: int, row: int):
    """Model without one observation plus the held-out design row (x_i, g_i).

    An identity basis becomes an explicit N x N basis so the held-out area
    keeps its random-effect coordinate.
    """
    n_total = glmm.n_total
    starts = np.cumsum([0] + [b.n for b in glmm.blocks])
    global_row = starts[block_index] + row
    new_blocks = []
    for k, b in enumerate(glmm.blocks):
        G = b.G
        if isinstance(G, IdentityG):
            G = np.eye(n_total)[starts[k]:starts[k + 1]]
        if k == block_index:
            keep = np.arange(b.n) != row
            held = (b.X[row].copy(), G[row].copy())
            aux = None if b.aux is None else b.aux[keep]
            new_blocks.append(DataBlock(b.family, b.z[keep], b.X[keep], G[keep], aux))
        else:
            new_blocks.append(DataBlock(b.family, b.z, b.X, G, b.aux))
    return replace(glmm, blocks=new_blocks), held, global_row


def loo_cv(glmm: GlmmSpec, config: EprConfig, block: int, max_refits: int = 500):
    """Leave-one-out relative error and Pearson correlation for one block.

    Poisson blocks are compared on the log scale; observations whose
    comparison value is zero are left out of the median and counted.
    Returns ``(cv, corr, info)``.
    """
    b = glmm.blocks[block]
    if b.n > max_refits:
        raise InvalidParamsError(f"block has {b.n} rows; refusing more than {max_refits} refits")
    preds = np.empty(b.n)
    for i in range(b.n):
        sub, (x_i, g_i), _ = _drop_row(glmm, block, i)
        ds = epr_run(sub, replace(config, seed=config.seed + i))
        preds[i] = float(np.mean(ds.beta @ x_i + ds.eta @ g_i))
    cv, corr, excluded = loo_metrics(b.z, preds, log_scale=b.family.kind is DyKind.LOG_GAMMA)
    return cv, corr, {"excluded": excluded, "predictions": preds}


def loo_metrics(z, preds, log_scale: bool = False):
    """(median relative error, Pearson correlation, excluded count) of held-out predictions."""
    z = np.asarray(z, dtype=float)
    preds = np.asarray(preds, dtype=float)
    if log_scale:
        with np.errstate(divide="ignore"):
            obs = np.log(z)
    else:
        obs = z
    usable = np.isfinite(obs) & (obs != 0)
    rel = np.abs(obs[usable] - preds[usable]) / np.abs(obs[usable])
    cv = float(np.median(rel)) if rel.size else float("nan")
    if rel.size < 2 or np.std(preds[usable]) == 0 or np.std(obs[usable]) == 0:
        raise NumericError("correlation undefined: constant predictions or observations")
    corr = float(np.corrcoef(obs[usable], preds[usable])[0, 1])
    return cv, corr, int((~usable).sum())


def table3(design: CarDesign = CarDesign(), rates=(1.0, 0.5, 0.25, 0.125), draws: int = 100, seed: int = 0,
           workers: int = 1) -> list[dict]:
    glmm, _ = gen_car_study(design, seed)
    rows = []
    for k in range(2):
        for rate in rates:
            cv, corr, info = loo_cv(glmm, EprConfig(draws=draws, rate=rate, seed=seed, workers=workers), k)
            rows.append({"acceptance": rate, "k": k + 1, "cv": cv, "corr": corr, "excluded": info["excluded"]})
    return rows
