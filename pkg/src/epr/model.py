"""GLMM description, posterior assembly and hyperprior machinery.

The user-facing model is a stack of data blocks sharing covariates X and a
basis G::

    y_k = X_k beta + G_k eta + xi_k

with DY priors on beta and eta and a fine-scale term xi. ``assemble_posterior``
turns a :class:`GlmmSpec` into a :class:`PosteriorSpec`, a GCM over
(xi, beta, eta, q) whose replicates come from projecting w.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csgraph

from .dy import DyFamily, DyKind
from .errors import (
    BoundaryError,
    DimensionMismatchError,
    EmptyModelError,
    InvalidParamsError,
    NotPositiveDefiniteError,
)
from .gcm import BlockDiagonal, GcmSpec, HQMap
from .projection import IDENTITY, IdentityG, ProjectionOperator, build_projection

KIND_NAMES = {
    "gaussian": DyKind.GAUSSIAN,
    "poisson": DyKind.LOG_GAMMA,
    "binomial": DyKind.LOGIT_BETA,
    "student_t": DyKind.STUDENT_T,
}
DATA_NAMES = {v: k for k, v in KIND_NAMES.items()}


# ---------------------------------------------------------------- data blocks

@dataclass(frozen=True)
class DataBlock:
    """One response type.

    ``aux`` carries the known variances for Gaussian data, the trial counts
    ``m`` for binomial data and is ignored otherwise; Student-t data take
    their degrees of freedom from ``family.nu``. ``G`` may be an array,
    ``None`` for no random effects, or :data:`IDENTITY`.
    """

    family: DyFamily
    z: np.ndarray
    X: np.ndarray
    G: Any = None
    aux: np.ndarray | None = None

    def __post_init__(self):
        fam = self.family
        if isinstance(fam, str):
            key = fam.lower()
            if key not in KIND_NAMES:
                raise InvalidParamsError(f"unknown data kind {fam!r}")
            if KIND_NAMES[key] is DyKind.STUDENT_T:
                raise InvalidParamsError("Student-t blocks need DyFamily.student_t(nu)")
            fam = DyFamily(KIND_NAMES[key])
        object.__setattr__(self, "family", fam)
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = z.shape[0]
        if z.ndim != 1 or X.shape[0] != n:
            raise DimensionMismatchError(f"X has {X.shape[0]} rows but z has {n} entries")
        G = self.G
        if G is None:
            G = np.zeros((n, 0))
        elif not isinstance(G, IdentityG):
            G = np.asarray(G, dtype=float)
            if G.ndim != 2 or G.shape[0] != n:
                raise DimensionMismatchError(f"G must have {n} rows")
        kind = fam.kind
        aux = None if self.aux is None else np.broadcast_to(np.asarray(self.aux, dtype=float), (n,)).copy()
        if kind is DyKind.GAUSSIAN:
            if aux is None:
                raise InvalidParamsError("Gaussian blocks need known variances in aux")
            if np.any(aux <= 0):
                raise InvalidParamsError("Gaussian variances must be positive")
        elif kind is DyKind.LOG_GAMMA:
            if np.any(z < 0) or np.any(z != np.floor(z)):
                raise InvalidParamsError("Poisson counts must be nonnegative integers")
        elif kind is DyKind.LOGIT_BETA:
            if aux is None:
                raise InvalidParamsError("binomial blocks need trial counts m in aux")
            if np.any(aux < 1) or np.any(aux != np.floor(aux)):
                raise InvalidParamsError("binomial m must be positive integers")
            if np.any(z < 0) or np.any(z > aux) or np.any(z != np.floor(z)):
                raise InvalidParamsError("binomial counts must lie in 0..m")
        if not np.all(np.isfinite(z)):
            raise InvalidParamsError("z must be finite")
        for name, val in [("z", z), ("X", X), ("G", G), ("aux", aux)]:
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def kind_name(self) -> str:
        return DATA_NAMES[self.family.kind]

    @classmethod
    def gaussian(cls, z, X, sigma2, G=None):
        return cls(DyFamily.gaussian(), z, X, G, sigma2)

    @classmethod
    def poisson(cls, z, X, G=None):
        return cls(DyFamily.log_gamma(), z, X, G)

    @classmethod
    def binomial(cls, z, X, m, G=None):
        return cls(DyFamily.logit_beta(), z, X, G, m)

    @classmethod
    def student_t(cls, z, X, nu, G=None):
        return cls(DyFamily.student_t(nu), z, X, G)


def marginalize_gaussian_variance(block: DataBlock, nu: float) -> DataBlock:
    """Replace a Gaussian block with unknown variances by a shifted Student-t block."""
    if not nu > 0:
        raise InvalidParamsError(f"degrees of freedom must be positive, got {nu}")
    if block.family.kind is not DyKind.GAUSSIAN:
        raise InvalidParamsError("only Gaussian blocks can have their variance marginalised")
    return DataBlock(DyFamily.student_t(nu), block.z, block.X, block.G)


# ---------------------------------------------------------------- hyperpriors

class ThetaKind(enum.Enum):
    INVERSE_GAMMA = "inverse_gamma"
    UNIFORM = "uniform"
    UNIFORM_RHO_BOUNDS = "uniform_rho_bounds"
    STUDENT_T = "student_t"
    POINT_MASS = "point_mass"


@dataclass(frozen=True)
class ThetaPriorComponent:
    name: str
    kind: ThetaKind
    params: tuple = ()

    def __post_init__(self):
        k, p = self.kind, self.params
        if k is ThetaKind.INVERSE_GAMMA and not (len(p) == 2 and p[0] > 0 and p[1] > 0):
            raise InvalidParamsError(f"{self.name}: inverse gamma needs positive (shape, rate)")
        if k is ThetaKind.STUDENT_T and not (len(p) in (1, 2) and all(v > 0 for v in p)):
            raise InvalidParamsError(f"{self.name}: Student-t needs positive df (and scale)")
        if k is ThetaKind.UNIFORM and not (len(p) == 2 and p[0] < p[1]):
            raise InvalidParamsError(f"{self.name}: uniform needs low < high")
        if k is ThetaKind.POINT_MASS and len(p) != 1:
            raise InvalidParamsError(f"{self.name}: point mass needs one value")

    @classmethod
    def inverse_gamma(cls, name, shape, rate):
        return cls(name, ThetaKind.INVERSE_GAMMA, (float(shape), float(rate)))

    @classmethod
    def uniform(cls, name, low, high):
        return cls(name, ThetaKind.UNIFORM, (float(low), float(high)))

    @classmethod
    def uniform_rho(cls, name, adjacency):
        lo, hi = rho_bounds(adjacency)
        return cls(name, ThetaKind.UNIFORM_RHO_BOUNDS, (lo, hi))

    @classmethod
    def student_t(cls, name, df, scale=1.0):
        return cls(name, ThetaKind.STUDENT_T, (float(df), float(scale)))

    @classmethod
    def point_mass(cls, name, value):
        return cls(name, ThetaKind.POINT_MASS, (value,))

    def sample(self, rng: np.random.Generator):
        k, p = self.kind, self.params
        if k is ThetaKind.INVERSE_GAMMA:
            return p[1] / rng.standard_gamma(p[0])
        if k in (ThetaKind.UNIFORM, ThetaKind.UNIFORM_RHO_BOUNDS):
            return rng.uniform(p[0], p[1])
        if k is ThetaKind.STUDENT_T:
            return p[1] * rng.standard_t(p[0]) if len(p) == 2 else rng.standard_t(p[0])
        return p[0]


@dataclass(frozen=True)
class ThetaPrior:
    components: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise InvalidParamsError("hyperparameter names must be unique")

    def __call__(self, rng: np.random.Generator) -> dict:
        return sample_theta(self, rng)

    @property
    def is_point_mass(self) -> bool:
        return all(c.kind is ThetaKind.POINT_MASS for c in self.components)


def sample_theta(prior: ThetaPrior, rng: np.random.Generator) -> dict:
    """Independent draws of every hyperparameter, keyed by name (in declaration order)."""
    return {c.name: c.sample(rng) for c in prior.components}


# ------------------------------------------------------------- CAR structures

def _check_adjacency(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidParamsError("adjacency must be square")
    if not np.array_equal(A, A.T):
        raise InvalidParamsError("adjacency must be symmetric")
    if not np.all((A == 0) | (A == 1)) or np.any(np.diag(A) != 0):
        raise InvalidParamsError("adjacency must be binary with a zero diagonal")
    return A


def car_precision(adjacency, rho: float) -> np.ndarray:
    """D_a - rho A, checked positive definite."""
    A = _check_adjacency(adjacency)
    M = np.diag(A.sum(axis=1)) - rho * A
    try:
        c = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"CAR precision is not positive definite at rho={rho}") from None
    d = np.diag(c)
    if d.min() <= 1e-7 * d.max():
        raise NotPositiveDefiniteError(f"CAR precision is numerically singular at rho={rho}")
    return M


def rho_bounds(adjacency) -> tuple[float, float]:
    """Open interval of rho for which D_a - rho A is positive definite."""
    A = _check_adjacency(adjacency)
    deg = A.sum(axis=1)
    if np.all(deg == 0):
        raise InvalidParamsError("adjacency has no edges")
    if np.any(deg == 0):
        raise InvalidParamsError("adjacency has isolated nodes; D_a is singular")
    ncomp, _ = csgraph.connected_components(A, directed=False)
    if ncomp > 1:
        warnings.warn(f"adjacency graph has {ncomp} connected components", RuntimeWarning, stacklevel=2)
    s = 1.0 / np.sqrt(deg)
    lam = np.linalg.eigvalsh(s[:, None] * A * s[None, :])
    return float(1.0 / lam[0]), float(1.0 / lam[-1])


def _chol_with_jitter(S: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.mean(np.diag(S))
        try:
            return np.linalg.cholesky(S + jitter * np.eye(S.shape[0]))
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(f"Cholesky of {name} failed after jitter") from None


def car_covariance(sigma2: float, rho: float, adjacency) -> np.ndarray:
    prec = car_precision(adjacency, rho)
    c = sla.cho_factor(prec, lower=True)
    cov = sigma2 * sla.cho_solve(c, np.eye(prec.shape[0]))
    return 0.5 * (cov + cov.T)


def mcar_covariance_chol(sigma1sq, sigma2sq, gamma, rho, adjacency) -> np.ndarray:
    """Lower Cholesky factor of cov(eta_1, eta_2) for eta_2 = gamma eta_1 + eps.

    eta_1 carries the CAR law sigma1sq (D_a - rho A)^{-1}; eps has covariance
    sigma2sq I. The factor is [[C1, 0], [gamma C1, sqrt(sigma2sq) I]].
    """
    if not (sigma1sq > 0 and sigma2sq > 0):
        raise InvalidParamsError("variances must be positive")
    c1 = _chol_with_jitter(car_covariance(sigma1sq, rho, adjacency), "CAR covariance")
    n = c1.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = c1
    out[n:, :n] = gamma * c1
    out[n:, n:] = np.sqrt(sigma2sq) * np.eye(n)
    return out


# ------------------------------------------------------- priors and the model

ScaleSpec = float | Callable[[dict], Any]


@dataclass(frozen=True)
class EffectPrior:
    """DY prior class for beta or eta, scaled by D(theta).

    ``scale`` is either a constant multiplier or a function of theta that
    returns a scalar, a vector (diagonal) or a square matrix.
    """

    family: DyFamily = field(default_factory=DyFamily.gaussian)
    alpha: float | np.ndarray = 0.0
    kappa: float | np.ndarray = 0.5
    scale: Any = 1.0

    @classmethod
    def gaussian(cls, sd: ScaleSpec = 1.0) -> EffectPrior:
        """Normal(0, sd^2) coordinates."""
        return cls(DyFamily.gaussian(), 0.0, 0.5, sd)

    @classmethod
    def student_t(cls, nu: float, scale: ScaleSpec = 1.0) -> EffectPrior:
        return cls(DyFamily.student_t(nu), 0.0, (nu + 1.0) / 2.0, scale)

    def block(self, theta: dict, dim: int):
        s = self.scale(theta) if callable(self.scale) else self.scale
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            return (dim, float(s))
        if s.ndim == 1:
            if s.shape[0] != dim:
                raise DimensionMismatchError(f"prior scale has length {s.shape[0]}, expected {dim}")
            return np.diag(s)
        if s.shape != (dim, dim):
            raise DimensionMismatchError(f"prior scale matrix must be {dim}x{dim}")
        return s


class QPrior(enum.Enum):
    IMPROPER = "improper"
    TRUNCATED = "truncated"
    POINT_MASS_ZERO = "point_mass_zero"


@dataclass(frozen=True)
class GlmmSpec:
    blocks: Sequence[DataBlock]
    beta_prior: EffectPrior = field(default_factory=EffectPrior.gaussian)
    eta_prior: EffectPrior = field(default_factory=EffectPrior.gaussian)
    alpha_xi: float = 0.1
    sigma2_xi: float = 1.0
    theta_prior: ThetaPrior = field(default_factory=ThetaPrior)
    q_prior: QPrior = QPrior.TRUNCATED

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise EmptyModelError("model has no data blocks")
        p = {b.X.shape[1] for b in blocks}
        if len(p) != 1:
            raise DimensionMismatchError(f"blocks disagree on p: {sorted(p)}")
        ident = [isinstance(b.G, IdentityG) for b in blocks]
        if any(ident) and not all(ident):
            raise DimensionMismatchError("either every block or no block uses an identity basis")
        if not any(ident):
            r = {b.G.shape[1] for b in blocks}
            if len(r) != 1:
                raise DimensionMismatchError(f"blocks disagree on r: {sorted(r)}")
        if not self.sigma2_xi > 0:
            raise InvalidParamsError("sigma2_xi must be positive")
        if self.alpha_xi < 0:
            raise InvalidParamsError("alpha_xi must be nonnegative")

    @property
    def n_total(self) -> int:
        return sum(b.n for b in self.blocks)

    @property
    def p(self) -> int:
        return self.blocks[0].X.shape[1]

    @property
    def r(self) -> int:
        b = self.blocks[0]
        return self.n_total if isinstance(b.G, IdentityG) else b.G.shape[1]


@dataclass(frozen=True)
class PosteriorSpec(GcmSpec):
    """Posterior GCM plus the bookkeeping the sampler needs.

    Rows are stored sorted by data kind; ``row_order[i]`` is the row's
    position in the caller's block order.
    """

    op: ProjectionOperator | None = None
    row_order: np.ndarray | None = None
    block_slices: tuple = ()
    dims: tuple = (0, 0, 0)


def _prior_arrays(prior: EffectPrior, dim: int):
    a = np.broadcast_to(np.asarray(prior.alpha, dtype=float), (dim,))
    k = np.broadcast_to(np.asarray(prior.kappa, dtype=float), (dim,))
    v = np.full(dim, prior.family.nu if prior.family.nu is not None else np.nan)
    return np.full(dim, int(prior.family.kind)), a, k, v


def data_shapes(block: DataBlock, alpha_xi: float):
    """Posterior (kinds, alpha, kappa, nu, shift) of the saturated data coordinates."""
    n, z, kind = block.n, block.z, block.family.kind
    shift = np.zeros(n)
    nu = np.full(n, np.nan)
    if kind is DyKind.GAUSSIAN:
        alpha, kappa = z / block.aux, 0.5 / block.aux
    elif kind is DyKind.LOG_GAMMA:
        alpha, kappa = z + alpha_xi, np.ones(n)
        if np.any(alpha <= 0):
            raise BoundaryError("zero Poisson counts need alpha_xi > 0")
    elif kind is DyKind.LOGIT_BETA:
        alpha, kappa = z + alpha_xi, block.aux + 2 * alpha_xi
        if np.any(alpha <= 0) or np.any(alpha >= kappa):
            raise BoundaryError("binomial counts at 0 or m need alpha_xi > 0")
    else:
        nu[:] = block.family.nu
        alpha, kappa = np.zeros(n), np.full(n, (block.family.nu + 1) / 2)
        shift = z.copy()
    return np.full(n, int(kind)), alpha, kappa, nu, shift


def assemble_posterior(glmm: GlmmSpec) -> PosteriorSpec:
    """Posterior GCM of (xi, beta, eta, q) under a flat prior on q."""
    order = sorted(range(len(glmm.blocks)), key=lambda i: int(glmm.blocks[i].family.kind))
    starts = np.cumsum([0] + [b.n for b in glmm.blocks])
    blocks = [glmm.blocks[i] for i in order]
    row_order = np.concatenate([np.arange(starts[i], starts[i + 1]) for i in order])
    n, p, r = glmm.n_total, glmm.p, glmm.r

    pieces = [data_shapes(b, glmm.alpha_xi) for b in blocks]
    pieces.append(_prior_arrays(glmm.beta_prior, p) + (np.zeros(p),))
    pieces.append(_prior_arrays(glmm.eta_prior, r) + (np.zeros(r),))
    pieces.append((np.full(n, int(DyKind.GAUSSIAN)), np.zeros(n), np.full(n, 0.5), np.full(n, np.nan), np.zeros(n)))
    kinds, alpha, kappa, nu, shift = (np.concatenate(parts) for parts in zip(*pieces))

    X = np.vstack([b.X for b in blocks])
    G = IDENTITY if isinstance(blocks[0].G, IdentityG) else np.vstack([b.G for b in blocks])
    op = build_projection(X, G)
    sigma_xi = float(np.sqrt(glmm.sigma2_xi))
    beta_prior, eta_prior = glmm.beta_prior, glmm.eta_prior

    def d_builder(theta):
        theta = theta or {}
        return BlockDiagonal([(n, 1.0), beta_prior.block(theta, p), eta_prior.block(theta, r), (n, sigma_xi)])

    slices, i = [], 0
    for b in blocks:
        slices.append((b.kind_name, slice(i, i + b.n)))
        i += b.n
    return PosteriorSpec(
        alpha=alpha, kappa=kappa, kinds=kinds, nu=nu, v=HQMap(op), d_builder=d_builder,
        theta_prior=glmm.theta_prior, shift=shift,
        op=op, row_order=row_order, block_slices=tuple(slices), dims=(n, p, r),
    )


def sorted_blocks(glmm: GlmmSpec) -> list[DataBlock]:
    return sorted(glmm.blocks, key=lambda b: int(b.family.kind))
