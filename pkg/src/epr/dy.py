"""Diaconis-Ylvisaker (DY) unit distributions.

A DY variable has density proportional to ``exp(alpha*y - kappa*psi(y))``.
Four log-partition functions are supported:

====  ============  ===========================
code  family        psi(y)
====  ============  ===========================
1     Gaussian      y**2
2     log-gamma     exp(y)
3     logit-beta    log(1 + exp(y))
4     Student-t     log(1 + y**2 / nu)
====  ============  ===========================

Each family reduces to a textbook law, which is how we sample:

* Gaussian      -> Normal(alpha / (2 kappa), 1 / (2 kappa))
* log-gamma     -> log of Gamma(shape=alpha, rate=kappa)
* logit-beta    -> logit of Beta(alpha, kappa - alpha)
* Student-t     -> sqrt(nu / d) * t_d with d = 2 kappa - 1
  (the standard t_nu when kappa = (nu + 1) / 2)

The vectorised helpers (``sample_dy_array``, ``log_density_array``) work on
parallel arrays of family codes and parameters so a whole GCM coordinate
vector can be drawn in one call.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidParamsError, MomentsUndefinedError


class DyKind(enum.IntEnum):
    GAUSSIAN = 1
    LOG_GAMMA = 2
    LOGIT_BETA = 3
    STUDENT_T = 4


@dataclass(frozen=True)
class DyFamily:
    kind: DyKind
    nu: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DyKind(self.kind))
        if self.kind is DyKind.STUDENT_T:
            if self.nu is None or not (self.nu > 0):
                raise InvalidParamsError("Student-t family needs nu > 0")
        elif self.nu is not None:
            raise InvalidParamsError(f"nu is only meaningful for Student-t, got {self.kind.name}")

    @classmethod
    def gaussian(cls) -> DyFamily:
        return cls(DyKind.GAUSSIAN)

    @classmethod
    def log_gamma(cls) -> DyFamily:
        return cls(DyKind.LOG_GAMMA)

    @classmethod
    def logit_beta(cls) -> DyFamily:
        return cls(DyKind.LOGIT_BETA)

    @classmethod
    def student_t(cls, nu: float) -> DyFamily:
        return cls(DyKind.STUDENT_T, float(nu))

    def psi(self, y):
        return psi(self.kind, y, self.nu if self.nu is not None else np.nan)


@dataclass(frozen=True)
class DyParams:
    family: DyFamily
    alpha: float
    kappa: float

    def __post_init__(self):
        validate_arrays(
            np.array([int(self.family.kind)]),
            np.array([float(self.alpha)]),
            np.array([float(self.kappa)]),
            np.array([self.family.nu if self.family.nu is not None else np.nan]),
        )

    @classmethod
    def student_t(cls, nu: float) -> DyParams:
        """Standard Student-t with ``nu`` degrees of freedom."""
        return cls(DyFamily.student_t(nu), 0.0, (nu + 1.0) / 2.0)


def psi(kind, y, nu=np.nan):
    """Evaluate the log-partition function elementwise. ``kind`` may be an array."""
    y = np.asarray(y, dtype=float)
    kind = np.broadcast_to(np.asarray(kind), y.shape)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), y.shape)
    out = np.empty_like(y)
    m = kind == DyKind.GAUSSIAN
    out[m] = y[m] ** 2
    m = kind == DyKind.LOG_GAMMA
    with np.errstate(over="ignore"):  # exp overflow to inf gives density 0, as it should
        out[m] = np.exp(y[m])
    m = kind == DyKind.LOGIT_BETA
    out[m] = np.logaddexp(0.0, y[m])
    m = kind == DyKind.STUDENT_T
    out[m] = np.log1p(y[m] ** 2 / nu[m])
    return out


def validate_arrays(kinds, alpha, kappa, nu) -> None:
    """Check per-coordinate DY parameter validity; raise on the first failure."""
    kinds = np.asarray(kinds)
    alpha = np.asarray(alpha, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if not (kinds.shape == alpha.shape == kappa.shape == nu.shape):
        raise InvalidParamsError("kinds, alpha, kappa and nu must have identical shapes")
    bad_kind = ~np.isin(kinds, [k.value for k in DyKind])
    if bad_kind.any():
        raise InvalidParamsError(f"unknown DY family code {kinds[bad_kind][0]}")
    if not np.all(np.isfinite(alpha)) or not np.all(np.isfinite(kappa)):
        raise InvalidParamsError("alpha and kappa must be finite")
    if np.any(kappa <= 0):
        i = int(np.argmax(kappa <= 0))
        raise InvalidParamsError(f"kappa must be positive (coordinate {i}: kappa={kappa[i]})")
    checks = [
        (kinds == DyKind.LOG_GAMMA, alpha <= 0, "log-gamma needs alpha > 0"),
        (kinds == DyKind.LOGIT_BETA, (alpha <= 0) | (alpha >= kappa), "logit-beta needs 0 < alpha < kappa"),
        (kinds == DyKind.STUDENT_T, alpha != 0, "Student-t needs alpha = 0"),
        (kinds == DyKind.STUDENT_T, ~(nu > 0), "Student-t needs nu > 0"),
        (kinds == DyKind.STUDENT_T, kappa <= 0.5, "Student-t needs kappa > 1/2"),
    ]
    for applies, fails, msg in checks:
        hit = applies & fails
        if hit.any():
            i = int(np.argmax(hit))
            raise InvalidParamsError(f"{msg} (coordinate {i}: alpha={alpha[i]}, kappa={kappa[i]})")


def _log_gamma_variates(rng: np.random.Generator, shape, size) -> np.ndarray:
    """log of Gamma(shape, 1) variates, safe for tiny shapes.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a) in log space so that shapes well
    below one never underflow to log(0).
    """
    shape = np.broadcast_to(shape, size)
    small = shape < 1.0
    out = np.empty(size)
    if (~small).any():
        out[~small] = np.log(rng.standard_gamma(shape[~small]))
    if small.any():
        a = shape[small]
        out[small] = np.log(rng.standard_gamma(a + 1.0)) + np.log(rng.random(a.shape)) / a
    return out


def sample_dy_array(kinds, alpha, kappa, nu, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw independent DY variates for parallel parameter arrays.

    Returns an array of shape ``(n, d)`` (or ``(d,)`` when ``n`` is None).
    Parameters are assumed valid; callers validate once up front.
    """
    kinds = np.asarray(kinds)
    alpha = np.asarray(alpha, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    nu = np.asarray(nu, dtype=float)
    size = kinds.shape if n is None else (n,) + kinds.shape
    out = np.empty(size)
    for kind in DyKind:
        cols = kinds == kind
        if not cols.any():
            continue
        a, k, v = alpha[cols], kappa[cols], nu[cols]
        sub = out[..., cols].shape
        if kind is DyKind.GAUSSIAN:
            draws = a / (2 * k) + rng.standard_normal(sub) / np.sqrt(2 * k)
        elif kind is DyKind.LOG_GAMMA:
            draws = _log_gamma_variates(rng, a, sub) - np.log(k)
        elif kind is DyKind.LOGIT_BETA:
            # logit(X / (X + Y)) = log X - log Y for independent gammas
            draws = _log_gamma_variates(rng, a, sub) - _log_gamma_variates(rng, k - a, sub)
        else:
            d = 2 * k - 1
            draws = rng.standard_t(np.broadcast_to(d, sub)) * np.sqrt(v / d)
        out[..., cols] = draws
    return out


def log_normalizer_array(kinds, alpha, kappa, nu) -> np.ndarray:
    """log N(alpha, kappa) so that N * exp(alpha*y - kappa*psi(y)) integrates to one."""
    kinds = np.asarray(kinds)
    alpha = np.asarray(alpha, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    nu = np.asarray(nu, dtype=float)
    out = np.empty(kinds.shape)
    m = kinds == DyKind.GAUSSIAN
    out[m] = 0.5 * np.log(kappa[m] / np.pi) - alpha[m] ** 2 / (4 * kappa[m])
    m = kinds == DyKind.LOG_GAMMA
    out[m] = alpha[m] * np.log(kappa[m]) - special.gammaln(alpha[m])
    m = kinds == DyKind.LOGIT_BETA
    out[m] = -special.betaln(alpha[m], kappa[m] - alpha[m])
    m = kinds == DyKind.STUDENT_T
    out[m] = special.gammaln(kappa[m]) - special.gammaln(kappa[m] - 0.5) - 0.5 * np.log(nu[m] * np.pi)
    return out


def log_kernel_array(kinds, alpha, kappa, nu, y) -> np.ndarray:
    """Unnormalised log density ``alpha*y - kappa*psi(y)``, broadcasting over leading axes of y."""
    y = np.asarray(y, dtype=float)
    return alpha * y - kappa * psi(np.broadcast_to(kinds, y.shape), y, np.broadcast_to(nu, y.shape))


def log_density_array(kinds, alpha, kappa, nu, y) -> np.ndarray:
    return log_kernel_array(kinds, alpha, kappa, nu, y) + log_normalizer_array(kinds, alpha, kappa, nu)


def _unpack(params: DyParams):
    nu = params.family.nu if params.family.nu is not None else np.nan
    return (
        np.array([int(params.family.kind)]),
        np.array([params.alpha], dtype=float),
        np.array([params.kappa], dtype=float),
        np.array([nu], dtype=float),
    )


def dy_sample(params: DyParams, rng: np.random.Generator, size: int | None = None):
    """Draw from DY(alpha, kappa; psi). Returns a float, or an array when ``size`` is given."""
    draws = sample_dy_array(*_unpack(params), rng, n=size)
    return float(draws[0]) if size is None else draws[:, 0]


def dy_log_density(params: DyParams, y):
    """Exact log density, normalising constant included."""
    out = log_density_array(*_unpack(params), np.asarray(y, dtype=float)[..., None])[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def dy_posterior_update(prior: DyParams, z: float, b: float) -> DyParams:
    """Conjugate update ``(alpha, kappa) -> (alpha + z, kappa + b)``.

    ``z`` is the observed sufficient statistic on the data scale (already
    multiplied by 1/sigma^2 for Gaussian data) and ``b`` the matching
    log-partition weight: 1/(2 sigma^2) Gaussian, 1 Poisson, m binomial.
    """
    kind = prior.family.kind
    if kind is DyKind.STUDENT_T:
        raise InvalidParamsError("Student-t DY has no exponential-family likelihood to update with")
    if not b > 0:
        raise InvalidParamsError(f"b must be positive, got {b}")
    if kind is DyKind.LOG_GAMMA and (z < 0 or z != math.floor(z)):
        raise InvalidParamsError(f"Poisson count must be a nonnegative integer, got {z}")
    if kind is DyKind.LOGIT_BETA and (z < 0 or z > b or z != math.floor(z)):
        raise InvalidParamsError(f"binomial count must lie in 0..m, got z={z}, m={b}")
    return DyParams(prior.family, prior.alpha + z, prior.kappa + b)


def dy_mean_variance(params: DyParams) -> tuple[float, float]:
    a, k, kind = params.alpha, params.kappa, params.family.kind
    if kind is DyKind.GAUSSIAN:
        return a / (2 * k), 1 / (2 * k)
    if kind is DyKind.LOG_GAMMA:
        return float(special.digamma(a) - np.log(k)), float(special.polygamma(1, a))
    if kind is DyKind.LOGIT_BETA:
        b = k - a
        return (
            float(special.digamma(a) - special.digamma(b)),
            float(special.polygamma(1, a) + special.polygamma(1, b)),
        )
    d = 2 * k - 1
    if d <= 2:
        raise MomentsUndefinedError(f"Student-t variance needs more than 2 effective degrees of freedom, got {d}")
    return 0.0, params.family.nu / (d - 2)
