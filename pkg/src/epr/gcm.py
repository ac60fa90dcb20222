"""Generalized conjugate multivariate (GCM) distribution.

A GCM draw is ``y = mu + V (D(theta) w_M + shift)`` where ``theta ~ pi`` and
the coordinates of ``w_M`` are independent DY variables with per-coordinate
families. ``shift`` is a fixed offset added after scaling; it lets the
posterior place observed Student-t data on the raw scale without touching D.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np
import scipy.linalg as sla

from . import dy
from .errors import DimensionMismatchError, ExhaustedError, NumericError, SingularBlockError
from .projection import ProjectionOperator, apply_projection, build_h, explicit_q, hth_dense


class BlockDiagonal:
    """Block-diagonal square operator.

    Each block is either a positive scalar times an identity of a given size
    or an explicit square matrix (typically a lower Cholesky factor).
    """

    def __init__(self, blocks):
        self.blocks = []
        for b in blocks:
            if isinstance(b, tuple):
                size, scale = int(b[0]), float(b[1])
                if scale == 0 or not np.isfinite(scale):
                    raise SingularBlockError("D(theta)", f"scalar block {scale}")
                self.blocks.append((size, scale))
            else:
                m = np.atleast_2d(np.asarray(b, dtype=float))
                if m.shape[0] != m.shape[1]:
                    raise DimensionMismatchError("D(theta) blocks must be square")
                self.blocks.append((m.shape[0], m))
        self.dim = sum(s for s, _ in self.blocks)

    @classmethod
    def identity(cls, n: int) -> BlockDiagonal:
        return cls([(n, 1.0)])

    def _map(self, x, fn):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"expected length {self.dim}, got {x.shape[-1]}")
        out = np.empty_like(x)
        i = 0
        for size, b in self.blocks:
            out[..., i:i + size] = fn(x[..., i:i + size], b)
            i += size
        return out

    def apply(self, x):
        return self._map(x, lambda v, b: v * b if isinstance(b, float) else v @ b.T)

    def solve(self, x):
        def one(v, b):
            if isinstance(b, float):
                return v / b
            if np.allclose(b, np.tril(b)):
                return sla.solve_triangular(b, v.T, lower=True).T
            return np.linalg.solve(b, v.T).T
        return self._map(x, one)

    def logabsdet(self) -> float:
        total = 0.0
        for size, b in self.blocks:
            if isinstance(b, float):
                total += size * np.log(abs(b))
            elif size:
                sign, ld = np.linalg.slogdet(b)
                if sign == 0:
                    raise SingularBlockError("D(theta)")
                total += ld
        return total

    def dense(self) -> np.ndarray:
        return sla.block_diag(*[b * np.eye(s) if isinstance(b, float) else b for s, b in self.blocks])


class LinearMap(Protocol):
    dim: int

    def forward(self, x: np.ndarray) -> np.ndarray: ...  # V x

    def inverse(self, y: np.ndarray) -> np.ndarray: ...  # V^{-1} y

    def logabsdet_inverse(self) -> float: ...


class DenseMap:
    """V given through a dense V^{-1}."""

    def __init__(self, v_inverse):
        self.v_inverse = np.asarray(v_inverse, dtype=float)
        if self.v_inverse.ndim != 2 or self.v_inverse.shape[0] != self.v_inverse.shape[1]:
            raise DimensionMismatchError("V^{-1} must be square")
        self.dim = self.v_inverse.shape[0]
        self._lu = sla.lu_factor(self.v_inverse, check_finite=True)
        if np.any(np.diag(self._lu[0]) == 0):
            raise SingularBlockError("V^{-1}")

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return sla.lu_solve(self._lu, x.T).T

    def inverse(self, y):
        return np.asarray(y, dtype=float) @ self.v_inverse.T

    def logabsdet_inverse(self) -> float:
        return float(np.sum(np.log(np.abs(np.diag(self._lu[0])))))

    def columns(self, start: int, stop: int) -> np.ndarray:
        return self.v_inverse[:, start:stop]


class HQMap:
    """V^{-1} = (H, Q) with H the EPR design and Q an orthonormal complement.

    The forward map sends w to ((H'H)^{-1}H'w, Q'w) using the matrix-free
    projection for the first part. Q is formed only when a caller needs q or
    the inverse map, and only for small problems.
    """

    def __init__(self, op: ProjectionOperator):
        self.op = op
        self.dim = op.w_dim
        self._q = None

    @property
    def Q(self) -> np.ndarray:
        if self._q is None:
            self._q = explicit_q(self.op.X, self.op.G)
        return self._q

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([apply_projection(self.op, x), x @ self.Q], axis=-1)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        k = self.op.zeta_dim
        H = build_h(self.op.X, self.op.G)
        return y[..., :k] @ H.T + y[..., k:] @ self.Q.T

    def logabsdet_inverse(self) -> float:
        # |det(H, Q)| = det(H'H)^{1/2} because Q is orthonormal and orthogonal to H
        sign, ld = np.linalg.slogdet(hth_dense(self.op.X, self.op.G))
        return 0.5 * ld

    def columns(self, start: int, stop: int) -> np.ndarray:
        return np.hstack([build_h(self.op.X, self.op.G), self.Q])[:, start:stop]


def _point_mass_none(rng):
    return None


@dataclass(frozen=True)
class GcmSpec:
    alpha: np.ndarray
    kappa: np.ndarray
    kinds: np.ndarray
    nu: np.ndarray
    v: Any  # LinearMap
    d_builder: Callable[[Any], BlockDiagonal]
    theta_prior: Callable[[np.random.Generator], Any] = _point_mass_none
    mu: np.ndarray | None = None
    shift: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        kinds = np.asarray(self.kinds, dtype=int)
        nu = np.asarray(self.nu, dtype=float)
        n = alpha.shape[0]
        if kappa.shape != (n,) or kinds.shape != (n,) or nu.shape != (n,):
            raise DimensionMismatchError("alpha, kappa, kinds and nu must share one length")
        dy.validate_arrays(kinds, alpha, kappa, nu)
        mu = np.zeros(n) if self.mu is None else np.asarray(self.mu, dtype=float)
        shift = np.zeros(n) if self.shift is None else np.asarray(self.shift, dtype=float)
        if mu.shape != (n,) or shift.shape != (n,):
            raise DimensionMismatchError("mu and shift must match alpha in length")
        if self.v.dim != n:
            raise DimensionMismatchError(f"V has dimension {self.v.dim}, expected {n}")
        for name, val in [("alpha", alpha), ("kappa", kappa), ("kinds", kinds), ("nu", nu), ("mu", mu), ("shift", shift)]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.alpha.shape[0]

    def sample_w_m(self, rng, n: int | None = None) -> np.ndarray:
        return dy.sample_dy_array(self.kinds, self.alpha, self.kappa, self.nu, rng, n)


def gcm_sample(spec: GcmSpec, rng: np.random.Generator):
    """Draw (theta, y) by composition: theta from its prior, then the linear transform."""
    theta = spec.theta_prior(rng)
    d = spec.d_builder(theta)
    w = d.apply(spec.sample_w_m(rng)) + spec.shift
    return theta, spec.mu + spec.v.forward(w)


def latent_coordinates(spec: GcmSpec, y, theta) -> np.ndarray:
    """Invert the transform: w_M = D^{-1}(V^{-1}(y - mu) - shift)."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != spec.dim:
        raise DimensionMismatchError(f"y must have length {spec.dim}, got {y.shape[-1]}")
    return spec.d_builder(theta).solve(spec.v.inverse(y - spec.mu) - spec.shift)


def gcm_log_density_given_theta(spec: GcmSpec, y, theta) -> float:
    """Change-of-variables log density of y at a fixed theta."""
    d = spec.d_builder(theta)
    if d.dim != spec.dim:
        raise DimensionMismatchError("D(theta) has the wrong dimension")
    u = latent_coordinates(spec, y, theta)
    val = dy.log_density_array(spec.kinds, spec.alpha, spec.kappa, spec.nu, u).sum(axis=-1)
    out = val - d.logabsdet() + spec.v.logabsdet_inverse()
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TruncationRegion:
    predicate: Callable[[np.ndarray], bool]
    description: str = ""

    @classmethod
    def everything(cls) -> TruncationRegion:
        return cls(lambda y: True, "whole space")


def truncated_gcm_sample(spec: GcmSpec, region: TruncationRegion, rng: np.random.Generator,
                         max_tries: int = 10**6, return_tries: bool = False):
    """Rejection sampler for the GCM restricted to ``region``."""
    for tries in range(1, max_tries + 1):
        theta, y = gcm_sample(spec, rng)
        if region.predicate(y):
            return (theta, y, tries) if return_tries else (theta, y)
    raise ExhaustedError(f"no draw landed in region after {max_tries} tries "
                         f"({region.description or 'unnamed region'})", tries=max_tries, accepted=0)


def cgcm_log_density_given_theta(spec: GcmSpec, y1, y2, theta) -> float:
    """Unnormalised log density of the leading block y1 given the trailing block y2.

    With V^{-1} = (H, Q) split by the lengths of y1 and y2, this evaluates the
    latent coordinates at H y1 + Q y2 and drops everything constant in y1.
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    k = y1.shape[-1]
    if k + y2.shape[-1] != spec.dim:
        raise DimensionMismatchError(f"partition {k} + {y2.shape[-1]} does not match dimension {spec.dim}")
    d = spec.d_builder(theta)
    v_inv_mu = spec.v.inverse(spec.mu)
    arg = y1 @ spec.v.columns(0, k).T + y2 @ spec.v.columns(k, spec.dim).T - v_inv_mu - spec.shift
    u = d.solve(arg)
    val = dy.log_kernel_array(spec.kinds, spec.alpha, spec.kappa, spec.nu, u).sum(axis=-1)
    if not np.all(np.isfinite(val)):
        raise NumericError("conditional density evaluated outside the support")
    out = val - d.logabsdet()
    return float(out) if np.ndim(out) == 0 else out
