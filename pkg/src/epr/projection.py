"""Least-squares projection zeta = (H'H)^{-1} H' w for the EPR design matrix.

H stacks four block rows over the unknowns (xi, beta, eta)::

    [ I_N  X    G   ]
    [ 0    I_p  0   ]
    [ 0    0    I_r ]
    [ I_N  0    0   ]

so ``w`` is partitioned as (w_e: N, w_beta: p, w_eta: r, w_xi: N). The
production path never forms an N x N matrix: it keeps r x r and p x p factors
plus an N x p helper, and applies F1^{-1} = I/2 + G W^{-1} G' / 4 with
W = L - G'G/2 and L = G'G + I.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import CapExceededError, DimensionMismatchError, SingularBlockError

COND_WARN = 1e12
DENSE_CAP = 2000


class IdentityG:
    """Marker for G = I_N (so r = N); enables the scalar fast path."""

    def __repr__(self):
        return "IdentityG()"


IDENTITY = IdentityG()


def spd_inverse(m: np.ndarray, name: str) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix through its Cholesky factor."""
    m = np.asarray(m, dtype=float)
    k = m.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    try:
        c, low = sla.cho_factor(m, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError(name, str(exc)) from None
    diag = np.diag(c)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise SingularBlockError(name, "non-positive pivot")
    # cheap condition estimate from the Cholesky diagonal; exact check only when it looks bad
    if (diag.max() / diag.min()) ** 2 > COND_WARN and np.linalg.cond(m) > COND_WARN:
        warnings.warn(f"factor {name!r} is ill-conditioned", RuntimeWarning, stacklevel=3)
    inv = sla.cho_solve((c, low), np.eye(k))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class ProjectionOperator:
    X: np.ndarray
    G: np.ndarray | IdentityG
    L_inv: np.ndarray | float
    W_inv: np.ndarray | float
    F2: np.ndarray
    F22: np.ndarray
    GtX: np.ndarray
    F1inv_B12: np.ndarray
    dims: tuple[int, int, int]

    @property
    def identity_g(self) -> bool:
        return isinstance(self.G, IdentityG)

    @property
    def n_obs(self) -> int:
        return self.dims[0]

    @property
    def w_dim(self) -> int:
        n, p, r = self.dims
        return 2 * n + p + r

    @property
    def zeta_dim(self) -> int:
        n, p, r = self.dims
        return n + p + r

    # helpers that hide the identity-G special case
    def g_t(self, v: np.ndarray) -> np.ndarray:
        """Rows of v (length N) mapped to G'v (length r)."""
        return v if self.identity_g else v @ self.G

    def g_apply(self, u: np.ndarray) -> np.ndarray:
        """Rows of u (length r) mapped to G u (length N)."""
        return u if self.identity_g else u @ self.G.T

    def l_inv(self, u: np.ndarray) -> np.ndarray:
        return u * self.L_inv if self.identity_g else u @ self.L_inv

    def f1_inv(self, v: np.ndarray) -> np.ndarray:
        if self.identity_g:
            return v * (0.5 + 0.25 * self.W_inv)
        return 0.5 * v + 0.25 * ((v @ self.G) @ self.W_inv) @ self.G.T

    def dense_g(self) -> np.ndarray:
        return np.eye(self.dims[0]) if self.identity_g else self.G


def _check_design(X, G):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatchError("X must be a 2-d array")
    n = X.shape[0]
    if isinstance(G, IdentityG):
        return X, G, n, X.shape[1], n
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != n:
        raise DimensionMismatchError(f"G must have {n} rows, got shape {G.shape}")
    return X, G, n, X.shape[1], G.shape[1]


def build_projection(X, G) -> ProjectionOperator:
    """Precompute the factors used by :func:`apply_projection`.

    ``G`` may be an (N, r) array, an (N, 0) array for no random effects, or
    :data:`IDENTITY`.
    """
    X, G, n, p, r = _check_design(X, G)
    if isinstance(G, IdentityG):
        L_inv, W_inv = 0.5, 2.0 / 3.0
        GtX = X.copy()
        XtGLGtX = 0.5 * (X.T @ X)
        F1inv_B12 = (0.5 + 0.25 * W_inv) * (X - 0.5 * X)
    else:
        GtG = G.T @ G
        L = GtG + np.eye(r)
        L_inv = spd_inverse(L, "L")
        W_inv = spd_inverse(L - 0.5 * GtG, "L - G'G/2")
        GtX = G.T @ X
        LGtX = L_inv @ GtX
        XtGLGtX = GtX.T @ LGtX
        B12 = X - G @ LGtX
        F1inv_B12 = 0.5 * B12 + 0.25 * G @ (W_inv @ (G.T @ B12))
    F2 = X.T @ X + np.eye(p) - XtGLGtX
    if isinstance(G, IdentityG):
        B12 = 0.5 * X
    schur = F2 - B12.T @ F1inv_B12
    F22 = spd_inverse(0.5 * (schur + schur.T), "F2 - B12'F1^{-1}B12")
    return ProjectionOperator(X, G, L_inv, W_inv, F2, F22, GtX, F1inv_B12, (n, p, r))


def split_w(op: ProjectionOperator, w: np.ndarray):
    n, p, r = op.dims
    return w[..., :n], w[..., n:n + p], w[..., n + p:n + p + r], w[..., n + p + r:]


def apply_projection(op: ProjectionOperator, w) -> np.ndarray:
    """Return (xi, beta, eta) stacked, for one w or a batch of rows."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != op.w_dim:
        raise DimensionMismatchError(f"w must have length {op.w_dim}, got {w.shape[-1]}")
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    we, wb, wh, wx = split_w(op, w2)
    X = op.X
    P = op.g_t(we) + wh
    LP = op.l_inv(P)
    vN = we + wx - op.g_apply(LP)
    vp = we @ X + wb - LP @ op.GtX
    a = op.f1_inv(vN)
    # a @ B12 without storing B12: B12 = X - G L^{-1} G'X
    aB12 = a @ X - op.l_inv(op.g_t(a)) @ op.GtX
    beta = (vp - aB12) @ op.F22
    xi = a - beta @ op.F1inv_B12.T
    eta = op.l_inv(P - op.g_t(xi) - beta @ op.GtX.T)
    zeta = np.concatenate([xi, beta, eta], axis=1)
    return zeta[0] if single else zeta


def split_zeta(op: ProjectionOperator, zeta: np.ndarray):
    n, p, r = op.dims
    return zeta[..., :n], zeta[..., n:n + p], zeta[..., n + p:]


def fitted(op: ProjectionOperator, zeta) -> tuple[np.ndarray, np.ndarray]:
    """Return (y_hat, y_tilde) = (X beta + G eta + xi, X beta + G eta)."""
    xi, beta, eta = split_zeta(op, np.asarray(zeta, dtype=float))
    y_tilde = beta @ op.X.T + op.g_apply(eta)
    return y_tilde + xi, y_tilde


def residual_g(op: ProjectionOperator, w, zeta):
    """Squared residual between the saturated replicate and its fitted value."""
    w = np.asarray(w, dtype=float)
    y_hat, _ = fitted(op, zeta)
    resid = w[..., :op.n_obs] - y_hat
    out = np.einsum("...i,...i->...", resid, resid)
    return float(out) if np.ndim(out) == 0 else out


def build_h(X, G) -> np.ndarray:
    X, G, n, p, r = _check_design(X, G)
    Gd = np.eye(n) if isinstance(G, IdentityG) else G
    H = np.zeros((2 * n + p + r, n + p + r))
    H[:n, :n] = np.eye(n)
    H[:n, n:n + p] = X
    H[:n, n + p:] = Gd
    H[n:n + p, n:n + p] = np.eye(p)
    H[n + p:n + p + r, n + p:] = np.eye(r)
    H[n + p + r:, :n] = np.eye(n)
    return H


def hth_dense(X, G) -> np.ndarray:
    """H'H in its displayed block form."""
    X, G, n, p, r = _check_design(X, G)
    Gd = np.eye(n) if isinstance(G, IdentityG) else G
    B = np.hstack([X, Gd])
    out = np.empty((n + p + r, n + p + r))
    out[:n, :n] = 2 * np.eye(n)
    out[:n, n:] = B
    out[n:, :n] = B.T
    out[n:, n:] = B.T @ B + np.eye(p + r)
    return out


def _block_inverse_2x2(A_inv, B, C, D, name):
    """Inverse of [[A, B], [C, D]] given A^{-1}, via the Schur complement of A."""
    S_inv = np.linalg.inv(D - C @ A_inv @ B) if D.shape[0] else np.zeros((0, 0))
    if not np.all(np.isfinite(S_inv)):
        raise SingularBlockError(name)
    AB = A_inv @ B
    CA = C @ A_inv
    top = np.hstack([A_inv + AB @ S_inv @ CA, -AB @ S_inv])
    bottom = np.hstack([-S_inv @ CA, S_inv])
    return np.vstack([top, bottom])


def dense_block_inverse(X, G, cap: int = DENSE_CAP) -> np.ndarray:
    """(H'H)^{-1} assembled from nested 2x2 block identities.

    The outer split uses A = 2 I_N and B = (X, G); the inner Schur complement
    is split again into its (p, r) blocks. Only p x p and r x r matrices are
    inverted.
    """
    X, G, n, p, r = _check_design(X, G)
    if n + p + r > cap:
        raise CapExceededError(f"dense inverse of size {n + p + r} exceeds cap {cap}")
    Gd = np.eye(n) if isinstance(G, IdentityG) else G
    a_star = 0.5 * X.T @ X + np.eye(p)
    b_star = 0.5 * X.T @ Gd
    c_star = b_star.T
    d_star = 0.5 * Gd.T @ Gd + np.eye(r)
    a_star_inv = spd_inverse(a_star, "A*")
    try:
        schur_inv = _block_inverse_2x2(a_star_inv, b_star, c_star, d_star, "D* - C*A*^{-1}B*")
    except np.linalg.LinAlgError:
        raise SingularBlockError("D* - C*A*^{-1}B*") from None
    B = np.hstack([X, Gd])
    A_inv = 0.5 * np.eye(n)
    AB = 0.5 * B
    out = np.empty((n + p + r, n + p + r))
    out[:n, :n] = A_inv + AB @ schur_inv @ AB.T
    out[:n, n:] = -AB @ schur_inv
    out[n:, :n] = out[:n, n:].T
    out[n:, n:] = schur_inv
    return out


def explicit_q(X, G, cap: int = 400) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of col(H). Test-sized only."""
    H = build_h(X, G)
    if H.shape[0] > cap:
        raise CapExceededError(f"explicit Q needs a {H.shape[0]}-row SVD; cap is {cap}")
    return sla.null_space(H.T)
