"""Exact posterior regression: simulate w, project, filter on the residual g.

Proposals are produced in fixed-size chunks. Chunk ``i`` always draws from
its own stream ``SeedSequence(seed, spawn_key=(i,))`` so results do not depend
on how many worker threads ran the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np

from .errors import ConfigError, EmptyModelError, ExhaustedError, InsufficientDrawsError
from .model import GlmmSpec, PosteriorSpec, QPrior, assemble_posterior
from .projection import apply_projection, fitted, residual_g, split_zeta

CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class EprConfig:
    """Sampler settings.

    Give either ``rate`` (keep the best fraction of ceil(B / rate) proposals)
    or ``omega`` (keep every proposal with g <= omega; ``math.inf`` keeps all).
    """

    draws: int = 100
    rate: float | None = None
    omega: float | None = None
    seed: int = 0
    workers: int = 1
    chunk_size: int | None = None
    max_proposals: int = 10**6

    def __post_init__(self):
        if self.draws < 1:
            raise ConfigError("draws must be at least 1")
        if self.rate is not None and self.omega is not None:
            raise ConfigError("set either rate or omega, not both")
        if self.rate is None and self.omega is None:
            object.__setattr__(self, "rate", 0.5)
        if self.rate is not None and not (0 < self.rate <= 1):
            raise ConfigError(f"rate must lie in (0, 1], got {self.rate}")
        if self.omega is not None and not self.omega >= 0:
            raise ConfigError(f"omega must be nonnegative, got {self.omega}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def mode(self) -> str:
        if self.omega is not None:
            return "all" if math.isinf(self.omega) else "omega"
        return "rate"


@dataclass(frozen=True)
class Draw:
    theta: Any
    xi: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    y_rep: np.ndarray
    y_hat: np.ndarray
    y_tilde: np.ndarray
    g: float


@dataclass
class DrawSet:
    """Accepted replicates stored as arrays (one row per draw).

    Observation-indexed arrays are returned in the caller's original block
    order. ``zeta`` keeps the internal kind-sorted order.
    """

    config: EprConfig
    posterior: PosteriorSpec
    g: np.ndarray
    zeta: np.ndarray
    y_rep_sorted: np.ndarray
    theta: list
    omega_used: float
    proposals_made: int
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.g.shape[0]

    def _unsort(self, a: np.ndarray) -> np.ndarray:
        out = np.empty_like(a)
        out[:, self.posterior.row_order] = a
        return out

    @cached_property
    def _parts(self):
        return split_zeta(self.posterior.op, self.zeta)

    @property
    def xi(self) -> np.ndarray:
        return self._unsort(self._parts[0])

    @property
    def beta(self) -> np.ndarray:
        return self._parts[1]

    @property
    def eta(self) -> np.ndarray:
        return self._parts[2]

    @property
    def y_rep(self) -> np.ndarray:
        return self._unsort(self.y_rep_sorted)

    @cached_property
    def _fits(self):
        y_hat, y_tilde = fitted(self.posterior.op, self.zeta)
        return self._unsort(y_hat), self._unsort(y_tilde)

    @property
    def y_hat(self) -> np.ndarray:
        return self._fits[0]

    @property
    def y_tilde(self) -> np.ndarray:
        return self._fits[1]

    @property
    def draws(self) -> list[Draw]:
        xi, y_rep, (y_hat, y_tilde) = self.xi, self.y_rep, self._fits
        return [Draw(self.theta[i], xi[i], self.beta[i], self.eta[i], y_rep[i], y_hat[i], y_tilde[i], float(self.g[i]))
                for i in range(len(self))]

    def target(self, name: str) -> np.ndarray:
        if name not in ("y", "y_rep", "y_hat", "y_tilde", "beta", "eta", "xi"):
            raise KeyError(f"unknown summary target {name!r}")
        return self.y_rep if name == "y" else getattr(self, name)


def _is_point_mass(prior) -> bool:
    return getattr(prior, "is_point_mass", False)


def _simulate_batch(post: PosteriorSpec, rng: np.random.Generator, n: int):
    thetas = [post.theta_prior(rng) for _ in range(n)]
    w_m = post.sample_w_m(rng, n)
    if _is_point_mass(post.theta_prior):
        w = post.d_builder(thetas[0]).apply(w_m)
    else:
        w = np.empty_like(w_m)
        for i, th in enumerate(thetas):
            w[i] = post.d_builder(th).apply(w_m[i])
    return thetas, w + post.shift


def simulate_w(posterior: PosteriorSpec, rng: np.random.Generator):
    """One (theta, w) with w = D(theta) w_M + shift; w[:N] is the saturated replicate."""
    thetas, w = _simulate_batch(posterior, rng, 1)
    return thetas[0], w[0]


def _chunk_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _run_chunk(post: PosteriorSpec, seed: int, index: int, size: int):
    rng = _chunk_rng(seed, index)
    thetas, w = _simulate_batch(post, rng, size)
    zeta = apply_projection(post.op, w)
    g = residual_g(post.op, w, zeta)
    return thetas, g, zeta, w[:, :post.dims[0]].copy()


def _default_chunk(post: PosteriorSpec) -> int:
    return int(max(1, min(256, CHUNK_ELEMENTS // max(1, post.dim))))


def _map_chunks(post, config, jobs):
    """Run (index, size) jobs; results come back in job order."""
    if config.workers == 1 or len(jobs) == 1:
        return [_run_chunk(post, config.seed, i, s) for i, s in jobs]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(lambda job: _run_chunk(post, config.seed, *job), jobs))


def _concat(results):
    thetas = [t for r in results for t in r[0]]
    return thetas, np.concatenate([r[1] for r in results]), np.concatenate([r[2] for r in results]), \
        np.concatenate([r[3] for r in results])


def epr_run(model: GlmmSpec | PosteriorSpec, config: EprConfig) -> DrawSet:
    """Draw ``config.draws`` accepted replicates from the (truncated) posterior."""
    if isinstance(model, GlmmSpec):
        if model.q_prior is QPrior.POINT_MASS_ZERO:
            raise ConfigError("a point mass at zero on q gives a conditional GCM that cannot be sampled "
                              "directly; evaluate it with cgcm_log_density_given_theta instead")
        if model.q_prior is QPrior.IMPROPER and config.mode != "all":
            raise ConfigError("an improper prior on q means no truncation; use omega = inf")
        post = assemble_posterior(model)
    else:
        post = model
    chunk = config.chunk_size or _default_chunk(post)
    B = config.draws
    meta = {"chunk_size": chunk, "mode": config.mode}

    if config.mode in ("rate", "all"):
        total = B if config.mode == "all" else math.ceil(B / config.rate - 1e-9)
        jobs = [(i, min(chunk, total - i * chunk)) for i in range(math.ceil(total / chunk))]
        thetas, g, zeta, y_rep = _concat(_map_chunks(post, config, jobs))
        if config.mode == "rate":
            keep = np.sort(np.argsort(g, kind="stable")[:B])
            omega = float(np.sort(g)[B - 1])
            meta["note"] = "omega is the empirical rate-quantile of g; its sampling variability is not propagated"
        else:
            keep, omega = np.arange(B), math.inf
        return DrawSet(config, post, g[keep], zeta[keep], y_rep[keep], [thetas[i] for i in keep],
                       omega, total, meta)

    # explicit omega: walk chunks in order until B are accepted
    accepted = []  # (theta, g, zeta, y_rep) slices
    n_acc, made, index = 0, 0, 0
    while n_acc < B:
        if made >= config.max_proposals:
            raise ExhaustedError(f"only {n_acc} of {B} draws accepted after {made} proposals "
                                 f"(omega={config.omega})", tries=made, accepted=n_acc)
        jobs = []
        for _ in range(config.workers):
            size = min(chunk, config.max_proposals - made - sum(s for _, s in jobs))
            if size <= 0:
                break
            jobs.append((index, size))
            index += 1
        for thetas, g, zeta, y_rep in _map_chunks(post, config, jobs):
            if n_acc >= B:
                break
            ok = np.flatnonzero(g <= config.omega)
            need = B - n_acc
            if ok.size >= need:
                ok = ok[:need]
                made += int(ok[-1]) + 1
            else:
                made += g.shape[0]
            n_acc += ok.size
            accepted.append(([thetas[i] for i in ok], g[ok], zeta[ok], y_rep[ok]))
    thetas, g, zeta, y_rep = _concat(accepted)
    meta["acceptance_rate"] = B / made
    return DrawSet(config, post, g, zeta, y_rep, thetas, float(config.omega), made, meta)


# ------------------------------------------------------------------ summaries

def summarize(draws: DrawSet, target: str = "beta", stats=("mean", "sd"),
              quantiles=(0.025, 0.5, 0.975)) -> dict[str, np.ndarray]:
    """Per-coordinate summaries of one target across accepted draws."""
    if len(draws) == 0:
        raise EmptyModelError("no draws to summarise")
    x = draws.target(target)
    out = {}
    for s in stats:
        if s == "mean":
            out["mean"] = x.mean(axis=0)
        elif s == "sd":
            out["sd"] = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
        else:
            raise KeyError(f"unknown statistic {s!r}")
    for q in quantiles:
        out[f"q{q:g}"] = np.quantile(x, q, axis=0)
    return out


@dataclass(frozen=True)
class CredibleRegion:
    center: np.ndarray
    sd: np.ndarray
    C: float

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.C * self.sd

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.C * self.sd

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.lower) & (x <= self.upper)))


def joint_credible_region(beta_draws, level: float = 0.95) -> CredibleRegion:
    """Simultaneous mean +/- C sd box holding at least ``level`` of the draws.

    C is the smallest draw-implied value: the ceil(level B)-th order statistic
    of each draw's largest standardised deviation.
    """
    x = np.asarray(beta_draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    B = x.shape[0]
    if B < 50:
        raise InsufficientDrawsError(f"need at least 50 draws for a joint region, got {B}")
    if not 0 < level <= 1:
        raise InsufficientDrawsError(f"level must lie in (0, 1], got {level}")
    center = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    dev = np.abs(x - center)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(sd > 0, dev / np.where(sd > 0, sd, 1.0), 0.0)
    stat = np.sort(t.max(axis=1))
    k = math.ceil(level * B - 1e-9)
    return CredibleRegion(center, sd, float(stat[k - 1]))
