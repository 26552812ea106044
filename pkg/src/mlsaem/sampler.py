"""Metropolis-Hastings-within-Gibbs simulation of the individual parameters.

Three kernels target p(phi_i | y_i; theta) subject by subject: an independence
sampler proposing from the population prior, a joint random walk scaled by
``rho * Gamma``, and a sweep of ``K*p`` scalar random walks. All kernels are
vectorised across subjects; each subject draws from its own generator, so a
subject's chain depends only on its own data and stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, ThetaParams, floored_eigh, gamma_matrix, psd_sqrt
from .models import NLMEModel

KERNELS = ("prior", "rw_full", "rw_component")


@dataclass
class KernelConfig:
    """Kernel schedule and random-walk scaling.

    ``n_sweeps`` gives the number of passes of (prior, full random walk,
    componentwise random walk) per SAEM iteration, run in that order.
    """

    n_sweeps: tuple[int, int, int] = (2, 2, 2)
    rho: float = 0.1
    target_acceptance: float = 0.30
    adapt_during_burnin: bool = True
    adapt_rate: float = 10.0

    def __post_init__(self):
        self.n_sweeps = tuple(int(s) for s in self.n_sweeps)
        if len(self.n_sweeps) != 3 or min(self.n_sweeps) < 0:
            raise ValueError("n_sweeps needs three non-negative counts")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must lie in (0, 1)")


@dataclass
class ChainState:
    """Current chain value with cached unit log-likelihoods and acceptance counters."""

    phi: np.ndarray
    loglik: np.ndarray
    accepted: dict = field(default_factory=lambda: {k: 0 for k in KERNELS})
    proposed: dict = field(default_factory=lambda: {k: 0 for k in KERNELS})

    @classmethod
    def initial(cls, model: NLMEModel, data: Dataset, phi, theta: ThetaParams) -> ChainState:
        phi = np.array(phi, dtype=float)
        return cls(phi, model.unit_logliks(data, phi, theta.sigma2))

    def reset_counters(self):
        self.accepted = {k: 0 for k in KERNELS}
        self.proposed = {k: 0 for k in KERNELS}

    def acceptance(self, kernel: str) -> float:
        n = self.proposed[kernel]
        return self.accepted[kernel] / n if n else float("nan")


@dataclass(frozen=True)
class PriorGeometry:
    """Prior N(mean, Gamma) of the stacked ``pK`` vector and the factors the kernels need."""

    mean: np.ndarray
    root: np.ndarray
    precision: np.ndarray

    @classmethod
    def from_theta(cls, theta: ThetaParams) -> PriorGeometry:
        G = gamma_matrix(theta, theta.K)
        w, U = floored_eigh(G)
        return cls(
            theta.unit_means().reshape(-1),
            psd_sqrt(G),
            (U / w) @ U.T,
        )

    def log_density(self, flat):
        """Unnormalised log prior density of stacked parameters ``(..., pK)``."""
        x = flat - self.mean
        return -0.5 * np.einsum("...a,ab,...b->...", x, self.precision, x)


def subject_streams(seed, n: int) -> list[np.random.Generator]:
    """One independent generator per subject derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def _normals(rngs, size):
    return np.stack([r.standard_normal(size) for r in rngs])


def _uniforms(rngs, size=None):
    return np.stack([r.random(size) for r in rngs])


def _accept(log_alpha, u):
    # NaN or -inf log ratios never accept
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.log(u) < np.nan_to_num(log_alpha, nan=-np.inf)


def log_unit_lik(model: NLMEModel, times, y, phi_ik, sigma2, dose, tau=None) -> float:
    """Log-likelihood of one (subject, unit) block of observations."""
    times = np.asarray(times, dtype=float)
    data = Dataset(
        ("_",),
        np.vstack([times, times])[None],
        np.vstack([y, y])[None],
        np.ones((1, 2, times.size), dtype=bool),
        np.full((1, 2), dose),
        None if tau is None else np.full((1, 2), tau),
    )
    phi = np.broadcast_to(np.asarray(phi_ik, dtype=float), (1, 2, model.p))
    return float(model.unit_logliks(data, phi, sigma2)[0, 0])


def mh_step_prior(state: ChainState, theta: ThetaParams, geom: PriorGeometry,
                  model: NLMEModel, data: Dataset, rngs):
    """Independence step with the population prior as proposal.

    Prior and proposal densities cancel, so the acceptance ratio is the ratio
    of data likelihoods.
    """
    n, K, p = state.phi.shape
    z = _normals(rngs, K * p)
    u = _uniforms(rngs)
    cand = (geom.mean + z @ geom.root.T).reshape(n, K, p)
    ll_c = model.unit_logliks(data, cand, theta.sigma2)
    acc = _accept(ll_c.sum(1) - state.loglik.sum(1), u)
    state.phi = np.where(acc[:, None, None], cand, state.phi)
    state.loglik = np.where(acc[:, None], ll_c, state.loglik)
    state.accepted["prior"] += int(acc.sum())
    state.proposed["prior"] += n
    return acc


def mh_step_rw_full(state: ChainState, theta: ThetaParams, geom: PriorGeometry,
                    model: NLMEModel, data: Dataset, rho: float, rngs):
    """Joint random walk ``N(phi_i, rho * Gamma)``; symmetric, so the ratio is the target ratio."""
    n, K, p = state.phi.shape
    z = _normals(rngs, K * p)
    u = _uniforms(rngs)
    flat = state.phi.reshape(n, -1)
    cand_flat = flat + np.sqrt(rho) * (z @ geom.root.T)
    cand = cand_flat.reshape(n, K, p)
    ll_c = model.unit_logliks(data, cand, theta.sigma2)
    log_alpha = (
        ll_c.sum(1) - state.loglik.sum(1)
        + geom.log_density(cand_flat) - geom.log_density(flat)
    )
    acc = _accept(log_alpha, u)
    state.phi = np.where(acc[:, None, None], cand, state.phi)
    state.loglik = np.where(acc[:, None], ll_c, state.loglik)
    state.accepted["rw_full"] += int(acc.sum())
    state.proposed["rw_full"] += n
    return acc


def mh_step_rw_component(state: ChainState, theta: ThetaParams, geom: PriorGeometry,
                         model: NLMEModel, data: Dataset, scales, rngs):
    """Gibbs sweep of scalar random walks over the ``K*p`` coordinates of each phi_i.

    Returns the per-coordinate acceptance fraction across subjects.
    """
    n, K, p = state.phi.shape
    scales = np.asarray(scales, dtype=float)
    z = _normals(rngs, K * p) * scales
    u = _uniforms(rngs, K * p)
    P = geom.precision
    rates = np.empty(K * p)
    for j in range(K * p):
        k, c = divmod(j, p)
        x = state.phi.reshape(n, -1) - geom.mean
        delta = z[:, j]
        d_prior = -(delta * (x @ P[:, j]) + 0.5 * delta * delta * P[j, j])
        cand = state.phi[:, k].copy()
        cand[:, c] += delta
        ll_c = model.unit_logliks(data, cand, theta.sigma2, unit=k)
        acc = _accept(ll_c - state.loglik[:, k] + d_prior, u[:, j])
        phi = state.phi.copy()
        phi[:, k] = np.where(acc[:, None], cand, state.phi[:, k])
        state.phi = phi
        loglik = state.loglik.copy()
        loglik[:, k] = np.where(acc, ll_c, state.loglik[:, k])
        state.loglik = loglik
        rates[j] = acc.mean()
    state.accepted["rw_component"] += int(round(rates.sum() * n))
    state.proposed["rw_component"] += n * K * p
    return rates


MAX_LOG_STEP = 1.0


def _log_step(observed, iteration, adapt_rate, target):
    step = adapt_rate / max(iteration, 1) * (observed - target)
    return np.clip(step, -MAX_LOG_STEP, MAX_LOG_STEP)


def adapt_scale(rho: float, observed_acceptance: float, iteration: int,
                adapt_rate: float = 10.0, target: float = 0.30) -> float:
    """Robbins-Monro step ``log rho += adapt_rate/iteration * (observed - target)``.

    A single step never changes ``rho`` by more than a factor ``e``.
    """
    if not np.isfinite(observed_acceptance):
        return rho
    return float(rho * np.exp(_log_step(observed_acceptance, iteration, adapt_rate, target)))


class GibbsSampler:
    """Runs the kernel schedule once per SAEM iteration and adapts the scales."""

    def __init__(self, model: NLMEModel, data: Dataset, config: KernelConfig, rngs):
        self.model = model
        self.data = data
        self.config = config
        self.rngs = rngs
        self.rho = config.rho
        # componentwise scales are multipliers of sqrt(diag Gamma)
        self.comp_rel = np.full(data.K * model.p, config.rho)

    def sweep(self, state: ChainState, theta: ThetaParams, iteration: int, adapt: bool):
        """One SAEM simulation step; returns acceptance rates per kernel."""
        geom = PriorGeometry.from_theta(theta)
        sd = np.sqrt(np.clip(np.diag(gamma_matrix(theta, theta.K)), 0.0, None))
        n_prior, n_rw, n_comp = self.config.n_sweeps
        rates = {}
        if n_prior:
            acc = [mh_step_prior(state, theta, geom, self.model, self.data, self.rngs)
                   for _ in range(n_prior)]
            rates["prior"] = float(np.mean(acc))
        if n_rw:
            acc = [mh_step_rw_full(state, theta, geom, self.model, self.data, self.rho, self.rngs)
                   for _ in range(n_rw)]
            rates["rw_full"] = float(np.mean(acc))
        if n_comp:
            comp = np.mean(
                [mh_step_rw_component(state, theta, geom, self.model, self.data,
                                      self.comp_rel * sd, self.rngs)
                 for _ in range(n_comp)],
                axis=0,
            )
            rates["rw_component"] = float(comp.mean())
        if adapt and self.config.adapt_during_burnin:
            cfg = self.config
            if n_rw:
                self.rho = adapt_scale(self.rho, rates["rw_full"], iteration,
                                       cfg.adapt_rate, cfg.target_acceptance)
            if n_comp:
                self.comp_rel = self.comp_rel * np.exp(
                    _log_step(comp, iteration, cfg.adapt_rate, cfg.target_acceptance)
                )
        return rates
