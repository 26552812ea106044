"""Extended SAEM for two-level models.

Each iteration simulates phi with the Gibbs sampler, updates five sufficient
statistics by stochastic approximation, and applies the closed-form M-step.
The subject effect ``btilde_i = mu + b_i`` is integrated out exactly through
its Gaussian conditional law given ``phi_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    LOG2PI,
    Dataset,
    ThetaParams,
    parameter_names,
    posterior_b_moments,
    resolve_beta_name,
    safe_inv,
    theta_to_vector,
)
from .models import NLMEModel, NumericalError
from .sampler import KERNELS, ChainState, GibbsSampler, KernelConfig, subject_streams

SIGMA2_MIN = 1e-10
# per-iteration flags: variance floors that fired, and annealing adjustments
FLAG_NAMES = ("omega", "psi", "sigma2", "annealed")


class SaemDivergence(NumericalError):
    """A non-finite estimate appeared; carries the iteration and the finite trace so far."""

    def __init__(self, iteration: int, trace: np.ndarray, message: str = ""):
        super().__init__(f"non-finite estimate at SAEM iteration {iteration}. {message}".strip())
        self.iteration = iteration
        self.trace = trace


@dataclass
class SuffStats:
    """Per-subject sums ``s1`` (n x p), per-unit sums ``s2`` (K x p), the outer-product
    sums ``s3`` and ``s4`` (p x p), and the weighted residual sum of squares ``s5``.

    ``sm`` is the running sum over subjects of ``m(phi_i, theta)``, averaged with
    the same step sizes so that ``s3 - sm sm^T / n`` stays positive semi-definite.
    """

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    s4: np.ndarray
    s5: float
    sm: np.ndarray

    def blend(self, other: SuffStats, gamma: float) -> SuffStats:
        return SuffStats(
            self.s1 + gamma * (other.s1 - self.s1),
            self.s2 + gamma * (other.s2 - self.s2),
            self.s3 + gamma * (other.s3 - self.s3),
            self.s4 + gamma * (other.s4 - self.s4),
            self.s5 + gamma * (other.s5 - self.s5),
            self.sm + gamma * (other.sm - self.sm),
        )


def compute_stats(model: NLMEModel, data: Dataset, phi, theta: ThetaParams) -> SuffStats:
    """The statistics S(y, phi, theta) of one realisation of phi."""
    phi = np.asarray(phi, dtype=float)
    m = posterior_b_moments(phi, theta).m
    dev = phi - m[:, None, :]
    _, _, r = model.weighted_residuals(data, phi)
    return SuffStats(
        phi.sum(axis=1),
        phi.sum(axis=0),
        m.T @ m,
        np.einsum("ika,ikb->ab", dev, dev),
        float((r * r).sum()),
        m.sum(axis=0),
    )


def sa_update(stats: SuffStats | None, phi, theta: ThetaParams, gamma: float,
              data: Dataset, model: NLMEModel) -> SuffStats:
    """``s + gamma * (S(y, phi, theta) - s)``; ``stats=None`` starts from S itself."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("step size must lie in [0, 1]")
    new = compute_stats(model, data, phi, theta)
    if stats is None:
        return new
    return stats.blend(new, gamma)


def step_size(iteration: int, burn_in: int) -> float:
    """1 during burn-in, then ``1/(iteration - burn_in)`` (iterations are 1-based)."""
    return 1.0 if iteration <= burn_in else 1.0 / (iteration - burn_in)


def _fixed_mask(fixed_beta, param_names, K):
    mask = np.zeros((K, len(param_names)), dtype=bool)
    mask[0] = True
    for name in fixed_beta or ():
        k, j = resolve_beta_name(name, param_names, K)
        mask[k, j] = True
    return mask


MU_UPDATES = ("sa_mean", "literal")


def _subject_mean_m(stats: SuffStats, theta: ThetaParams, K: int, mu_update: str = "sa_mean"):
    """The subject-average of ``m(phi_i, theta)`` that drives the mu update, and ``V(theta)``.

    ``"literal"`` applies ``theta`` to the averaged ``s1``;
    ``"sa_mean"`` uses the averaged ``sm``. Both coincide when the step size is 1.
    """
    omega_inv, _ = safe_inv(theta.omega)
    psi_inv, _ = safe_inv(theta.psi)
    V, _ = safe_inv(omega_inv + K * psi_inv)
    V = 0.5 * (V + V.T)
    if mu_update == "sa_mean":
        M = stats.sm / stats.s1.shape[0]
    elif mu_update == "literal":
        M = V @ (psi_inv @ (stats.s1.mean(axis=0) - theta.beta.sum(axis=0)) + omega_inv @ theta.mu)
    else:
        raise ValueError(f"mu_update must be one of {MU_UPDATES}")
    return M, V


def _within_scatter(stats: SuffStats, beta, M, n):
    """``sum_ik (phi_ik - m_i - beta_k)(...)^T`` expanded in the statistics."""
    e = stats.s2 - n * M[None, :]
    cross = np.einsum("ka,kb->ab", beta, e)
    return stats.s4 - cross - cross.T + n * np.einsum("ka,kb->ab", beta, beta)


def _floor_cov(C, diagonal):
    C = 0.5 * (C + C.T)
    if diagonal:
        d = np.diag(C)
        return np.diag(np.maximum(d, 0.0)), bool(np.any(d < 0))
    w, U = np.linalg.eigh(C)
    if np.all(w >= 0):
        return C, False
    C = (U * np.maximum(w, 0.0)) @ U.T
    return 0.5 * (C + C.T), True


def m_step(stats: SuffStats, theta: ThetaParams, data: Dataset, fixed_mask=None,
           mu_update: str = "sa_mean"):
    """Closed-form maximisation of the stochastic-approximation objective.

    ``fixed_mask`` (K x p, row 0 always set) marks unit effects held at zero.
    Returns the new parameters and a dict of flags recording which floors fired.
    """
    n, K, p = data.n, data.K, theta.p
    N = data.total_obs
    diagonal = theta.covariance_structure == "diagonal"
    if fixed_mask is None:
        fixed_mask = np.zeros((K, p), dtype=bool)
        fixed_mask[0] = True
    M, V = _subject_mean_m(stats, theta, K, mu_update)
    mu = M
    d = stats.s2 / n - mu[None, :]
    beta = np.where(fixed_mask, 0.0, d)
    if not diagonal:
        # with correlated Psi, pinning some components shifts the free ones
        for k in range(1, K):
            c = fixed_mask[k]
            if c.any() and (~c).any():
                psi_cc_inv = np.linalg.pinv(theta.psi[np.ix_(c, c)])
                beta[k, ~c] = d[k, ~c] - theta.psi[np.ix_(~c, c)] @ psi_cc_inv @ d[k, c]
    beta[0] = 0.0
    omega = V + stats.s3 / n - np.outer(mu, mu)
    psi = V + _within_scatter(stats, beta, mu, n) / (n * K)
    if diagonal:
        omega, psi = np.diag(np.diag(omega)), np.diag(np.diag(psi))
    omega, f_omega = _floor_cov(omega, diagonal)
    psi, f_psi = _floor_cov(psi, diagonal)
    sigma2 = stats.s5 / N
    f_sigma = not sigma2 >= SIGMA2_MIN
    if f_sigma:
        sigma2 = SIGMA2_MIN
    flags = {"omega": f_omega, "psi": f_psi, "sigma2": f_sigma}
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(beta))
            and np.all(np.isfinite(omega)) and np.all(np.isfinite(psi))):
        raise NumericalError("M-step produced non-finite parameters")
    return theta.replace(mu=mu, beta=beta, omega=omega, psi=psi, sigma2=sigma2), flags


def anneal(theta: ThetaParams, theta_prev: ThetaParams, rate: float):
    """Limit the per-iteration shrinkage of the variances to the factor ``rate``.

    Diagonals of Omega and Psi, and sigma2, are raised to at least ``rate`` times
    their previous values; raising a diagonal keeps a covariance PSD. Returns the
    adjusted parameters and whether anything changed.
    """
    changed = False
    mats = {}
    for name in ("omega", "psi"):
        new, old = getattr(theta, name), getattr(theta_prev, name)
        d = np.maximum(np.diag(new), rate * np.diag(old))
        changed |= bool(np.any(d > np.diag(new)))
        C = new.copy()
        C[np.diag_indices_from(C)] = d
        mats[name] = C
    sigma2 = max(theta.sigma2, rate * theta_prev.sigma2)
    changed |= sigma2 > theta.sigma2
    if not changed:
        return theta, False
    return theta.replace(sigma2=sigma2, **mats), True


def sa_objective(theta: ThetaParams, stats: SuffStats, theta_prev: ThetaParams,
                 data: Dataset, mu_update: str = "sa_mean") -> float:
    """``-Lambda(theta) + <s, Phi(theta)>``: the quantity :func:`m_step` maximises.

    The log g^2 term does not depend on theta and is dropped; inverses are
    exact (no flooring) so derivatives are faithful.
    """
    n, K, p = data.n, data.K, theta.p
    N = data.total_obs
    M, V = _subject_mean_m(stats, theta_prev, K, mu_update)
    psi_inv = np.linalg.inv(theta.psi)
    omega_inv = np.linalg.inv(theta.omega)
    A = _within_scatter(stats, theta.beta, M, n)
    B = stats.s3 - n * (np.outer(M, theta.mu) + np.outer(theta.mu, M)) + n * np.outer(theta.mu, theta.mu)
    out = -0.5 * N * np.log(2 * np.pi * theta.sigma2) - 0.5 * stats.s5 / theta.sigma2
    out -= 0.5 * n * K * (p * LOG2PI + np.linalg.slogdet(theta.psi)[1] + np.trace(psi_inv @ V))
    out -= 0.5 * np.trace(psi_inv @ A)
    out -= 0.5 * n * (p * LOG2PI + np.linalg.slogdet(theta.omega)[1] + np.trace(omega_inv @ V))
    out -= 0.5 * np.trace(omega_inv @ B)
    return float(out)


def default_theta_init(data: Dataset, p: int, structure: str = "diagonal") -> ThetaParams:
    """Fallback start: ``mu = 0``, ``beta = 0``, ``Omega = Psi = 0.1 I``, ``sigma2 = var(y)/10``."""
    yv = data.y[data.mask]
    s2 = float(np.var(yv)) / 10.0 if yv.size > 1 else 1.0
    return ThetaParams(
        np.zeros(p), np.zeros((data.K, p)), 0.1 * np.eye(p), 0.1 * np.eye(p),
        max(s2, 1e-6), structure,
    )


@dataclass
class SaemConfig:
    n_iterations: int = 500
    burn_in: int = 200
    theta_init: ThetaParams | None = None
    kernel: KernelConfig = field(default_factory=KernelConfig)
    covariance_structure: str = "diagonal"
    fixed_beta: tuple[str, ...] = ()
    seed: int = 0
    mu_update: str = "sa_mean"
    keep_phi_trace: bool = False
    annealing_iterations: int | None = None
    annealing_rate: float = 0.97

    def __post_init__(self):
        if self.mu_update not in MU_UPDATES:
            raise ValueError(f"mu_update must be one of {MU_UPDATES}")
        if self.n_iterations < 1 or not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("need n_iterations >= 1 and 0 <= burn_in < n_iterations")
        self.fixed_beta = tuple(self.fixed_beta)
        if self.annealing_iterations is None:
            self.annealing_iterations = self.burn_in // 2
        if not 0 <= self.annealing_iterations <= self.burn_in:
            raise ValueError("annealing_iterations must lie in [0, burn_in]")
        if not 0 < self.annealing_rate <= 1:
            raise ValueError("annealing_rate must lie in (0, 1]")


@dataclass
class FitResult:
    """Estimates, per-iteration trace and simulation by-products of one SAEM run.

    ``loglik`` and ``fim`` are filled in by :mod:`mlsaem.inference`.
    """

    theta_hat: ThetaParams
    param_names: list[str]
    trace: np.ndarray
    acceptance: np.ndarray
    floor_flags: np.ndarray
    phi_cond_mean: np.ndarray
    phi_samples: np.ndarray
    stats: SuffStats
    model: NLMEModel
    config: SaemConfig
    fixed_mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    loglik: object = None
    fim: object = None
    tests: dict = field(default_factory=dict)
    phi_trace: np.ndarray | None = None
    data_fingerprint: str = ""

    @property
    def estimates(self) -> dict:
        return dict(zip(self.param_names, theta_to_vector(self.theta_hat)))

    @property
    def free_names(self) -> list[str]:
        """Parameter names minus unit effects held fixed at zero."""
        pn = self.model.structural.param_names
        fixed = {f"beta{k + 1}.{pn[j]}" for k, j in zip(*np.nonzero(self.fixed_mask)) if k > 0}
        return [nm for nm in self.param_names if nm not in fixed]


def conditional_phi_mean(phi_trace, burn_in: int, n_iterations: int | None = None):
    """Stochastic-approximation average of post-burn-in draws with the SAEM step sizes."""
    phi_trace = np.asarray(phi_trace, dtype=float)
    L = phi_trace.shape[0] if n_iterations is None else n_iterations
    if L <= burn_in:
        raise ValueError("need at least one post-burn-in iteration")
    avg = None
    for ell in range(burn_in + 1, L + 1):
        g = step_size(ell, burn_in)
        x = phi_trace[ell - 1]
        avg = x.copy() if avg is None else avg + g * (x - avg)
    return avg


def stabilization(trace: np.ndarray, names, window: int = 50, location_floor: float = 0.1):
    """Relative range of each trace column over the last ``window`` iterations.

    Location parameters (mu, beta) are scaled by ``max(|last|, location_floor)``
    and variances by their last value.
    """
    tail = trace[-window:]
    rng = tail.max(axis=0) - tail.min(axis=0)
    last = np.abs(tail[-1])
    floors = np.array([location_floor if nm.startswith(("mu", "beta")) else 0.0 for nm in names])
    denom = np.maximum(last, floors)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > 0, rng / denom, 0.0)
    return dict(zip(names, rel))


def run_saem(model: NLMEModel, data: Dataset, config: SaemConfig | None = None,
             callback: Callable | None = None) -> FitResult:
    """Fit by SAEM for ``config.n_iterations`` iterations.

    ``callback(iteration, stats, theta_prev, theta_new, flags)`` is invoked after
    every M-step (after any annealing adjustment, which ``flags["annealed"]``
    reports). Deterministic given ``(data, config)``.
    """
    config = config or SaemConfig()
    p, n, K = model.p, data.n, data.K
    names_p = model.structural.param_names
    structure = config.covariance_structure
    theta = config.theta_init or default_theta_init(data, p, structure)
    if theta.p != p or theta.K != K:
        raise ValueError(f"theta_init has p={theta.p}, K={theta.K}; data/model need p={p}, K={K}")
    if theta.covariance_structure != structure:
        theta = theta.replace(covariance_structure=structure)
    fixed_mask = _fixed_mask(config.fixed_beta, names_p, K)
    theta = theta.replace(beta=np.where(fixed_mask, 0.0, theta.beta))

    rngs = subject_streams(config.seed, n)
    phi0 = np.broadcast_to(theta.unit_means(), (n, K, p))
    state = ChainState.initial(model, data, phi0, theta)
    sampler = GibbsSampler(model, data, config.kernel, rngs)

    L, K1 = config.n_iterations, config.burn_in
    names = parameter_names(names_p, K, structure)
    trace = np.empty((L, len(names)))
    acceptance = np.full((L, len(KERNELS)), np.nan)
    flags_arr = np.zeros((L, len(FLAG_NAMES)), dtype=bool)
    samples = np.empty((L - K1, n, K, p))
    phi_trace = np.empty((L, n, K, p)) if config.keep_phi_trace else None
    stats = None
    phi_mean = None
    for ell in range(1, L + 1):
        rates = sampler.sweep(state, theta, ell, adapt=ell <= K1)
        gamma = step_size(ell, K1)
        try:
            stats = sa_update(stats, state.phi, theta, gamma, data, model)
            new_theta, flags = m_step(stats, theta, data, fixed_mask, config.mu_update)
            flags["annealed"] = False
            if ell <= config.annealing_iterations:
                new_theta, flags["annealed"] = anneal(new_theta, theta, config.annealing_rate)
        except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            raise SaemDivergence(ell, trace[: ell - 1].copy(), str(exc)) from exc
        if callback is not None:
            callback(ell, stats, theta, new_theta, flags)
        vec = theta_to_vector(new_theta)
        if not np.all(np.isfinite(vec)):
            raise SaemDivergence(ell, trace[: ell - 1].copy())
        trace[ell - 1] = vec
        acceptance[ell - 1] = [rates.get(k, np.nan) for k in KERNELS]
        flags_arr[ell - 1] = [flags[k] for k in FLAG_NAMES]
        if phi_trace is not None:
            phi_trace[ell - 1] = state.phi
        if ell > K1:
            samples[ell - K1 - 1] = state.phi
            phi_mean = state.phi.copy() if phi_mean is None else phi_mean + gamma * (state.phi - phi_mean)
        theta = new_theta

    M, _ = _subject_mean_m(stats, theta, K, "literal")
    diagnostics = {
        # mu-hat against the subject-mean of m(phi, theta-hat): zero at a joint fixed point
        "mu_beta_residual": float(np.max(np.abs(theta.mu - M))),
        "floored_iterations": [int(i + 1) for i in np.nonzero(flags_arr[:, :3].any(axis=1))[0]],
        "annealed_iterations": [int(i + 1) for i in np.nonzero(flags_arr[:, 3])[0]],
        "rho": sampler.rho,
        "component_scales": sampler.comp_rel.tolist(),
        "stabilization": stabilization(trace, names),
    }
    return FitResult(
        theta_hat=theta,
        param_names=names,
        trace=trace,
        acceptance=acceptance,
        floor_flags=flags_arr,
        phi_cond_mean=phi_mean,
        phi_samples=samples,
        stats=stats,
        model=model,
        config=config,
        fixed_mask=fixed_mask,
        diagnostics=diagnostics,
        phi_trace=phi_trace,
        data_fingerprint=data.fingerprint(),
    )
