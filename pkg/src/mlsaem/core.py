"""Parameters, datasets and the closed-form Gaussian quantities of the two-level model.

Individual parameters decompose as ``phi_ik = mu + beta_k + b_i + c_ik`` with
``b_i ~ N(0, Omega)`` and ``c_ik ~ N(0, Psi)``. Everything here lives on the
sampling (log) scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .models import NLMEModel, NumericalError

EIG_FLOOR_REL = 1e-10
LOG2PI = np.log(2.0 * np.pi)


def floored_eigh(M: np.ndarray, rel: float = EIG_FLOOR_REL):
    """Eigen-decomposition of a symmetric matrix with eigenvalues floored at ``rel*trace/p``."""
    M = 0.5 * (M + M.T)
    p = M.shape[0]
    w, U = np.linalg.eigh(M)
    if not np.all(np.isfinite(w)):
        raise NumericalError("covariance matrix has non-finite entries")
    tr = max(float(np.trace(M)), 0.0)
    eps = rel * tr / p if tr > 0 else rel
    return np.maximum(w, eps), U


def safe_inv(M: np.ndarray):
    """Inverse and log-determinant of a covariance after eigenvalue flooring."""
    w, U = floored_eigh(M)
    return (U / w) @ U.T, float(np.sum(np.log(w)))


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """A matrix ``A`` with ``A @ A.T == M`` for a symmetric PSD ``M`` (negatives clipped)."""
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class ThetaParams:
    """Population parameters ``(mu, beta, Omega, Psi, sigma2)``.

    ``beta`` is ``K x p`` with the first row fixed at zero. With
    ``covariance_structure="diagonal"`` both covariances must be diagonal.
    """

    mu: np.ndarray
    beta: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    sigma2: float
    covariance_structure: str = "diagonal"

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        p = mu.size
        beta = np.array(self.beta, dtype=float).reshape(-1, p)
        omega = np.array(self.omega, dtype=float).reshape(p, p)
        psi = np.array(self.psi, dtype=float).reshape(p, p)
        for arr in (mu, beta, omega, psi):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.covariance_structure not in ("diagonal", "full"):
            raise ValueError("covariance_structure must be 'diagonal' or 'full'")
        if beta.shape[0] < 1 or np.any(beta[0] != 0.0):
            raise ValueError("beta row 1 must be exactly zero")
        if not self.sigma2 > 0 or not np.isfinite(self.sigma2):
            raise ValueError("sigma2 must be positive and finite")
        for name, C in (("omega", omega), ("psi", psi)):
            if not np.all(np.isfinite(C)):
                raise ValueError(f"{name} has non-finite entries")
            if not np.array_equal(C, C.T):
                raise ValueError(f"{name} must be symmetric")
            scale = max(1.0, float(np.abs(C).max()))
            if np.linalg.eigvalsh(C).min() < -1e-12 * scale:
                raise ValueError(f"{name} must be positive semi-definite")
            if self.covariance_structure == "diagonal" and np.any(C != np.diag(np.diag(C))):
                raise ValueError(f"{name} must be diagonal for diagonal structure")

    @property
    def p(self) -> int:
        return self.mu.size

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    def unit_means(self) -> np.ndarray:
        """``K x p`` array of ``mu + beta_k``."""
        return self.mu[None, :] + self.beta

    def replace(self, **changes) -> ThetaParams:
        kw = dict(
            mu=self.mu,
            beta=self.beta,
            omega=self.omega,
            psi=self.psi,
            sigma2=self.sigma2,
            covariance_structure=self.covariance_structure,
        )
        kw.update(changes)
        return ThetaParams(**kw)


def parameter_names(param_names, K: int, structure: str = "diagonal") -> list[str]:
    """Flat parameter labels in trace/report order.

    ``mu.X``; ``beta{k}.X`` for k=2..K; ``omega2.X`` / ``psi2.X`` for variances
    and ``omega.X.Y`` / ``psi.X.Y`` for covariances (full structure); ``sigma2``.
    """
    p = len(param_names)
    names = [f"mu.{n}" for n in param_names]
    names += [f"beta{k}.{n}" for k in range(2, K + 1) for n in param_names]
    for sym in ("omega", "psi"):
        names += [f"{sym}2.{n}" for n in param_names]
        if structure == "full":
            names += [
                f"{sym}.{param_names[a]}.{param_names[b]}"
                for a in range(p)
                for b in range(a + 1, p)
            ]
    names.append("sigma2")
    return names


def theta_to_vector(theta: ThetaParams) -> np.ndarray:
    """Flatten in the order of :func:`parameter_names`."""
    p = theta.p
    parts = [theta.mu, theta.beta[1:].reshape(-1)]
    iu = np.triu_indices(p, 1)
    for C in (theta.omega, theta.psi):
        parts.append(np.diag(C))
        if theta.covariance_structure == "full":
            parts.append(C[iu])
    parts.append([theta.sigma2])
    return np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in parts])


def theta_from_vector(vec, p: int, K: int, structure: str = "diagonal") -> ThetaParams:
    vec = np.asarray(vec, dtype=float)
    pos = 0

    def take(m):
        nonlocal pos
        out = vec[pos : pos + m]
        pos += m
        return out

    mu = take(p)
    beta = np.vstack([np.zeros(p), take((K - 1) * p).reshape(K - 1, p)])
    mats = []
    iu = np.triu_indices(p, 1)
    for _ in range(2):
        C = np.diag(take(p))
        if structure == "full":
            C[iu] = take(len(iu[0]))
            C = C + np.triu(C, 1).T
        mats.append(C)
    sigma2 = take(1)[0]
    return ThetaParams(mu, beta, mats[0], mats[1], sigma2, structure)


def resolve_beta_name(name: str, param_names, K: int) -> tuple[int, int]:
    """Map ``beta{k}.X`` (or ``beta.X`` when K == 2) to a zero-based ``(k, j)``."""
    head, _, pname = name.partition(".")
    if not head.startswith("beta") or pname not in param_names:
        raise KeyError(f"{name!r} is not a unit-effect parameter")
    suffix = head[4:]
    if suffix == "":
        if K != 2:
            raise KeyError(f"{name!r} is ambiguous with K={K}; use beta<k>.{pname}")
        k = 2
    else:
        k = int(suffix)
    if not 2 <= k <= K:
        raise KeyError(f"unit index in {name!r} must be between 2 and {K}")
    return k - 1, list(param_names).index(pname)


def canonical_name(name: str, param_names, K: int) -> str:
    if name.startswith("beta"):
        k, j = resolve_beta_name(name, param_names, K)
        return f"beta{k + 1}.{param_names[j]}"
    return name


@dataclass(frozen=True)
class Dataset:
    """Observations on a padded ``n x K x J`` grid.

    ``mask`` flags real observations; ``dose`` and ``tau`` are per (subject, unit),
    with ``tau`` NaN when the model does not use it.
    """

    subject_ids: tuple
    times: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    dose: np.ndarray
    tau: np.ndarray = field(default=None)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        dose = np.asarray(self.dose, dtype=float)
        tau = (
            np.full(dose.shape, np.nan)
            if self.tau is None
            else np.asarray(self.tau, dtype=float)
        )
        if times.ndim != 3 or times.shape != y.shape or times.shape != mask.shape:
            raise ValueError("times, y and mask must share an n x K x J shape")
        n, K, _ = times.shape
        if dose.shape != (n, K) or tau.shape != (n, K):
            raise ValueError("dose and tau must be n x K")
        if K < 2:
            raise ValueError("every subject needs at least two units")
        if len(self.subject_ids) != n:
            raise ValueError("one subject id per subject is required")
        counts = mask.sum(axis=2)
        if np.any(counts < 1):
            raise ValueError("every (subject, unit) needs at least one observation")
        # real observations are packed first along the last axis
        if np.any(mask[..., 1:] & ~mask[..., :-1]):
            raise ValueError("mask must be left-packed")
        t = np.where(mask, times, np.inf)
        if np.any(np.where(mask, times, 0.0) < 0):
            raise ValueError("times must be non-negative")
        if np.any((np.diff(t, axis=2) <= 0) & mask[..., 1:]):
            raise ValueError("times within a unit must be strictly increasing")
        times = np.where(mask, times, 0.0)
        y = np.where(mask, y, 0.0)
        for arr in (times, y, mask, dose, tau):
            arr.setflags(write=False)
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "dose", dose)
        object.__setattr__(self, "tau", tau)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def K(self) -> int:
        return self.times.shape[1]

    @property
    def n_obs(self) -> np.ndarray:
        """``n x K`` counts n_ik."""
        return self.mask.sum(axis=2)

    @property
    def total_obs(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_records(cls, records) -> Dataset:
        """Build from ``[(subject_id, [(dose, tau, times, ys), ...per unit]), ...]``."""
        n = len(records)
        K = len(records[0][1])
        J = max(len(u[2]) for _, units in records for u in units)
        times = np.zeros((n, K, J))
        y = np.zeros((n, K, J))
        mask = np.zeros((n, K, J), dtype=bool)
        dose = np.zeros((n, K))
        tau = np.full((n, K), np.nan)
        for i, (_, units) in enumerate(records):
            if len(units) != K:
                raise ValueError("every subject must have the same number of units")
            for k, (d, tk, ts, ys) in enumerate(units):
                m = len(ts)
                times[i, k, :m] = ts
                y[i, k, :m] = ys
                mask[i, k, :m] = True
                dose[i, k] = d
                tau[i, k] = np.nan if tk is None else tk
        return cls(tuple(sid for sid, _ in records), times, y, mask, dose, tau)

    def fingerprint(self) -> str:
        """SHA-256 digest of the observations, identifying the dataset across runs."""
        h = hashlib.sha256()
        h.update(json.dumps([str(s) for s in self.subject_ids]).encode())
        for arr in (self.times, self.y, self.mask, self.dose, self.tau):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()

    def subset(self, idx) -> Dataset:
        idx = np.atleast_1d(idx)
        return Dataset(
            tuple(self.subject_ids[i] for i in idx),
            self.times[idx],
            self.y[idx],
            self.mask[idx],
            self.dose[idx],
            self.tau[idx],
        )


@dataclass(frozen=True)
class PosteriorBMoments:
    """Conditional law N(m_i, V) of the shifted subject effect given phi_i."""

    m: np.ndarray
    V: np.ndarray


def gamma_matrix(theta: ThetaParams, K: int) -> np.ndarray:
    """Covariance of the stacked ``pK`` vector ``phi_i``: Omega off-diagonal, Omega+Psi on the diagonal blocks."""
    if K < 2:
        raise ValueError("K must be at least 2")
    return np.kron(np.ones((K, K)), theta.omega) + np.kron(np.eye(K), theta.psi)


def posterior_b_moments(phi, theta: ThetaParams) -> PosteriorBMoments:
    """``V = (Omega^-1 + K Psi^-1)^-1`` and ``m_i = V (Psi^-1 sum_k (phi_ik - beta_k) + Omega^-1 mu)``."""
    phi = np.asarray(phi, dtype=float)
    K = phi.shape[-2]
    omega_inv, _ = safe_inv(theta.omega)
    psi_inv, _ = safe_inv(theta.psi)
    V_inv = omega_inv + K * psi_inv
    V, _ = safe_inv(V_inv)
    V = 0.5 * (V + V.T)
    centred = (phi - theta.beta).sum(axis=-2)
    m = (centred @ psi_inv.T + omega_inv @ theta.mu) @ V.T
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite posterior mean of the subject effect")
    return PosteriorBMoments(m, V)


def _quad(x, P):
    return np.einsum("...a,ab,...b->...", x, P, x)


def residual_terms(model: NLMEModel, data: Dataset, phi, sigma2: float):
    """The two observation sums of the complete log-likelihood: ``(-1/2 sum log(2 pi sigma2 g^2), -1/2 sum r^2/sigma2)``."""
    _, g, r = model.weighted_residuals(data, phi)
    with np.errstate(divide="ignore"):
        logs = np.where(data.mask, np.log(2.0 * np.pi * sigma2 * g * g), 0.0)
    return -0.5 * float(logs.sum()), -0.5 * float((r * r).sum()) / sigma2


def complete_loglik(model: NLMEModel, data: Dataset, phi, btilde, theta: ThetaParams) -> float:
    """log p(y, phi, btilde; theta) of the complete data."""
    phi = np.asarray(phi, dtype=float)
    btilde = np.asarray(btilde, dtype=float)
    n, K, p = phi.shape
    psi_inv, psi_logdet = safe_inv(theta.psi)
    omega_inv, omega_logdet = safe_inv(theta.omega)
    a, b = residual_terms(model, data, phi, theta.sigma2)
    dc = phi - btilde[:, None, :] - theta.beta[None, :, :]
    db = btilde - theta.mu
    within = -0.5 * n * K * (p * LOG2PI + psi_logdet) - 0.5 * _quad(dc, psi_inv).sum()
    between = -0.5 * n * (p * LOG2PI + omega_logdet) - 0.5 * _quad(db, omega_inv).sum()
    return a + b + within + between


def conditional_R(
    model: NLMEModel, data: Dataset, phi, theta: ThetaParams, theta_prev: ThetaParams
) -> float:
    """Expectation of :func:`complete_loglik` over ``btilde ~ N(m(phi, theta_prev), V(theta_prev))``.

    The matrix terms ``Psi^-1/2 V Psi^-1/2`` are taken as traces, and the
    residual sum enters with a negative sign as in the complete likelihood.
    """
    phi = np.asarray(phi, dtype=float)
    n, K, p = phi.shape
    post = posterior_b_moments(phi, theta_prev)
    psi_inv, psi_logdet = safe_inv(theta.psi)
    omega_inv, omega_logdet = safe_inv(theta.omega)
    a, b = residual_terms(model, data, phi, theta.sigma2)
    dc = phi - post.m[:, None, :] - theta.beta[None, :, :]
    db = post.m - theta.mu
    within = (
        -0.5 * n * K * (p * LOG2PI + psi_logdet)
        - 0.5 * n * K * np.trace(psi_inv @ post.V)
        - 0.5 * _quad(dc, psi_inv).sum()
    )
    between = (
        -0.5 * n * (p * LOG2PI + omega_logdet)
        - 0.5 * n * np.trace(omega_inv @ post.V)
        - 0.5 * _quad(db, omega_inv).sum()
    )
    return a + b + within + between
