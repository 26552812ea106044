"""Likelihood, Fisher information and tests for a fitted two-level model.

The observed-data likelihood is estimated by importance sampling with a
Gaussian instrumental law per subject built from the post-burn-in chain.
Standard errors come from the Fisher information of the linear mixed model
obtained by linearising f around the conditional means of phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from scipy.special import logsumexp

from .core import Dataset, ThetaParams, canonical_name, gamma_matrix, safe_inv
from .models import NLMEModel, NumericalError

IS_INFLATION = 1.2
DEFAULT_T = 5000
FD_STEP = 1e-5


@dataclass(frozen=True)
class LoglikEstimate:
    value: float
    mc_standard_error: float
    T: int
    per_subject: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass
class FimResult:
    """Linearised Fisher information over the free parameters in their chart.

    ``chart`` maps each row name to ``"natural"`` or ``"log"``;
    ``standard_errors`` are always on the natural scale, keyed by parameter name.
    Parameters at a variance boundary are listed in ``boundary`` and carry no SE.
    """

    matrix: np.ndarray
    names: list[str]
    chart: dict
    standard_errors: dict
    condition_number: float
    boundary: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class TestResult:
    method: str
    component: str
    statistic: float
    p_value: float
    df: int = 1
    note: str = ""


def instrumental_moments(phi_samples, inflation: float = IS_INFLATION):
    """Per-subject Gaussian approximation ``(mean (n, d), cov (n, d, d))`` of the chain draws.

    The empirical covariance is multiplied by ``inflation``.
    """
    phi_samples = np.asarray(phi_samples, dtype=float)
    S, n = phi_samples.shape[:2]
    if S < 2:
        raise ValueError("need at least two draws per subject")
    flat = phi_samples.reshape(S, n, -1)
    mean = flat.mean(axis=0)
    dev = flat - mean
    cov = np.einsum("sna,snb->nab", dev, dev) / (S - 1)
    return mean, inflation * cov


def _subject_cholesky(covs):
    chols = []
    for i, C in enumerate(covs):
        w = np.linalg.eigvalsh(C)
        if not np.all(np.isfinite(w)) or w.min() <= 1e-14 * max(w.max(), 1e-300):
            raise NumericalError(f"degenerate instrumental covariance for subject {i}")
        chols.append(np.linalg.cholesky(C))
    return np.stack(chols)


def is_loglik_from_moments(model: NLMEModel, data: Dataset, theta: ThetaParams,
                           means, covs, T: int = DEFAULT_T, rng=None,
                           chunk: int = 2000) -> LoglikEstimate:
    """Importance-sampling estimate of ``log p(y; theta)`` with Gaussian instrumentals."""
    if T < 100:
        raise ValueError("T must be at least 100")
    rng = np.random.default_rng(rng)
    n, K, p = data.n, data.K, model.p
    d = K * p
    L = _subject_cholesky(np.asarray(covs, dtype=float))
    log_det_q = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    G_inv, G_logdet = safe_inv(gamma_matrix(theta, K))
    prior_mean = theta.unit_means().reshape(-1)
    const = -0.5 * d * np.log(2.0 * np.pi)
    logw = np.empty((T, n))
    for start in range(0, T, chunk):
        m = min(chunk, T - start)
        z = rng.standard_normal((m, n, d))
        phi = means + np.einsum("nab,tnb->tna", L, z)
        log_q = const - log_det_q - 0.5 * np.einsum("tna,tna->tn", z, z)
        x = phi - prior_mean
        log_prior = const - 0.5 * G_logdet - 0.5 * np.einsum("tna,ab,tnb->tn", x, G_inv, x)
        ll = model.unit_logliks(data, phi.reshape(m, n, K, p), theta.sigma2).sum(axis=-1)
        logw[start : start + m] = ll + log_prior - log_q
    per_subject = logsumexp(logw, axis=0) - np.log(T)
    w = np.exp(logw - logw.max(axis=0))
    rel_var = w.var(axis=0, ddof=1) / (T * w.mean(axis=0) ** 2)
    value = float(per_subject.sum())
    if not np.isfinite(value):
        raise NumericalError("importance-sampling log-likelihood is not finite")
    return LoglikEstimate(value, float(np.sqrt(rel_var.sum())), T, per_subject)


def importance_sampling_loglik(model: NLMEModel, data: Dataset, theta: ThetaParams,
                               phi_samples, T: int = DEFAULT_T, rng=None,
                               inflation: float = IS_INFLATION) -> LoglikEstimate:
    """Importance-sampling ``log p(y; theta)`` with instrumentals fitted to ``phi_samples``.

    ``phi_samples`` is ``(S, n, K, p)``: S posterior draws per subject.
    """
    means, covs = instrumental_moments(phi_samples, inflation)
    return is_loglik_from_moments(model, data, theta, means, covs, T, rng)


def prediction_jacobian(model: NLMEModel, data: Dataset, phi, h: float = FD_STEP):
    """Central-difference derivatives of predictions w.r.t. each parameter: ``(n, K, J, p)``."""
    phi = np.asarray(phi, dtype=float)
    cols = []
    for c in range(model.p):
        e = np.zeros(model.p)
        e[c] = h
        cols.append((model.predict(data, phi + e) - model.predict(data, phi - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _variance_params(theta: ThetaParams, pnames, boundary_rtol):
    """``(name, which, a, b)`` for each free covariance parameter, and the boundary list."""
    p = theta.p
    diag_scale = max(np.abs(np.diag(theta.omega)).max(), np.abs(np.diag(theta.psi)).max(), 1e-300)
    params, boundary = [], []
    for sym, C in (("omega", theta.omega), ("psi", theta.psi)):
        for a in range(p):
            name = f"{sym}2.{pnames[a]}"
            if C[a, a] <= boundary_rtol * diag_scale:
                boundary.append(name)
            else:
                params.append((name, sym, a, a))
        if theta.covariance_structure == "full":
            for a in range(p):
                for b in range(a + 1, p):
                    params.append((f"{sym}.{pnames[a]}.{pnames[b]}", sym, a, b))
    params.append(("sigma2", "sigma2", 0, 0))
    return params, boundary


def linearized_fim(model: NLMEModel, data: Dataset, theta: ThetaParams, phi_cond_mean,
                   fixed_mask=None, h: float = FD_STEP, boundary_rtol: float = 1e-6) -> FimResult:
    """Fisher information of the model linearised around ``phi_cond_mean`` (n x K x p).

    Variances use a log chart under diagonal structure; SEs are mapped back to the
    natural scale by the delta method.
    """
    n, K, p = data.n, data.K, model.p
    pnames = model.structural.param_names
    phi_bar = np.asarray(phi_cond_mean, dtype=float)
    if not np.all(np.isfinite(phi_bar)):
        raise ValueError("phi_cond_mean must be finite")
    if fixed_mask is None:
        fixed_mask = np.zeros((K, p), dtype=bool)
        fixed_mask[0] = True
    log_chart = theta.covariance_structure == "diagonal"

    mean_params = [(f"mu.{pnames[j]}", None, j) for j in range(p)]
    mean_params += [
        (f"beta{k + 1}.{pnames[j]}", k, j)
        for k in range(1, K) for j in range(p) if not fixed_mask[k, j]
    ]
    var_params, boundary = _variance_params(theta, pnames, boundary_rtol)
    names = [m[0] for m in mean_params] + [v[0] for v in var_params]

    # mean direction of each location parameter in the stacked pK space
    mean_dirs = np.zeros((len(mean_params), K * p))
    for r, (_, k, j) in enumerate(mean_params):
        if k is None:
            mean_dirs[r, j::p] = 1.0
        else:
            mean_dirs[r, k * p + j] = 1.0
    # covariance direction of each variance parameter in the pK x pK space
    cov_dirs, scales = [], []
    for name, sym, a, b in var_params:
        E = np.zeros((p, p))
        E[a, b] = E[b, a] = 1.0
        if sym == "omega":
            cov_dirs.append(np.kron(np.ones((K, K)), E))
            value = theta.omega[a, b]
        elif sym == "psi":
            cov_dirs.append(np.kron(np.eye(K), E))
            value = theta.psi[a, b]
        else:
            cov_dirs.append(None)
            value = theta.sigma2
        scales.append(value if (log_chart and a == b) else 1.0)

    Gam = gamma_matrix(theta, K)
    f0 = model.predict(data, phi_bar)
    g2 = model.error.g(f0) ** 2
    jac = prediction_jacobian(model, data, phi_bar, h)
    nm, nv = len(mean_params), len(var_params)
    F = np.zeros((nm + nv, nm + nv))
    for i in range(n):
        rows = []
        for k in range(K):
            sel = data.mask[i, k]
            block = np.zeros((sel.sum(), K * p))
            block[:, k * p : (k + 1) * p] = jac[i, k][sel]
            rows.append(block)
        Z = np.vstack(rows)
        w = np.concatenate([g2[i, k][data.mask[i, k]] for k in range(K)])
        Sigma = Z @ Gam @ Z.T + theta.sigma2 * np.diag(w)
        try:
            c = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise NumericalError(f"singular marginal covariance for subject {i}") from None
        Sinv = np.linalg.inv(c).T @ np.linalg.inv(c)
        Dm = Z @ mean_dirs.T
        F[:nm, :nm] += Dm.T @ Sinv @ Dm
        A = [
            Sinv @ (np.diag(w) if D is None else Z @ D @ Z.T) * s
            for D, s in zip(cov_dirs, scales)
        ]
        for a in range(nv):
            for b in range(a, nv):
                val = 0.5 * np.sum(A[a] * A[b].T)
                F[nm + a, nm + b] += val
                if a != b:
                    F[nm + b, nm + a] += val
    F = 0.5 * (F + F.T)
    chart = {nm_: "natural" for nm_ in names}
    for (name, _, a, b), s in zip(var_params, scales):
        if log_chart and a == b:
            chart[name] = "log"
    try:
        cov = np.linalg.inv(F)
        cond = float(np.linalg.cond(F))
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(F)
        cond = float("inf")
    se_chart = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    ses = {name: float(se_chart[r]) for r, name in enumerate(names)}
    # delta method back to the natural scale for log-chart variances
    for r, ((name, _, a, b), s) in enumerate(zip(var_params, scales)):
        ses[name] = float(se_chart[nm + r] * s)
    return FimResult(F, names, chart, ses, cond, boundary)


def wald_statistic(estimate: float, se: float):
    """``W = (estimate/se)^2`` and its chi-square(1) upper-tail p-value."""
    if not se > 0:
        raise ValueError("standard error must be positive")
    W = (estimate / se) ** 2
    return float(W), float(sps.chi2.sf(W, 1))


def wald_test(fit, component: str) -> TestResult:
    """Wald test of a unit effect being zero, using the fit's FIM standard errors."""
    pnames = fit.model.structural.param_names
    name = canonical_name(component, pnames, fit.theta_hat.K)
    if fit.fim is None or name not in fit.fim.standard_errors:
        raise KeyError(f"no standard error available for {name}")
    W, pval = wald_statistic(fit.estimates[name], fit.fim.standard_errors[name])
    return TestResult("wald", name, W, pval)


def fit_signature(fit) -> dict:
    """What two fits must share to be compared by a likelihood-ratio test."""
    if isinstance(fit, dict):
        return {
            "structural": fit["model"]["structural"],
            "error": fit["model"]["error"],
            "covariance_structure": fit["covariance_structure"],
            "data": fit["data"]["fingerprint"],
            "fixed": set(fit["fixed_beta"]),
        }
    pn = fit.model.structural.param_names
    return {
        "structural": fit.model.structural.name,
        "error": fit.model.error.kind,
        "covariance_structure": fit.theta_hat.covariance_structure,
        "data": fit.data_fingerprint,
        "fixed": {f"beta{k + 1}.{pn[j]}" for k, j in zip(*np.nonzero(fit.fixed_mask)) if k > 0},
    }


def _loglik_of(fit) -> LoglikEstimate:
    if isinstance(fit, dict):
        ll = fit.get("loglik")
        if ll is None:
            raise ValueError("fit has no log-likelihood estimate")
        return LoglikEstimate(ll["value"], ll["se"], ll["T"])
    if fit.loglik is None:
        raise ValueError("fit has no log-likelihood estimate")
    return fit.loglik


def lrt(fit_full, fit_reduced, mc_sigmas: float = 3.0) -> TestResult:
    """Likelihood-ratio test of a reduced fit (extra unit effects pinned at 0) against a full fit.

    Accepts fitted results or loaded fit.json dictionaries. A note is attached
    when the statistic lies within ``mc_sigmas`` Monte Carlo SEs of the 5% threshold.
    """
    a, b = fit_signature(fit_full), fit_signature(fit_reduced)
    for key in ("structural", "error", "covariance_structure", "data"):
        if a[key] != b[key]:
            raise ValueError(f"fits are not nested: {key} differs")
    extra = b["fixed"] - a["fixed"]
    if not a["fixed"] <= b["fixed"] or not extra:
        raise ValueError("fits are not nested: reduced must pin a superset of unit effects")
    l_full, l_red = _loglik_of(fit_full), _loglik_of(fit_reduced)
    if l_full.T != l_red.T:
        raise ValueError("both log-likelihoods must use the same number of samples T")
    df = len(extra)
    stat = 2.0 * (l_full.value - l_red.value)
    pval = float(sps.chi2.sf(stat, df)) if stat > 0 else 1.0
    se = 2.0 * np.hypot(l_full.mc_standard_error, l_red.mc_standard_error)
    note = ""
    if abs(stat - sps.chi2.isf(0.05, df)) < mc_sigmas * se:
        note = "statistic within Monte Carlo error of the 5% threshold"
    return TestResult("lrt", ",".join(sorted(extra)), float(stat), pval, df, note)


def attach_inference(fit, data: Dataset, T: int = DEFAULT_T, seed=0,
                     loglik: bool = True, fim: bool = True):
    """Fill ``fit.loglik`` and ``fit.fim`` in place and return the fit."""
    if fim:
        fit.fim = linearized_fim(fit.model, data, fit.theta_hat, fit.phi_cond_mean, fit.fixed_mask)
    if loglik:
        fit.loglik = importance_sampling_loglik(
            fit.model, data, fit.theta_hat, fit.phi_samples, T, np.random.default_rng(seed)
        )
    return fit
