"""Cross-over trial simulation and the replication harness behind bias/RMSE tables."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .core import Dataset, ThetaParams, canonical_name, parameter_names, theta_to_vector
from .inference import DEFAULT_T, attach_inference, lrt, wald_test
from .models import get_model
from .saem import SaemConfig, run_saem

DEFAULT_TIMES = (0.25, 0.5, 1.0, 2.0, 3.5, 5.0, 7.0, 9.0, 12.0, 24.0)
MAX_FAILURE_RATE = 0.05


def default_theta_true(K: int = 2) -> ThetaParams:
    """Population values of the theophylline cross-over simulation, no unit effect."""
    return ThetaParams(
        mu=[-0.73, 0.39, 4.61],
        beta=np.zeros((K, 3)),
        omega=np.diag([0.01, 0.04, 0.04]),
        psi=np.diag([0.0025, 0.01, 0.01]),
        sigma2=0.01,
    )


def default_theta_init(K: int = 2) -> ThetaParams:
    """Starting values used for simulation studies: shifted means, inflated variances."""
    return ThetaParams(
        mu=[-0.5, 0.5, 4.0],
        beta=np.zeros((K, 3)),
        omega=0.1 * np.eye(3),
        psi=0.05 * np.eye(3),
        sigma2=0.1,
    )


@dataclass(frozen=True)
class TrialDesign:
    n: int = 24
    K: int = 2
    sampling_times: tuple = DEFAULT_TIMES
    dose: float | tuple = 4.0
    structural: str = "theophylline_1cpt_oral"
    error: str = "combined"
    theta_true: ThetaParams = field(default_factory=default_theta_true)
    tau: float | None = None

    def __post_init__(self):
        t = np.asarray(self.sampling_times, dtype=float)
        if self.n < 2 or self.K < 2:
            raise ValueError("a trial needs n >= 2 subjects and K >= 2 units")
        if t.ndim != 1 or t.size < 1 or np.any(np.diff(t) <= 0) or np.any(t < 0):
            raise ValueError("sampling times must be non-negative and strictly increasing")
        object.__setattr__(self, "sampling_times", tuple(float(x) for x in t))
        model = self.model
        if self.theta_true.p != model.p or self.theta_true.K != self.K:
            raise ValueError("theta_true does not match the model dimension or K")
        if model.structural.requires_tau and self.tau is None:
            raise ValueError(f"model {self.structural!r} needs a dosing interval tau")
        if np.size(self.dose) not in (1, self.K):
            raise ValueError("dose must be a scalar or one value per unit")

    @property
    def model(self):
        return get_model(self.structural, self.error)

    @property
    def names(self) -> list[str]:
        return parameter_names(self.model.structural.param_names, self.K,
                               self.theta_true.covariance_structure)


def simulate_trial(design: TrialDesign, seed, return_phi: bool = False):
    """Simulate one trial; returns the Dataset (and the individual parameters if asked)."""
    rng = np.random.default_rng(seed)
    th = design.theta_true
    n, K, p = design.n, design.K, th.p
    times = np.broadcast_to(np.asarray(design.sampling_times), (n, K, len(design.sampling_times)))
    b = rng.multivariate_normal(np.zeros(p), th.omega, size=n, method="eigh")
    c = rng.multivariate_normal(np.zeros(p), th.psi, size=(n, K), method="eigh")
    phi = th.unit_means()[None] + b[:, None, :] + c
    dose = np.broadcast_to(np.asarray(design.dose, dtype=float), (n, K))
    tau = None if design.tau is None else np.full((n, K), float(design.tau))
    mask = np.ones(times.shape, dtype=bool)
    model = design.model
    f = model.structural.predict(times, phi, dose, tau)
    eps = rng.normal(0.0, np.sqrt(th.sigma2), size=f.shape)
    y = f + model.error.g(f) * eps
    data = Dataset(tuple(f"S{i + 1:03d}" for i in range(n)), times, y, mask, dose, tau)
    return (data, phi) if return_phi else data


@dataclass
class ReplicateOutcome:
    """What one replicate contributes to the study table."""

    index: int
    estimates: np.ndarray | None = None
    se: float = float("nan")
    wald_p: float = float("nan")
    lrt_stat: float = float("nan")
    lrt_p: float = float("nan")
    rw_acceptance: float = float("nan")
    runtime: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.estimates is not None and not self.error


@dataclass
class StudyOptions:
    """Fit and test settings applied to every replicate."""

    fit: SaemConfig = field(default_factory=lambda: SaemConfig(theta_init=default_theta_init()))
    tests: tuple[str, ...] = ("wald", "lrt")
    component: str = "beta.logAUC"
    T: int = DEFAULT_T


def replicate_seed(seed, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(r)])


def run_replicate(design: TrialDesign, options: StudyOptions, seed, r: int) -> ReplicateOutcome:
    """Simulate, fit and test replicate ``r``; failures are captured, not raised."""
    t0 = time.perf_counter()
    out = ReplicateOutcome(r)
    fit_seed, sim_seed, is_seed = replicate_seed(seed, r).spawn(3)
    try:
        data = simulate_trial(design, sim_seed)
        model = design.model
        cfg = replace(options.fit, seed=fit_seed)
        fit = run_saem(model, data, cfg)
        want_ll = "lrt" in options.tests
        attach_inference(fit, data, options.T, is_seed, loglik=want_ll, fim=True)
        out.estimates = theta_to_vector(fit.theta_hat)
        out.rw_acceptance = float(np.nanmean(fit.acceptance[cfg.burn_in:, 1]))
        name = canonical_name(options.component, model.structural.param_names, design.K)
        out.se = fit.fim.standard_errors.get(name, float("nan"))
        if "wald" in options.tests:
            out.wald_p = wald_test(fit, name).p_value
        if want_ll:
            red_cfg = replace(cfg, fixed_beta=tuple(cfg.fixed_beta) + (name,))
            reduced = run_saem(model, data, red_cfg)
            attach_inference(reduced, data, options.T, is_seed, loglik=True, fim=False)
            res = lrt(fit, reduced)
            out.lrt_stat, out.lrt_p = res.statistic, res.p_value
    except Exception as exc:  # noqa: BLE001 - recorded per replicate
        out.error = f"{type(exc).__name__}: {exc}"
        out.estimates = None
    out.runtime = time.perf_counter() - t0
    return out


def normalizers(truth, names) -> np.ndarray:
    """Denominators for relative errors: ``|theta*|``, or ``|mu*_j|`` for a zero unit effect."""
    truth = np.asarray(truth, dtype=float)
    lookup = dict(zip(names, truth))
    out = np.abs(truth).copy()
    for i, name in enumerate(names):
        if out[i] == 0 and name.startswith("beta"):
            out[i] = abs(lookup.get("mu." + name.split(".", 1)[1], 0.0))
    return out


def relative_errors(estimates, truth, scale):
    """Per-parameter relative bias and RMSE in percent over a replicate table."""
    est = np.asarray(estimates, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = (est - np.asarray(truth, dtype=float)) / np.asarray(scale, dtype=float)
    return 100.0 * rel.mean(axis=0), 100.0 * np.sqrt((rel * rel).mean(axis=0))


def rejection_summary(pvalues, level: float = 0.05) -> dict:
    """Rejection rate at ``level`` with a Clopper-Pearson 95% interval."""
    p = np.asarray(pvalues, dtype=float)
    p = p[np.isfinite(p)]
    if p.size == 0:
        return {"rate": float("nan"), "low": float("nan"), "high": float("nan"), "count": 0, "n": 0}
    k = int((p < level).sum())
    ci = sps.binomtest(k, p.size).proportion_ci(0.95, method="exact")
    return {"rate": k / p.size, "low": float(ci.low), "high": float(ci.high),
            "count": k, "n": int(p.size)}


@dataclass
class ReplicationReport:
    names: list[str]
    truth: np.ndarray
    scale: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    rejection: dict
    R: int
    n_failed: int
    seed: int
    runtime: float
    outcomes: list = field(default_factory=list, repr=False)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([o.estimates for o in self.outcomes if o.ok])

    def rows(self) -> list[dict]:
        est = self.estimates
        mean = est.mean(axis=0) if len(est) else np.full(len(self.names), np.nan)
        return [
            {"parameter": nm, "true": float(t), "normalizer": float(s),
             "mean_estimate": float(m), "rel_bias_pct": float(b), "rel_rmse_pct": float(r)}
            for nm, t, s, m, b, r in zip(self.names, self.truth, self.scale, mean, self.bias, self.rmse)
        ]

    def text_table(self) -> str:
        lines = [
            f"{'parameter':<16}{'true':>10}{'bias %':>10}{'RMSE %':>10}",
            "-" * 46,
        ]
        for row in self.rows():
            lines.append(
                f"{row['parameter']:<16}{row['true']:>10.4g}"
                f"{row['rel_bias_pct']:>10.2f}{row['rel_rmse_pct']:>10.2f}"
            )
        lines.append("")
        lines.append("relative errors divide by |true value|; zero unit effects divide by |mu|")
        for method, s in self.rejection.items():
            lines.append(
                f"{method} rejection at 5%: {100 * s['rate']:.1f}% "
                f"[{100 * s['low']:.1f}, {100 * s['high']:.1f}] ({s['count']}/{s['n']})"
            )
        lines.append(f"replicates: {self.R}, failed: {self.n_failed}, seed: {self.seed}")
        return "\n".join(lines)


def summarize_replicates(outcomes, names, truth, seed=0, runtime: float = 0.0) -> ReplicationReport:
    """Reduce per-replicate outcomes (sorted by index) to a report; pure in its inputs."""
    outcomes = sorted(outcomes, key=lambda o: o.index)
    good = [o for o in outcomes if o.ok]
    truth = np.asarray(truth, dtype=float)
    scale = normalizers(truth, names)
    if good:
        bias, rmse = relative_errors(np.array([o.estimates for o in good]), truth, scale)
    else:
        bias = rmse = np.full(len(names), np.nan)
    rejection = {}
    for method, attr in (("wald", "wald_p"), ("lrt", "lrt_p")):
        pv = [getattr(o, attr) for o in good]
        if np.isfinite(pv).any():
            rejection[method] = rejection_summary(pv)
    return ReplicationReport(
        list(names), truth, scale, bias, rmse, rejection, len(outcomes),
        len(outcomes) - len(good), int(seed), float(runtime), outcomes,
    )


class ReplicationFailure(RuntimeError):
    """Too many replicates failed; the partial report is attached."""

    def __init__(self, report: ReplicationReport):
        super().__init__(f"{report.n_failed} of {report.R} replicates failed")
        self.report = report


def replicate_study(design: TrialDesign, R: int, options: StudyOptions | None = None,
                    seed: int = 0, n_jobs: int = 1, indices=None,
                    runner: Callable | None = None) -> ReplicationReport:
    """Run ``R`` replicates (or the given ``indices``) and summarise them.

    Replicate ``r`` depends only on ``(seed, r)``. ``runner(design, options, seed, r)``
    replaces the default simulate-fit-test step when given.
    """
    if R < 2:
        raise ValueError("need at least two replicates")
    options = options or StudyOptions()
    runner = runner or run_replicate
    idx = list(range(R)) if indices is None else list(indices)
    t0 = time.perf_counter()
    if n_jobs == 1:
        outcomes = [runner(design, options, seed, r) for r in idx]
    else:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(delayed(runner)(design, options, seed, r) for r in idx)
    report = summarize_replicates(outcomes, design.names, theta_to_vector(design.theta_true),
                                  seed, time.perf_counter() - t0)
    if report.n_failed > MAX_FAILURE_RATE * report.R:
        raise ReplicationFailure(report)
    return report
