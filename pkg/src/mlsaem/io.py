"""File formats: dataset CSV, JSON run configuration, fit results, traces and reports.

Every file written here goes through a temporary file and an atomic rename.
JSON outputs carry a ``format_version`` field.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .core import Dataset, ThetaParams, canonical_name, theta_from_vector
from .inference import DEFAULT_T, instrumental_moments
from .models import STRUCTURAL_MODELS, get_model
from .sampler import KERNELS, KernelConfig
from .saem import MU_UPDATES, FitResult, SaemConfig
from .trial import DEFAULT_TIMES, StudyOptions, TrialDesign, default_theta_true

FORMAT_VERSION = 1
DATA_COLUMNS = ("subject_id", "unit", "time", "dv", "dose", "tau")
REQUIRED_COLUMNS = ("subject_id", "unit", "time", "dv", "dose")


class DatasetFormatError(ValueError):
    """A dataset file that cannot be parsed; the message names the offending line."""


class ConfigError(ValueError):
    """A configuration that fails schema or semantic validation."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    """Shortest round-trip text for a float; empty for NaN."""
    x = float(x)
    if np.isnan(x):
        return ""
    return repr(x)


def _sort_key(label: str):
    # numeric labels sort numerically, others lexically after them
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _parse_float(value, column, line, allow_blank=False):
    value = (value or "").strip()
    if value == "" and allow_blank:
        return float("nan")
    try:
        out = float(value)
    except ValueError:
        raise DatasetFormatError(f"line {line}: column {column!r} is not a number: {value!r}") from None
    if not np.isfinite(out):
        raise DatasetFormatError(f"line {line}: column {column!r} must be finite")
    return out


def parse_dataset(text: str, source: str = "<string>") -> Dataset:
    """Parse dataset CSV text; see :func:`read_dataset`."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DatasetFormatError(f"{source}: line 1: missing columns {missing}")
    blocks: dict = {}
    seen: dict = {}
    for row in reader:
        line = reader.line_num
        sid = (row["subject_id"] or "").strip()
        unit = (row["unit"] or "").strip()
        if not sid or not unit:
            raise DatasetFormatError(f"{source}: line {line}: subject_id and unit are required")
        t = _parse_float(row["time"], "time", line)
        dv = _parse_float(row["dv"], "dv", line)
        dose = _parse_float(row["dose"], "dose", line)
        tau = _parse_float(row.get("tau"), "tau", line, allow_blank=True)
        key = (sid, unit, t)
        if key in seen:
            raise DatasetFormatError(
                f"{source}: line {line}: duplicate (subject, unit, time) row, first seen on line {seen[key]}"
            )
        seen[key] = line
        block = blocks.setdefault((sid, unit), {"dose": dose, "tau": tau, "t": [], "y": [], "line": line})
        if block["t"] and t <= block["t"][-1]:
            raise DatasetFormatError(
                f"{source}: line {line}: times for subject {sid} unit {unit} are not increasing"
            )
        same_tau = (np.isnan(tau) and np.isnan(block["tau"])) or tau == block["tau"]
        if dose != block["dose"] or not same_tau:
            raise DatasetFormatError(
                f"{source}: line {line}: dose and tau must be constant within subject {sid} unit {unit}"
            )
        block["t"].append(t)
        block["y"].append(dv)
    if not blocks:
        raise DatasetFormatError(f"{source}: no observations")
    subjects = sorted({s for s, _ in blocks}, key=_sort_key)
    units_of = {s: sorted((u for s2, u in blocks if s2 == s), key=_sort_key) for s in subjects}
    K = len(units_of[subjects[0]])
    for s in subjects:
        if len(units_of[s]) != K:
            first = min(blocks[(s, u)]["line"] for u in units_of[s])
            raise DatasetFormatError(
                f"{source}: line {first}: subject {s} has {len(units_of[s])} units, expected {K}"
            )
    records = [
        (s, [(blocks[(s, u)]["dose"], blocks[(s, u)]["tau"], blocks[(s, u)]["t"], blocks[(s, u)]["y"])
             for u in units_of[s]])
        for s in subjects
    ]
    try:
        return Dataset.from_records(records)
    except ValueError as exc:
        raise DatasetFormatError(f"{source}: {exc}") from None


def read_dataset(path) -> Dataset:
    """Read a long-format CSV with columns subject_id, unit, time, dv, dose[, tau].

    Subjects and units are ordered by label (numerically when possible); rows within
    a (subject, unit) block must have increasing times.
    """
    path = Path(path)
    return parse_dataset(path.read_text(), str(path))


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATA_COLUMNS)
    for i, sid in enumerate(data.subject_ids):
        for k in range(data.K):
            for j in np.nonzero(data.mask[i, k])[0]:
                w.writerow([sid, k + 1, _fmt(data.times[i, k, j]), _fmt(data.y[i, k, j]),
                            _fmt(data.dose[i, k]), _fmt(data.tau[i, k])])
    return buf.getvalue()


def write_dataset(path, data: Dataset) -> None:
    """Write the canonical CSV form: units numbered from 1, shortest float text."""
    atomic_write_text(path, dataset_to_csv(data))


# ---------------------------------------------------------------- configuration

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_THETA_SCHEMA = {
    "type": "object",
    "properties": {
        "mu": _VEC,
        "beta": _MAT,
        "omega2": _VEC,
        "psi2": _VEC,
        "omega": _MAT,
        "psi": _MAT,
        "sigma2": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["mu", "sigma2"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mlsaem run configuration",
    "type": "object",
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "model": {
            "type": "object",
            "properties": {
                "structural": {"type": "string"},
                "error": {"enum": ["constant", "proportional", "combined"]},
            },
            "required": ["structural"],
            "additionalProperties": False,
        },
        "covariance_structure": {"enum": ["diagonal", "full"]},
        "saem": {
            "type": "object",
            "properties": {
                "n_iterations": {"type": "integer", "minimum": 1},
                "burn_in": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "mu_update": {"enum": list(MU_UPDATES)},
                "annealing_iterations": {"type": "integer", "minimum": 0},
                "annealing_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "kernel": {
            "type": "object",
            "properties": {
                "n_sweeps": {"type": "array", "items": {"type": "integer", "minimum": 0},
                             "minItems": 3, "maxItems": 3},
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "target_acceptance": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adapt_during_burnin": {"type": "boolean"},
                "adapt_rate": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "theta_init": _THETA_SCHEMA,
        "fixed_beta": {"type": "array", "items": {"type": "string"}},
        "inference": {
            "type": "object",
            "properties": {
                "T": {"type": "integer", "minimum": 100},
                "fim": {"type": "boolean"},
                "loglik": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "tests": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {"method": {"const": "wald"}, "component": {"type": "string"}},
                        "required": ["method", "component"],
                        "additionalProperties": False,
                    },
                },
            },
            "additionalProperties": False,
        },
        "design": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "K": {"type": "integer", "minimum": 2},
                "sampling_times": _VEC,
                "dose": {"oneOf": [_NUM, _VEC]},
                "tau": {"type": ["number", "null"]},
                "theta_true": _THETA_SCHEMA,
            },
            "additionalProperties": False,
        },
        "study": {
            "type": "object",
            "properties": {
                "tests": {"type": "array", "items": {"enum": ["wald", "lrt"]}},
                "component": {"type": "string"},
                "n_jobs": {"type": "integer"},
            },
            "additionalProperties": False,
        },
    },
    "required": ["format_version", "model"],
    "additionalProperties": False,
}


def theta_from_json(entry: dict, K: int, structure: str, p: int) -> ThetaParams:
    """Build ThetaParams from the config form; ``beta`` lists rows for units 2..K."""
    mu = np.asarray(entry["mu"], dtype=float)
    if mu.size != p:
        raise ConfigError(f"mu has {mu.size} entries, the model has {p} parameters")
    beta_rows = np.asarray(entry.get("beta", np.zeros((K - 1, p))), dtype=float).reshape(-1, p)
    if beta_rows.shape[0] != K - 1:
        raise ConfigError(f"beta needs {K - 1} rows (units 2..{K}), got {beta_rows.shape[0]}")
    mats = []
    for sym in ("omega", "psi"):
        if sym in entry:
            C = np.asarray(entry[sym], dtype=float)
        elif f"{sym}2" in entry:
            C = np.diag(np.asarray(entry[f"{sym}2"], dtype=float))
        else:
            C = 0.1 * np.eye(p)
        if C.shape != (p, p):
            raise ConfigError(f"{sym} must be {p} x {p}")
        mats.append(C)
    try:
        return ThetaParams(mu, np.vstack([np.zeros(p), beta_rows]), mats[0], mats[1],
                           entry["sigma2"], structure)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    """Validated configuration; ``theta_init`` stays in JSON form until K is known."""

    raw: dict
    structural: str
    error: str = "constant"
    covariance_structure: str = "diagonal"
    saem: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    theta_init: dict | None = None
    fixed_beta: tuple = ()
    T: int = DEFAULT_T
    fim: bool = True
    loglik: bool = True
    inference_seed: int = 0
    tests: list = field(default_factory=list)
    design: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)

    @property
    def model(self):
        return get_model(self.structural, self.error)

    def saem_config(self, K: int, seed=None) -> SaemConfig:
        p = self.model.p
        init = None
        if self.theta_init is not None:
            init = theta_from_json(self.theta_init, K, self.covariance_structure, p)
        kw = dict(self.saem)
        if seed is not None:
            kw["seed"] = seed
        try:
            return SaemConfig(
                theta_init=init,
                kernel=KernelConfig(**self.kernel),
                covariance_structure=self.covariance_structure,
                fixed_beta=tuple(self.fixed_beta),
                **kw,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def trial_design(self) -> TrialDesign:
        d = dict(self.design)
        K = d.get("K", 2)
        p = self.model.p
        if "theta_true" in d:
            theta = theta_from_json(d.pop("theta_true"), K, self.covariance_structure, p)
        elif self.structural == "theophylline_1cpt_oral":
            theta = default_theta_true(K)
        else:
            raise ConfigError("design.theta_true is required for this model")
        dose = d.get("dose", 4.0)
        try:
            return TrialDesign(
                n=d.get("n", 24), K=K,
                sampling_times=tuple(d.get("sampling_times", DEFAULT_TIMES)),
                dose=tuple(dose) if isinstance(dose, list) else dose,
                structural=self.structural, error=self.error,
                theta_true=theta, tau=d.get("tau"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def study_options(self, K: int) -> StudyOptions:
        return StudyOptions(
            fit=self.saem_config(K),
            tests=tuple(self.study.get("tests", ("wald", "lrt"))),
            component=self.study.get("component", "beta.logAUC"),
            T=self.T,
        )


def parse_config(raw: dict) -> RunConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    model = raw["model"]
    if model["structural"] not in STRUCTURAL_MODELS:
        raise ConfigError(
            f"unknown structural model {model['structural']!r}; known: {sorted(STRUCTURAL_MODELS)}"
        )
    inf = raw.get("inference", {})
    cfg = RunConfig(
        raw=raw,
        structural=model["structural"],
        error=model.get("error", "constant"),
        covariance_structure=raw.get("covariance_structure", "diagonal"),
        saem=dict(raw.get("saem", {})),
        kernel={k: (tuple(v) if k == "n_sweeps" else v) for k, v in raw.get("kernel", {}).items()},
        theta_init=raw.get("theta_init"),
        fixed_beta=tuple(raw.get("fixed_beta", ())),
        T=inf.get("T", DEFAULT_T),
        fim=inf.get("fim", True),
        loglik=inf.get("loglik", True),
        inference_seed=inf.get("seed", 0),
        tests=list(inf.get("tests", [])),
        design=dict(raw.get("design", {})),
        study=dict(raw.get("study", {})),
    )
    pn = cfg.model.structural.param_names
    K = cfg.design.get("K", 2)
    for name in list(cfg.fixed_beta) + [t["component"] for t in cfg.tests]:
        try:
            canonical_name(name, pn, max(K, 2) if name.startswith("beta.") else 10**6)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad unit-effect name: {exc}") from None
    s = cfg.saem
    if s.get("burn_in", 200) >= s.get("n_iterations", 500):
        raise ConfigError("saem.burn_in must be smaller than saem.n_iterations")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


def demo_paths() -> dict:
    """Paths of the bundled demo dataset and configuration."""
    base = resources.files("mlsaem") / "data"
    return {"data": Path(str(base / "demo_theophylline.csv")),
            "config": Path(str(base / "demo_config.json"))}


# ---------------------------------------------------------------- results


def _clean(x):
    """JSON-ready copy with numpy scalars converted and non-finite floats as null."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    return x


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def fit_to_dict(fit: FitResult, data: Dataset, config: RunConfig, data_path) -> dict:
    """The fit.json document; a deterministic function of its inputs."""
    pn = fit.model.structural.param_names
    burn = fit.config.burn_in
    post = np.nanmean(fit.acceptance[burn:], axis=0)
    se = {}
    fim = None
    if fit.fim is not None:
        se = {nm: fit.fim.standard_errors.get(nm) for nm in fit.free_names}
        fim = {
            "names": fit.fim.names,
            "chart": fit.fim.chart,
            "condition_number": fit.fim.condition_number,
            "boundary": fit.fim.boundary,
        }
    mean, cov = instrumental_moments(fit.phi_samples)
    fixed = [f"beta{k + 1}.{pn[j]}" for k, j in zip(*np.nonzero(fit.fixed_mask)) if k > 0]
    return {
        "format_version": FORMAT_VERSION,
        "model": {"structural": fit.model.structural.name, "error": fit.model.error.kind},
        "covariance_structure": fit.theta_hat.covariance_structure,
        "fixed_beta": fixed,
        "seed": fit.config.seed,
        "config": config.raw,
        "data": {
            "path": str(data_path),
            "fingerprint": fit.data_fingerprint,
            "n": data.n,
            "K": data.K,
            "n_observations": data.total_obs,
        },
        "estimates": fit.estimates,
        "standard_errors": se,
        "fim": fim,
        "loglik": None if fit.loglik is None else {
            "value": fit.loglik.value, "se": fit.loglik.mc_standard_error, "T": fit.loglik.T,
        },
        "tests": {"wald": [], "lrt": []},
        "diagnostics": {
            "acceptance_post_burn_in": dict(zip(KERNELS, post)),
            "rho": fit.diagnostics["rho"],
            "component_scales": fit.diagnostics["component_scales"],
            "floored_iterations": fit.diagnostics["floored_iterations"],
            "annealed_iterations": fit.diagnostics["annealed_iterations"],
            "mu_beta_residual": fit.diagnostics["mu_beta_residual"],
            "stabilization": fit.diagnostics["stabilization"],
        },
        "instrumental": {"mean": mean, "cov": cov, "inflation_applied": True},
    }


def load_fit(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    for key in ("model", "estimates", "data", "covariance_structure", "fixed_beta"):
        if key not in doc:
            raise ConfigError(f"{path}: missing field {key!r}")
    return doc


def theta_from_fit(doc: dict) -> ThetaParams:
    model = get_model(doc["model"]["structural"], doc["model"]["error"])
    vec = [v for v in doc["estimates"].values()]
    return theta_from_vector(vec, model.p, doc["data"]["K"], doc["covariance_structure"])


TRACE_SUFFIX = ["acc_" + k for k in KERNELS] + ["floor_omega", "floor_psi", "floor_sigma2", "annealed"]


def trace_to_csv(fit: FitResult) -> str:
    """One row per iteration: parameter values, kernel acceptance rates, floor flags."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *fit.param_names, *TRACE_SUFFIX])
    for ell in range(fit.trace.shape[0]):
        w.writerow([ell + 1, *map(_fmt, fit.trace[ell]), *map(_fmt, fit.acceptance[ell]),
                    *(int(f) for f in fit.floor_flags[ell])])
    return buf.getvalue()


GOF_COLUMNS = ("subject", "unit", "time", "dv", "pred_pop", "pred_ind", "std_resid")


def gof_table(fit: FitResult, data: Dataset) -> list[tuple]:
    """Observed values with population and individual predictions and standardized residuals."""
    model = fit.model
    th = fit.theta_hat
    phi_pop = np.broadcast_to(th.unit_means(), (data.n, data.K, th.p))
    pop = model.predict(data, phi_pop)
    ind = model.predict(data, fit.phi_cond_mean)
    resid = (data.y - ind) / (model.error.g(ind) * np.sqrt(th.sigma2))
    rows = []
    for i, sid in enumerate(data.subject_ids):
        for k in range(data.K):
            for j in np.nonzero(data.mask[i, k])[0]:
                rows.append((sid, k + 1, data.times[i, k, j], data.y[i, k, j],
                             pop[i, k, j], ind[i, k, j], resid[i, k, j]))
    return rows


def gof_to_csv(fit: FitResult, data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GOF_COLUMNS)
    for sid, k, *vals in gof_table(fit, data):
        w.writerow([sid, k, *map(_fmt, vals)])
    return buf.getvalue()


REPORT_COLUMNS = ("parameter", "true", "normalizer", "mean_estimate", "rel_bias_pct", "rel_rmse_pct")


def report_to_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report.rows():
        w.writerow([row["parameter"], *(_fmt(row[c]) for c in REPORT_COLUMNS[1:])])
    return buf.getvalue()
