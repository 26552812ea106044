"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import canonical_name
from .inference import (
    attach_inference,
    is_loglik_from_moments,
    lrt,
    wald_statistic,
)
from .io import (
    ConfigError,
    DatasetFormatError,
    atomic_write_text,
    demo_paths,
    dumps_json,
    fit_to_dict,
    gof_to_csv,
    load_config,
    load_fit,
    read_dataset,
    report_to_csv,
    theta_from_fit,
    trace_to_csv,
    write_dataset,
    write_json,
)
from .models import DomainError, NumericalError, get_model
from .saem import run_saem
from .trial import ReplicationFailure, replicate_study, simulate_trial

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path):
    return load_config(path if path is not None else demo_paths()["config"])


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    data = simulate_trial(cfg.trial_design(), args.seed)
    write_dataset(args.out, data)
    print(f"wrote {data.n} subjects x {data.K} units to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args.config)
    data = read_dataset(args.data)
    model = cfg.model
    if model.structural.requires_tau and np.isnan(data.tau).any():
        raise UsageError(f"model {cfg.structural} needs a tau value on every row")
    saem_cfg = cfg.saem_config(data.K, seed=args.seed)
    fit = run_saem(model, data, saem_cfg)
    attach_inference(fit, data, cfg.T, cfg.inference_seed, loglik=cfg.loglik, fim=cfg.fim)
    doc = fit_to_dict(fit, data, cfg, args.data)
    for t in cfg.tests:
        doc["tests"]["wald"].append(_wald_entry(doc, t["component"]))
    write_json(args.out, doc)
    if args.trace:
        atomic_write_text(args.trace, trace_to_csv(fit))
    if args.gof:
        atomic_write_text(args.gof, gof_to_csv(fit, data))
    for name, value in fit.estimates.items():
        se = doc["standard_errors"].get(name)
        print(f"{name:<22}{value:>12.5g}" + ("" if se is None else f"  (SE {se:.3g})"))
    if fit.loglik is not None:
        print(f"log-likelihood {fit.loglik.value:.3f} (MC SE {fit.loglik.mc_standard_error:.3f})")
    return EXIT_OK


def _wald_entry(doc, component):
    pn = get_model(doc["model"]["structural"]).structural.param_names
    name = canonical_name(component, pn, doc["data"]["K"])
    if name in doc["fixed_beta"]:
        raise UsageError(f"{name} is fixed at zero in this fit")
    se = doc["standard_errors"].get(name)
    if se is None:
        raise UsageError(f"no standard error for {name}; was the FIM computed?")
    W, p = wald_statistic(doc["estimates"][name], se)
    return {"component": name, "statistic": W, "p_value": p}


def cmd_test(args) -> int:
    doc = load_fit(args.fit)
    if args.method == "wald":
        entry = _wald_entry(doc, args.component)
        doc["tests"]["wald"] = [e for e in doc["tests"]["wald"] if e["component"] != entry["component"]]
        doc["tests"]["wald"].append(entry)
    else:
        if args.fit_reduced is None:
            raise UsageError("--method lrt needs --fit-reduced")
        reduced = load_fit(args.fit_reduced)
        pn = get_model(doc["model"]["structural"]).structural.param_names
        name = canonical_name(args.component, pn, doc["data"]["K"])
        try:
            res = lrt(doc, reduced)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if res.component != name:
            raise UsageError(f"reduced fit pins {res.component}, not {name}")
        entry = {"component": res.component, "statistic": res.statistic,
                 "p_value": res.p_value, "df": res.df, "reduced_fit": str(args.fit_reduced),
                 "note": res.note}
        doc["tests"]["lrt"] = [e for e in doc["tests"]["lrt"] if e["component"] != entry["component"]]
        doc["tests"]["lrt"].append(entry)
    write_json(args.fit, doc)
    print(json.dumps(entry))
    return EXIT_OK


def cmd_replicate(args) -> int:
    cfg = _config(args.config)
    design = cfg.trial_design()
    opts = cfg.study_options(design.K)
    jobs = args.jobs if args.jobs is not None else cfg.study.get("n_jobs", 1)
    try:
        report = replicate_study(design, args.replicates, opts, args.seed, n_jobs=jobs)
    except ReplicationFailure as exc:
        for o in exc.report.outcomes:
            if not o.ok:
                print(f"replicate {o.index}: {o.error}", file=sys.stderr)
        raise
    atomic_write_text(args.out, report_to_csv(report))
    text = report.text_table()
    atomic_write_text(Path(args.out).with_suffix(".txt"), text + "\n")
    print(text)
    return EXIT_OK


def cmd_loglik(args) -> int:
    doc = load_fit(args.fit)
    data_path = args.data or doc["data"]["path"]
    data = read_dataset(data_path)
    if data.fingerprint() != doc["data"]["fingerprint"]:
        raise UsageError(f"{data_path} is not the dataset this fit was run on")
    model = get_model(doc["model"]["structural"], doc["model"]["error"])
    inst = doc.get("instrumental")
    if not inst:
        raise UsageError("fit has no stored instrumental moments")
    est = is_loglik_from_moments(
        model, data, theta_from_fit(doc), np.asarray(inst["mean"]), np.asarray(inst["cov"]),
        args.samples, np.random.default_rng(args.seed),
    )
    doc["loglik"] = {"value": est.value, "se": est.mc_standard_error, "T": est.T}
    write_json(args.fit, doc)
    print(dumps_json(doc["loglik"]), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlsaem", description="SAEM estimation for two-level nonlinear mixed-effects models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a cross-over trial dataset")
    p.add_argument("--config", help="run configuration JSON (default: bundled demo)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a dataset by SAEM and compute SEs and log-likelihood")
    p.add_argument("--config", help="run configuration JSON (default: bundled demo)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the per-iteration trace CSV here")
    p.add_argument("--gof", help="write the goodness-of-fit CSV here")
    p.add_argument("--seed", type=int, help="override the SAEM seed of the config")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="Wald or likelihood-ratio test of a unit effect")
    p.add_argument("--fit", required=True)
    p.add_argument("--component", required=True)
    p.add_argument("--method", choices=("wald", "lrt"), default="wald")
    p.add_argument("--fit-reduced")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("replicate", help="simulation study: bias, RMSE and test rejection rates")
    p.add_argument("--config", help="run configuration JSON (default: bundled demo)")
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("loglik", help="re-estimate the log-likelihood of a stored fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--data", help="dataset path (default: the one recorded in the fit)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_loglik)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, UsageError, FileNotFoundError,
            IsADirectoryError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mlsaem: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DomainError, ReplicationFailure, np.linalg.LinAlgError) as exc:
        print(f"mlsaem: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
