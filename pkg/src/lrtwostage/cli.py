"""Command-line entry point: ``lrtwostage {simulate,analyze,oracle,diagnostics,generate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 flagged result
under ``--strict``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .bart import BartChain, BartHyper, fit_bart, posterior_predictive_pvalue, predict_posterior, vip
from .data import DatasetSchema, Outcome, SchemaError, TrialDataset, load_with_schema
from .dgp import DgpScenario, gen_trial, oracle_estimand
from .glm import Link
from .harness import (
    Method,
    MccvConfig,
    SimConfig,
    export_overlap_data,
    link_for,
    run_mccv,
    run_simulation,
    write_csv,
    write_json,
)
from .twostage import SubgroupingRule

log = logging.getLogger("lrtwostage")


class ConfigError(Exception):
    pass


SIM_KEYS = {"scenario", "n_total", "R", "methods", "rule", "design_fraction", "seed", "bart",
            "n_mc", "oracle_seed", "gbm_folds"}
SCENARIO_KEYS = {"outcome", "covariates", "mu", "min_cond"}
ANALYZE_KEYS = {"schema", "rule", "link", "repetitions", "design_fraction", "seed", "bart",
                "methods", "confidence_rep", "gbm_folds"}
ORACLE_KEYS = {"scenario", "rule", "n_mc", "seed"}


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: cannot parse YAML{where}: {getattr(exc, 'problem', exc)}")
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _scenario(d: dict) -> DgpScenario:
    _check_keys(d, SCENARIO_KEYS, "scenario")
    if "outcome" not in d:
        raise ConfigError("scenario.outcome is required")
    try:
        return DgpScenario(**d)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}")


def _rule(d, default=None) -> SubgroupingRule:
    if d is None:
        if default is None:
            raise ConfigError("rule is required")
        return default
    try:
        return SubgroupingRule.from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"rule: {exc}")


def _bart(d) -> BartHyper:
    try:
        return BartHyper.from_dict(d or {})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bart: {exc}")


def _methods(v):
    try:
        return tuple(Method(m) for m in v)
    except ValueError as exc:
        raise ConfigError(f"methods: {exc}")


def sim_config(doc: dict, seed=None) -> SimConfig:
    _check_keys(doc, SIM_KEYS, "simulate config")
    if "scenario" not in doc:
        raise ConfigError("simulate config: 'scenario' is required")
    sc = _scenario(doc["scenario"])
    kw = {k: doc[k] for k in ("n_total", "R", "design_fraction", "n_mc", "oracle_seed",
                              "gbm_folds") if k in doc}
    if "methods" in doc:
        kw["methods"] = _methods(doc["methods"])
    try:
        return SimConfig(sc, rule=_rule(doc.get("rule"), sc.default_rule()), bart=_bart(doc.get("bart")),
                         base_seed=int(seed if seed is not None else doc.get("seed", 0)), **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"simulate config: {exc}")


def mccv_config(doc: dict, loaded, seed=None) -> MccvConfig:
    kw = {k: doc[k] for k in ("repetitions", "design_fraction", "confidence_rep", "gbm_folds")
          if k in doc}
    if "methods" in doc:
        kw["methods"] = _methods(doc["methods"])
    link = doc.get("link", link_for(loaded.data.outcome).value)
    try:
        return MccvConfig(_rule(doc.get("rule")), Link(link), adjust=tuple(loaded.adjust_columns),
                          standardize_at=loaded.standardize_at, bart=_bart(doc.get("bart")),
                          base_seed=int(seed if seed is not None else doc.get("seed", 0)), **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"analyze config: {exc}")


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = sim_config(load_config(args.config), args.seed)
    out = Path(args.out_dir)

    def progress(rep):
        log.info("replication %d done", rep.r)

    try:
        table = run_simulation(cfg, workers=args.threads, progress=progress)
    except ValueError as exc:
        raise ConfigError(str(exc))
    table.to_csv(out / "metrics.csv")
    table.to_json(out / "metrics.json")
    print(table.to_frame().to_string(index=False))
    if table.flagged:
        msg = "flagged: more than 20% of replications excluded for some method/label"
        print(msg, file=sys.stderr)
        if args.strict:
            return 2
    return 0


def cmd_analyze(args) -> int:
    doc = load_config(args.config)
    _check_keys(doc, ANALYZE_KEYS, "analyze config")
    if "schema" not in doc:
        raise ConfigError("analyze config: 'schema' is required")
    try:
        schema = DatasetSchema.from_dict(doc["schema"])
    except (SchemaError, TypeError, KeyError) as exc:
        raise ConfigError(f"schema: {exc}")
    if not Path(args.data).is_file():
        raise ConfigError(f"data file not found: {args.data}")
    loaded = load_with_schema(args.data, schema)
    cfg = mccv_config(doc, loaded, args.seed)
    res = run_mccv(loaded.data, cfg, workers=args.threads)
    out = Path(args.out_dir)
    counts = {"n_read": loaded.n_read, "n_dropped": loaded.n_dropped,
              "n_complete": loaded.data.n}
    write_csv(res.to_frame(), out / "mccv.csv", {"config": res.config, "data": counts})
    write_json({"config": res.config, "data": counts, "confidence": res.confidence,
                "n_failed": res.n_failed, "failures": res.failures,
                "rows": res.to_frame().to_dict(orient="records")}, out / "mccv.json")
    print(f"read {loaded.n_read} rows, dropped {loaded.n_dropped} incomplete, "
          f"analysed {loaded.data.n}")
    print(res.to_frame().to_string(index=False))
    if res.n_failed and args.strict:
        return 2
    return 0


def cmd_oracle(args) -> int:
    doc = load_config(args.config)
    _check_keys(doc, ORACLE_KEYS, "oracle config")
    sc_doc = dict(doc.get("scenario", {}))
    if args.outcome:
        sc_doc["outcome"] = args.outcome
    if args.covariates:
        sc_doc["covariates"] = args.covariates
    sc = _scenario(sc_doc)
    rule = _rule(doc.get("rule"), sc.default_rule())
    n_mc = int(args.n_mc or doc.get("n_mc", 1_000_000))
    seed = int(args.seed if args.seed is not None else doc.get("seed", 0))
    try:
        est = oracle_estimand(sc, rule, n_mc, seed)
    except ValueError as exc:
        raise ConfigError(str(exc))
    write_json(est.to_dict(), Path(args.out_dir) / "oracle.json")
    print(json.dumps(est.delta, sort_keys=True))
    return 0


def _diag_data(args) -> TrialDataset:
    if not args.data:
        raise ConfigError(f"diagnostics {args.what}: --data is required")
    if not Path(args.data).is_file():
        raise ConfigError(f"data file not found: {args.data}")
    return TrialDataset.from_csv(args.data, args.outcome)


def cmd_diagnostics(args) -> int:
    out = Path(args.out_dir)
    seed = int(args.seed or 0)
    hyper = BartHyper(m=args.m) if args.m else BartHyper()
    prov = {"what": args.what, "seed": seed, "bart": asdict(hyper), "data": args.data,
            "chain": args.chain}
    data = None
    if args.chain:
        if not Path(args.chain).is_file():
            raise ConfigError(f"chain file not found: {args.chain}")
        chain = BartChain.from_json(args.chain)
    else:
        data = _diag_data(args)
        treated = data.subset(np.flatnonzero(data.t == 1))
        chain = fit_bart(treated.X, treated.y, data.outcome, hyper, seed=seed)
        out.mkdir(parents=True, exist_ok=True)
        chain.to_json(out / "chain.json")
    if args.what == "vip":
        v = vip(chain)
        names = [f"x{j + 1}" for j in range(chain.p)]
        df = pd.DataFrame({"feature": names, "vip": v.mean, "lower": v.lower, "upper": v.upper})
        write_csv(df, out / "vip.csv", prov)
        print(df.to_string(index=False))
        return 0
    if data is None:
        data = _diag_data(args)
    if args.what == "ppc":
        treated = data.subset(np.flatnonzero(data.t == 1))
        try:
            p = posterior_predictive_pvalue(chain, treated.y, args.n_rep, seed)
        except ValueError as exc:
            raise ConfigError(str(exc))
        write_json({"provenance": prov, "n_rep": args.n_rep, "observed_rate": float(treated.y.mean()),
                    "mean_predicted_rate": float(chain.train_draws.mean()), "p_value": p},
                   out / "ppc.json")
        print(f"posterior predictive p-value: {p:.3f}")
        return 0
    draws = predict_posterior(chain, data.X).values
    ov = export_overlap_data(draws, data.t)
    ov.to_csv(out / "overlap_samples.csv", out / "overlap_ecdf.csv", prov)
    print(f"KS statistic between arms: {ov.ks_statistic:.4f}")
    return 0


def cmd_generate(args) -> int:
    sc = _scenario({"outcome": args.outcome, "covariates": args.covariates})
    data = gen_trial(sc, args.n, int(args.seed or 0))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.name
    with open(path, "w") as fh:
        prov = {"scenario": sc.to_dict(), "n": args.n, "seed": int(args.seed or 0)}
        fh.write("# provenance: " + json.dumps(prov, sort_keys=True) + "\n")
        data.to_frame().to_csv(fh, index=False, float_format="%.17g")
    print(path)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--strict", action="store_true",
                        help="exit 2 when the result is flagged")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lrtwostage", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", parents=[common], help="MCCV analysis of a CSV dataset")
    a.add_argument("data", help="CSV file described by the config's schema")
    a.set_defaults(func=cmd_analyze)

    o = sub.add_parser("oracle", parents=[common], help="true subgroup effects by Monte Carlo")
    o.add_argument("--outcome", choices=[e.value for e in Outcome])
    o.add_argument("--covariates", choices=["gaussian10", "mixed10"])
    o.add_argument("--n-mc", type=int)
    o.set_defaults(func=cmd_oracle)

    d = sub.add_parser("diagnostics", parents=[common], help="BART diagnostics")
    d.add_argument("what", choices=["vip", "ppc", "overlap"])
    d.add_argument("--data", help="CSV with covariates, t and y (as written by `generate`)")
    d.add_argument("--outcome", choices=[e.value for e in Outcome], default="binary")
    d.add_argument("--chain", help="serialized chain to replay instead of fitting")
    d.add_argument("--m", type=int, help="number of trees when fitting")
    d.add_argument("--n-rep", type=int, default=100)
    d.set_defaults(func=cmd_diagnostics)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic trial as CSV")
    g.add_argument("--outcome", choices=[e.value for e in Outcome], required=True)
    g.add_argument("--covariates", choices=["gaussian10", "mixed10"], default="gaussian10")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--name", default="trial.csv")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
