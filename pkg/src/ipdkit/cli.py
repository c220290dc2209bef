"""Batch command-line frontend: simulate, fit, diagnose, mc-bench, group-rates.

Exit codes: 0 success, 2 numerical/estimation failure (with a
machine-readable error JSON), 64 usage error, 65 invalid config or input
schema. Every command is deterministic given its flags and seed and never
mutates its inputs. ``IPDKIT_THREADS`` sets the default worker count for
mc-bench; no other environment variables are read.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import data_model, diagnostics, group_rates, simulation
from .data_model import ColumnSchema, Dataset, load_categorical_csv, load_csv, save_csv, split_summary
from .errors import (
    IpdError,
    NonConvergenceError,
    ParseError,
    RankError,
    SchemaError,
    ValidationError,
)
from .estimators import EstimatorConfig, METHODS, WeightingSpec, estimate
from .simulation import (
    LinearDgpConfig,
    LinearSample,
    McConfig,
    fit_rule,
    parse_rule_spec,
    run_monte_carlo,
)
from .targets import TargetSpec

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_USAGE = 64
EXIT_CONFIG = 65

TARGET_ALIASES = {
    "mean": "mean",
    "ols": "linear_regression",
    "linear": "linear_regression",
    "linear_regression": "linear_regression",
    "logistic": "logistic_regression",
    "logistic_regression": "logistic_regression",
}
METHOD_ALIASES = {"ppi++": "ppi_plus_plus", **{m: m for m in METHODS}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _write_json(path: str | None, payload) -> None:
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit_error(path: str | None, exc: Exception) -> None:
    _write_json(path, {"error": type(exc).__name__, "message": str(exc)})


def _apply_config_defaults(args: argparse.Namespace, keys: list[str]) -> None:
    """Fill unset (None) flags from the JSON file given with --config."""
    if getattr(args, "config", None) is None:
        return
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise SchemaError("--config must contain a JSON object")
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if attr not in keys:
            raise SchemaError(f"unknown config key {key!r}")
        if getattr(args, attr, None) is None:
            setattr(args, attr, value)


def _split_list(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _build_target(name: str, p_x: int) -> TargetSpec:
    kind = TARGET_ALIASES.get(name)
    if kind is None:
        raise ValidationError(f"unknown target {name!r}; expected one of {sorted(set(TARGET_ALIASES))}")
    if kind == "mean":
        return TargetSpec.mean()
    if kind == "linear_regression":
        return TargetSpec.linear(p_x)
    return TargetSpec.logistic(p_x)


def _format_fit_text(result) -> str:
    header = ["coord", "estimate", "std_error", "ci_lower", "ci_upper"]
    rows = [
        [str(k), f"{result.theta_hat[k]:.4f}", f"{result.std_errors[k]:.4f}",
         f"{result.ci_lower[k]:.4f}", f"{result.ci_upper[k]:.4f}"]
        for k in range(result.theta_hat.shape[0])
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = [f"estimator: {result.estimator_name}"]
    if result.tuning is not None:
        tun = result.tuning
        tun = tun.tolist() if isinstance(tun, np.ndarray) else tun
        lines.append(f"tuning: {tun}")
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    _apply_config_defaults(args, ["data", "outcome", "pred", "covars", "features",
                                  "target", "method", "ci_level", "out", "format"])
    for flag in ("data", "outcome", "pred", "target", "method"):
        if getattr(args, flag) is None:
            raise SystemExit(_usage_error(f"--{flag.replace('_', '-')} is required"))
    method = METHOD_ALIASES.get(args.method)
    if method is None:
        raise SystemExit(_usage_error(
            f"unknown method {args.method!r}; valid: {', '.join(sorted(METHOD_ALIASES))}"
        ))
    schema = ColumnSchema(
        outcome=args.outcome, prediction=args.pred,
        covariates=_split_list(args.covars), features=_split_list(args.features),
    )
    try:
        d = load_csv(args.data, schema)
        target = _build_target(args.target, d.p_x)
        cfg = EstimatorConfig(
            method=method, ci_level=args.ci_level if args.ci_level is not None else 0.95,
            weighting=WeightingSpec.zero() if method == "classical" else WeightingSpec(),
        )
        result = estimate(d, target, cfg)
    except (SchemaError, ParseError, ValidationError) as exc:
        _emit_error(args.out, exc)
        return EXIT_CONFIG
    except IpdError as exc:
        _emit_error(args.out, exc)
        return EXIT_NUMERIC
    if args.format == "text":
        _write_text(args.out, _format_fit_text(result))
    else:
        payload = result.to_json_dict()
        payload["split"] = split_summary(d).__dict__
        _write_json(args.out, payload)
    return EXIT_OK


def _usage_error(message: str) -> int:
    print(f"ipdkit: error: {message}", file=sys.stderr)
    return EXIT_USAGE


def cmd_simulate(args) -> int:
    _apply_config_defaults(args, ["dgp", "n", "p", "noise_sd", "rule", "rule_seed",
                                  "train_n", "rho", "seed", "out"])
    if (args.dgp or "linear") != "linear":
        raise SystemExit(_usage_error(f"unknown dgp {args.dgp!r}; only 'linear' is available"))
    if args.rule is None or args.out is None:
        raise SystemExit(_usage_error("--rule and --out are required"))
    try:
        seed = args.seed if args.seed is not None else 0
        n = args.n if args.n is not None else 1000
        p = args.p if args.p is not None else 10
        rho = args.rho if args.rho is not None else 0.5
        spec = parse_rule_spec(args.rule, seed=args.rule_seed or 0)
        if spec.kind == "bagged_trees":
            train_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, 0)))
            train_n = args.train_n if args.train_n is not None else 1000
            z_t = train_rng.standard_normal((train_n, p))
            y_t = z_t.sum(axis=1) + (args.noise_sd if args.noise_sd is not None else 1.0) * train_rng.standard_normal(train_n)
            rule = fit_rule(LinearSample(z=z_t, y=y_t), spec)
        else:
            rule = fit_rule(None, spec)
        dgp = LinearDgpConfig(n=n, p=p, noise_sd=args.noise_sd if args.noise_sd is not None else 1.0, seed=seed)
        sample = simulation.generate_linear_dgp(dgp)
        yhat = rule.predict(sample.z)
        mask_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, 0)))
        n_l = min(max(int(round(rho * n)), 1), n - 1)
        labeled_idx = mask_rng.permutation(n)[:n_l]
        d = simulation.make_dataset(sample.z, sample.y, yhat, labeled_idx)
        names = tuple(f"z{i+1}" for i in range(p))
        d = Dataset(
            y_labeled=d.y_labeled, yhat_labeled=d.yhat_labeled,
            x_labeled=d.z_labeled, z_labeled=d.z_labeled,
            yhat_unlabeled=d.yhat_unlabeled, x_unlabeled=d.z_unlabeled,
            z_unlabeled=d.z_unlabeled,
            columns=ColumnSchema(outcome="y", prediction="y_hat", covariates=names, features=()),
        )
        save_csv(d, args.out)
    except (SchemaError, ParseError, ValidationError) as exc:
        _emit_error(None, exc)
        return EXIT_CONFIG
    except IpdError as exc:
        _emit_error(None, exc)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_scenario(path_or_name: str) -> dict:
    path = Path(path_or_name)
    if not path.exists():
        shipped = resources.files("ipdkit").joinpath(f"scenarios/{path_or_name}")
        if shipped.is_file():
            raw = shipped.read_text(encoding="utf-8")
        else:
            raise SchemaError(f"scenario {path_or_name!r} not found (no file and no shipped scenario)")
    else:
        raw = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario is not valid JSON: {exc}") from exc
    schema = json.loads(resources.files("ipdkit").joinpath("schemas/scenario.schema.json").read_text(encoding="utf-8"))
    errors = sorted(Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "(root)"
        raise SchemaError(f"scenario violates schema at {where}: {first.message}")
    return doc


def cmd_mc_bench(args) -> int:
    try:
        doc = _load_scenario(args.scenario)
    except SchemaError as exc:
        _emit_error(None, exc)
        return EXIT_CONFIG
    reps = args.reps if args.reps is not None else doc["replications"]
    seed = args.seed if args.seed is not None else doc["master_seed"]
    threads = args.threads if args.threads is not None else int(os.environ.get("IPDKIT_THREADS", "1"))
    tgt = doc["target"]
    target = (TargetSpec.mean() if tgt["kind"] == "mean"
              else TargetSpec.linear(1, intercept=tgt.get("intercept", True)))
    dgp_doc = doc["dgp"]
    all_rows: list[list] = []
    payload = {"scenario": doc["name"], "replications": reps, "master_seed": seed, "settings": []}
    try:
        for setting in doc["settings"]:
            rule = parse_rule_spec(setting["rule"], seed=setting.get("rule_seed", 0))
            cfg = McConfig(
                replications=reps,
                rho=doc["rho"],
                estimators=tuple(doc["estimators"]),
                target=target,
                dgp=LinearDgpConfig(
                    n=dgp_doc["n"], p=dgp_doc["p"],
                    noise_sd=dgp_doc.get("noise_sd", 1.0),
                    true_beta=tuple(dgp_doc["true_beta"]) if "true_beta" in dgp_doc else None,
                    seed=seed,
                ),
                rule=rule,
                master_seed=seed,
                train_n=doc.get("train_n", 1000),
                threads=threads,
                ci_level=doc.get("ci_level", 0.95),
            )
            report = run_monte_carlo(cfg)
            rows = report.to_csv_rows()
            if not all_rows:
                all_rows.append(["setting"] + rows[0])
            for row in rows[1:]:
                all_rows.append([setting["name"]] + row)
            payload["settings"].append({"name": setting["name"], "report": report.to_json_dict()})
    except IpdError as exc:
        _emit_error(args.out, exc)
        return EXIT_NUMERIC
    if args.format == "json":
        _write_json(args.out, payload)
    else:
        buf = []
        for row in all_rows:
            buf.append(",".join(str(c) for c in row))
        _write_text(args.out, "\n".join(buf) + "\n")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _apply_config_defaults(args, ["data", "outcome", "pred", "covars", "features",
                                  "target", "out", "format", "leakage_feature"])
    for flag in ("data", "outcome", "pred"):
        if getattr(args, flag) is None:
            raise SystemExit(_usage_error(f"--{flag} is required"))
    schema = ColumnSchema(
        outcome=args.outcome, prediction=args.pred,
        covariates=_split_list(args.covars), features=_split_list(args.features),
    )
    try:
        d = load_csv(args.data, schema)
        payload = {"calibration": diagnostics.calibration_summary(d).to_json_dict()}
        if d.p_x > 0:
            target = _build_target(args.target or "ols", d.p_x)
            payload["side_by_side"] = diagnostics.side_by_side(d, target).to_json_dict()
        if args.leakage_feature is not None:
            payload["leakage"] = {
                "feature_index": args.leakage_feature,
                "ell_hat": diagnostics.estimate_leakage(d, args.leakage_feature),
            }
    except (SchemaError, ParseError, ValidationError) as exc:
        _emit_error(args.out, exc)
        return EXIT_CONFIG
    except IpdError as exc:
        _emit_error(args.out, exc)
        return EXIT_NUMERIC
    if args.format == "text":
        cal = payload["calibration"]["overall"]
        lines = ["calibration (labeled rows)"]
        for key in ("mean_error", "mse", "correlation", "calib_intercept", "calib_slope"):
            v = cal[key]
            lines.append(f"  {key}: {'NA' if v is None else f'{v:.4f}'}")
        if "side_by_side" in payload:
            sbs = payload["side_by_side"]
            lines.append("side-by-side coefficients (true | predicted | delta)")
            for k, (a, b, dl) in enumerate(zip(
                sbs["theta_true_outcome"], sbs["theta_predicted_outcome"], sbs["deltas"]
            )):
                lines.append(f"  coord {k}: {a:.4f} | {b:.4f} | {dl:.4f}")
            lines.append(f"  distortion_flag: {sbs['distortion_flag']}")
        _write_text(args.out, "\n".join(lines) + "\n")
    else:
        _write_json(args.out, payload)
    return EXIT_OK


def cmd_group_rates(args) -> int:
    _apply_config_defaults(args, ["data", "group", "group_hat", "outcome", "method",
                                  "ci_level", "out", "format", "compare"])
    if args.data is None:
        raise SystemExit(_usage_error("--data is required"))
    method = METHOD_ALIASES.get(args.method or "ppi")
    if method is None:
        raise SystemExit(_usage_error(
            f"unknown method {args.method!r}; valid: {', '.join(sorted(METHOD_ALIASES))}"
        ))
    try:
        cd = load_categorical_csv(
            args.data, group=args.group or "group",
            group_hat=args.group_hat or "group_hat", outcome=args.outcome or "outcome",
        )
        cfg = EstimatorConfig(method="ppi" if method in ("unified",) else method,
                              ci_level=args.ci_level if args.ci_level is not None else 0.95)
        result = group_rates.estimate_group_rates(cd, cfg)
        naive = metrics = None
        if args.compare:
            naive = group_rates.estimate_group_rates(cd, EstimatorConfig(method="naive", ci_level=cfg.ci_level))
            metrics = diagnostics.classification_metrics(cd)
    except (SchemaError, ParseError, ValidationError) as exc:
        _emit_error(args.out, exc)
        return EXIT_CONFIG
    except IpdError as exc:
        _emit_error(args.out, exc)
        return EXIT_NUMERIC
    if args.format == "json":
        payload = {"result": result.to_json_dict()}
        if naive is not None:
            payload["naive"] = naive.to_json_dict()
        _write_json(args.out, payload)
    elif args.compare:
        table = group_rates.render_comparison_table(
            cd.categories, true_rates=None, naive=naive, ipd=result, metrics=metrics,
            fmt="csv" if args.format == "csv" else "text",
        )
        _write_text(args.out, table)
    else:
        if args.format == "csv":
            lines = ["group,rate,std_error,ci_lower,ci_upper,clamped"]
            for e in result.per_group:
                cells = [e.group] + [
                    "" if v is None else f"{v:.6g}" for v in (e.rate, e.std_error, e.ci_lower, e.ci_upper)
                ] + [str(e.clamped)]
                lines.append(",".join(cells))
            _write_text(args.out, "\n".join(lines) + "\n")
        else:
            lines = [f"group rates ({result.method})"]
            for e in result.per_group:
                if e.rate is None:
                    lines.append(f"  {e.group}: no labeled rows; rate unavailable")
                else:
                    lines.append(
                        f"  {e.group}: {e.rate:.4f} (se {e.std_error:.4f}, "
                        f"ci [{e.ci_lower:.4f}, {e.ci_upper:.4f}]"
                        + (", clamped" if e.clamped else "") + ")"
                    )
            _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="ipdkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", parents=[], help="fit one estimator on a CSV dataset")
    p_fit.add_argument("--data")
    p_fit.add_argument("--outcome")
    p_fit.add_argument("--pred")
    p_fit.add_argument("--covars", help="comma-separated covariate columns")
    p_fit.add_argument("--features", help="comma-separated prediction-feature columns")
    p_fit.add_argument("--target", help="mean | ols | logistic")
    p_fit.add_argument("--method", help="naive | classical | oracle | ppi | ppi++ | pspa")
    p_fit.add_argument("--ci-level", dest="ci_level", type=float)
    p_fit.add_argument("--config", help="JSON file supplying defaults for any flag")
    p_fit.add_argument("--out")
    p_fit.add_argument("--format", choices=("json", "text"), default="json")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    p_sim.add_argument("--dgp", default="linear")
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--p", type=int)
    p_sim.add_argument("--noise-sd", dest="noise_sd", type=float)
    p_sim.add_argument("--rule", help="attenuated:<c>:<subset> or trees:<n>:<depth>:<subset>")
    p_sim.add_argument("--rule-seed", dest="rule_seed", type=int)
    p_sim.add_argument("--train-n", dest="train_n", type=int)
    p_sim.add_argument("--rho", type=float)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--config")
    p_sim.add_argument("--out")
    p_sim.set_defaults(func=cmd_simulate)

    p_mc = sub.add_parser("mc-bench", help="run a Monte Carlo scenario")
    p_mc.add_argument("--scenario", required=True, help="scenario JSON path or shipped name (figure3.json)")
    p_mc.add_argument("--reps", type=int)
    p_mc.add_argument("--seed", type=int)
    p_mc.add_argument("--threads", type=int)
    p_mc.add_argument("--out")
    p_mc.add_argument("--format", choices=("csv", "json"), default="csv")
    p_mc.set_defaults(func=cmd_mc_bench)

    p_diag = sub.add_parser("diagnose", help="calibration and side-by-side reports")
    p_diag.add_argument("--data")
    p_diag.add_argument("--outcome")
    p_diag.add_argument("--pred")
    p_diag.add_argument("--covars")
    p_diag.add_argument("--features")
    p_diag.add_argument("--target")
    p_diag.add_argument("--leakage-feature", dest="leakage_feature", type=int,
                        help="0-based z column for the leakage probe")
    p_diag.add_argument("--config")
    p_diag.add_argument("--out")
    p_diag.add_argument("--format", choices=("json", "text"), default="json")
    p_diag.set_defaults(func=cmd_diagnose)

    p_gr = sub.add_parser("group-rates", help="per-group outcome rates via Bayes' rule")
    p_gr.add_argument("--data")
    p_gr.add_argument("--group")
    p_gr.add_argument("--group-hat", dest="group_hat")
    p_gr.add_argument("--outcome")
    p_gr.add_argument("--method")
    p_gr.add_argument("--ci-level", dest="ci_level", type=float)
    p_gr.add_argument("--compare", action="store_true", default=None,
                      help="also compute the naive rates and render a comparison table")
    p_gr.add_argument("--config")
    p_gr.add_argument("--out")
    p_gr.add_argument("--format", choices=("json", "csv", "text"), default="text")
    p_gr.set_defaults(func=cmd_group_rates)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    except SchemaError as exc:
        _emit_error(None, exc)
        return EXIT_CONFIG
    except (NonConvergenceError, RankError) as exc:
        _emit_error(None, exc)
        return EXIT_NUMERIC
    return code


if __name__ == "__main__":
    raise SystemExit(main())
