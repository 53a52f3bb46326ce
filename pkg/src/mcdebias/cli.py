"""Command-line surface for the library.

Five subcommands cover the full workflow: ``oracle`` runs the exact
finite-distribution identity suite, ``train`` fits the multi-headed
network and writes a checkpoint plus its per-epoch diagnostics,
``estimate`` loads a checkpoint and prints the estimator table for a
dataset, ``benchmark`` runs multi-replicate error studies against known
ground truth, and ``diagnose`` emits long-format per-epoch trajectories
across replicates, loss kinds, and learning rates.

Everything is config-driven: a JSON file supplies the run description
and a few flags override file values. Every command is deterministic
given the config and seed. Exit codes: 0 success, 1 property or
benchmark failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import oracle
from .bench import (
    BENCH_ESTIMATORS,
    BenchmarkSpec,
    DiagnoseSpec,
    run_benchmark,
    run_diagnostics,
    write_long_csv,
    write_replicates_csv,
    write_summary_csv,
)
from .estimators import (
    DegenerateRieszError,
    dr,
    direct,
    ipw,
    perp_dr,
    rr_from_beta_perp,
    tmle_linear,
)
from .learners import (
    BdmmState,
    LossSpec,
    TrainConfig,
    TrainedModel,
    train,
)
from .moments import beta_default, beta_zero_extended, moment_from_config
from .neural import MultiHeadNet
from .scenarios import ScenarioSpec, generate, load_csv

__all__ = ["main", "ConfigError", "EXIT_OK", "EXIT_FAILURE", "EXIT_USAGE"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_TRAIN = {
    "stages": [
        {"max_epochs": 40, "learning_rate": 1e-2, "patience": 10, "batch_size": 64},
        {"max_epochs": 20, "learning_rate": 2e-3, "patience": 10, "batch_size": 64},
    ],
    "split_fraction": 0.8,
    "seed": 0,
    "loss_kind": "constrained",
}

CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.csv"
REPLICATES_FILE = "replicates.csv"
SUMMARY_FILE = "summary.csv"
ESTIMATES_FILE = "estimates.json"


class ConfigError(ValueError):
    """Configuration or usage problem; maps to exit code 2."""


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def build_estimand(config):
    cfg = config.get("estimand")
    if not cfg or "kind" not in cfg:
        raise ConfigError('config needs an "estimand" block with a "kind"')
    try:
        moment = moment_from_config(cfg)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid estimand: {exc}")
    tag = cfg.get("beta_tag", "default")
    if tag == "default":
        beta = beta_default(moment)
    elif tag == "zero_extended":
        beta = beta_zero_extended(moment)
    else:
        raise ConfigError(f"unknown beta_tag {tag!r}; expected 'default' or 'zero_extended'")
    return moment, beta, tag


def build_data(config, seed_override=None):
    """Dataset from the single configured source; scenarios carry truth."""
    cfg = config.get("data")
    if not cfg:
        raise ConfigError('config needs a "data" block')
    has_scenario = "scenario" in cfg
    has_csv = "csv" in cfg
    if has_scenario == has_csv:
        raise ConfigError('the "data" block needs exactly one of "scenario" or "csv"')
    if has_scenario:
        spec = build_scenario(cfg["scenario"], seed_override)
        data, truth = generate(spec)
        return data, truth
    csv_cfg = cfg["csv"]
    if "path" not in csv_cfg:
        raise ConfigError('csv data source needs a "path"')
    data = load_csv(
        csv_cfg["path"],
        outcome_col=csv_cfg.get("outcome_col", "y"),
        treatment_col=csv_cfg.get("treatment_col", "a"),
    )
    return data, None


def build_scenario(cfg, seed_override=None) -> ScenarioSpec:
    try:
        spec = ScenarioSpec.from_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}")
    if seed_override is not None:
        spec = replace(spec, seed=seed_override)
    return spec


def build_train_config(config, loss_override=None, seed_override=None) -> TrainConfig:
    merged = dict(DEFAULT_TRAIN)
    merged.update(config.get("train", {}))
    if loss_override is not None:
        merged["loss_kind"] = loss_override
    if seed_override is not None:
        merged["seed"] = seed_override
    try:
        return TrainConfig.from_config(merged)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid train config: {exc}")


def build_loss_spec(config) -> LossSpec:
    cfg = config.get("loss", {})
    try:
        return LossSpec(
            lambda_penalty=cfg.get("lambda_penalty", 5.0), rho=cfg.get("rho", 1.0)
        )
    except ValueError as exc:
        raise ConfigError(f"invalid loss spec: {exc}")


def build_bdmm(config, delta_override=None) -> BdmmState | None:
    cfg = config.get("bdmm")
    if cfg is None and delta_override is None:
        return None
    cfg = dict(cfg or {})
    if delta_override is not None:
        cfg["delta"] = delta_override
    try:
        return BdmmState(
            lam=cfg.get("lam", 0.0),
            delta=cfg.get("delta", 0.0),
            multiplier_lr=cfg.get("multiplier_lr", 0.05),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid multiplier state: {exc}")


def build_net(config, d, seed) -> MultiHeadNet | None:
    cfg = config.get("net")
    if cfg is None:
        return None
    try:
        return MultiHeadNet(
            d=d,
            trunk_widths=tuple(cfg.get("trunk_widths", (200, 200, 200))),
            head_widths=tuple(cfg.get("head_widths", (100, 100))),
            activation=cfg.get("activation", "elu"),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid net config: {exc}")


def ensure_out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_oracle(args) -> int:
    report = oracle.run_identity_suite(
        n_random=args.cases, seed=args.seed if args.seed is not None else 0,
        inject_error=args.inject_error,
    )
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.format_table())
    if not report.all_passed:
        failing = [c.name for c in report.checks if not c.passed]
        print(f"identity failures: {', '.join(failing)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    moment, beta, beta_tag = build_estimand(config)
    data, _ = build_data(config, seed_override=args.seed)
    train_config = build_train_config(config, loss_override=args.loss, seed_override=args.seed)
    loss_spec = build_loss_spec(config)
    bdmm = build_bdmm(config, delta_override=args.delta)
    net = build_net(config, d=data.d, seed=train_config.seed)
    try:
        model = train(
            data, moment, beta, train_config, loss_spec,
            net=net, bdmm=bdmm, beta_tag=beta_tag,
        )
    except ValueError as exc:
        raise ConfigError(f"training rejected the configuration: {exc}")
    out = ensure_out_dir(args)
    checkpoint_path = os.path.join(out, CHECKPOINT_FILE)
    history_path = os.path.join(out, HISTORY_FILE)
    with open(checkpoint_path, "w") as fh:
        json.dump(model.to_state(), fh)
    model.write_history_csv(history_path)
    last = model.history[-1]
    if args.json:
        print(json.dumps({
            "checkpoint": checkpoint_path,
            "history": history_path,
            "epochs": len(model.history),
            "final_constraint_violation": last["constraint_violation"],
            "final_val_loss": last["val_loss"],
        }, indent=2))
    else:
        print(f"checkpoint written to {checkpoint_path}")
        print(f"history written to {history_path} ({len(model.history)} epochs)")
        print(f"final constraint violation: {last['constraint_violation']:.6g}")
        print(f"final validation loss: {last['val_loss']:.6g}")
    return EXIT_OK


def load_checkpoint(path) -> TrainedModel:
    if path is None:
        raise ConfigError("estimate needs --checkpoint")
    try:
        with open(path) as fh:
            state = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}")
    try:
        return TrainedModel.from_state(state)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"checkpoint {path} does not match the expected layout: {exc}")


def estimate_rows(model: TrainedModel, data, names) -> list[dict]:
    """One row per requested estimator, errors isolated per row."""
    nuis = model.nuisances()
    shared = model.alpha_function()
    shared_error = None
    if shared is None and nuis.beta_perp_hat is not None:
        try:
            shared = rr_from_beta_perp(nuis, data)
        except DegenerateRieszError as exc:
            shared_error = str(exc)
    rows = []
    for name in names:
        try:
            if name == "direct":
                report = direct(nuis, data)
            elif name == "perp_dr":
                if nuis.beta_perp_hat is None:
                    raise ValueError("checkpoint has no fitted projection")
                report = perp_dr(nuis, data)
            else:
                if shared is None:
                    raise ValueError(shared_error or "no representer available")
                fn = {"ipw": lambda: ipw(shared, data),
                      "dr": lambda: dr(nuis, shared, data),
                      "tmle": lambda: tmle_linear(nuis, shared, data)}[name]
                report = fn()
        except (ValueError, DegenerateRieszError) as exc:
            rows.append({"estimator": name, "error": str(exc)})
            continue
        rows.append(report.to_dict())
    return rows


def format_estimate_table(rows) -> str:
    header = f"{'estimator':<10} {'psi_hat':>12} {'std_error':>12} {'ci95':>28} {'identity_diag':>14}"
    lines = [header, "-" * len(header)]
    for row in rows:
        if "error" in row:
            lines.append(f"{row['estimator']:<10} error: {row['error']}")
            continue
        lo, hi = row["ci95"]
        diag = row["diagnostics"]["moment_identity_error"]
        diag_txt = f"{diag:14.4g}" if diag is not None else " " * 14
        lines.append(
            f"{row['estimator']:<10} {row['psi_hat']:12.6g} {row['std_error']:12.6g} "
            f"[{lo:12.6g}, {hi:12.6g}] {diag_txt}"
        )
    return "\n".join(lines)


def cmd_estimate(args) -> int:
    config = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data, _ = build_data(config, seed_override=args.seed)
    names = tuple(args.estimator) if args.estimator else BENCH_ESTIMATORS
    unknown = set(names) - set(BENCH_ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimators {sorted(unknown)}; expected among {BENCH_ESTIMATORS}")
    try:
        rows = estimate_rows(model, data, names)
    except ValueError as exc:
        raise ConfigError(f"checkpoint does not fit this dataset: {exc}")
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(format_estimate_table(rows))
    if args.out:
        out = ensure_out_dir(args)
        with open(os.path.join(out, ESTIMATES_FILE), "w") as fh:
            json.dump(rows, fh, indent=2)
    return EXIT_OK


def build_benchmark_spec(config, args) -> BenchmarkSpec:
    data_cfg = config.get("data", {})
    if "scenario" not in data_cfg:
        raise ConfigError("benchmark needs a scenario data source with known ground truth")
    scenario = build_scenario(data_cfg["scenario"])
    moment, _, beta_tag = build_estimand(config)
    train_config = build_train_config(config, loss_override=args.loss)
    net_cfg = config.get("net", {})
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    replicates = args.replicates if args.replicates is not None else config.get("replicates", 20)
    estimators = tuple(config.get("estimators", BENCH_ESTIMATORS))
    try:
        return BenchmarkSpec(
            scenario=scenario,
            moment_config=moment.to_config(),
            train_config=train_config,
            loss_spec=build_loss_spec(config),
            replicates=replicates,
            seed=seed,
            beta_tag=beta_tag,
            trunk_widths=tuple(net_cfg.get("trunk_widths", (32,))),
            head_widths=tuple(net_cfg.get("head_widths", (16,))),
            activation=net_cfg.get("activation", "elu"),
            bdmm=build_bdmm(config, delta_override=args.delta),
            estimators=estimators,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid benchmark config: {exc}")


def format_summary_table(summary) -> str:
    header = f"{'estimator':<10} {'mae':>10} {'median_ae':>10} {'se_mae':>10} {'coverage':>10} {'n':>4}"
    lines = [header, "-" * len(header)]
    for row in summary:
        def cell(value, width=10):
            return f"{value:{width}.4g}" if value is not None else " " * (width - 2) + "NA"
        lines.append(
            f"{row['estimator']:<10} {cell(row['mae'])} {cell(row['median_ae'])} "
            f"{cell(row['se_mae'])} {cell(row['coverage'])} {row['n_replicates']:4d}"
        )
    return "\n".join(lines)


def cmd_benchmark(args) -> int:
    config = load_config(args.config)
    spec = build_benchmark_spec(config, args)
    rows, summary = run_benchmark(spec)
    out = ensure_out_dir(args)
    replicates_path = os.path.join(out, REPLICATES_FILE)
    summary_path = os.path.join(out, SUMMARY_FILE)
    write_replicates_csv(replicates_path, rows, spec.estimators)
    write_summary_csv(summary_path, summary)
    failed = sum(row["status"] != "ok" for row in rows)
    if args.json:
        print(json.dumps({
            "replicates": replicates_path,
            "summary": summary_path,
            "failed": failed,
            "total": len(rows),
            "table": summary,
        }, indent=2))
    else:
        print(format_summary_table(summary))
        print(f"replicate rows written to {replicates_path}")
        print(f"summary written to {summary_path}")
        if failed:
            print(f"{failed} of {len(rows)} replicates failed", file=sys.stderr)
    if failed > 0.1 * len(rows):
        return EXIT_FAILURE
    return EXIT_OK


def build_diagnose_spec(config, args) -> DiagnoseSpec:
    data_cfg = config.get("data", {})
    if "scenario" not in data_cfg:
        raise ConfigError("diagnose needs a scenario data source")
    scenario = build_scenario(data_cfg["scenario"])
    moment, _, beta_tag = build_estimand(config)
    train_config = build_train_config(config)
    net_cfg = config.get("net", {})
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    replicates = args.replicates if args.replicates is not None else config.get("replicates", 20)
    loss_kinds = tuple(args.loss) if args.loss else tuple(config.get("loss_kinds", ("constrained",)))
    rates = tuple(config.get("learning_rates", ()))
    try:
        return DiagnoseSpec(
            scenario=scenario,
            moment_config=moment.to_config(),
            train_config=train_config,
            loss_kinds=loss_kinds,
            learning_rates=rates,
            loss_spec=build_loss_spec(config),
            replicates=replicates,
            seed=seed,
            beta_tag=beta_tag,
            trunk_widths=tuple(net_cfg.get("trunk_widths", (32,))),
            head_widths=tuple(net_cfg.get("head_widths", (16,))),
            activation=net_cfg.get("activation", "elu"),
            bdmm=build_bdmm(config, delta_override=args.delta),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid diagnose config: {exc}")


def cmd_diagnose(args) -> int:
    config = load_config(args.config)
    spec = build_diagnose_spec(config, args)
    rows = run_diagnostics(spec)
    out = ensure_out_dir(args)
    paths = []
    for kind in spec.loss_kinds:
        path = os.path.join(out, f"trajectories_{kind}.csv")
        write_long_csv(path, [row for row in rows if row["loss_kind"] == kind])
        paths.append(path)
    if args.json:
        print(json.dumps({"trajectories": paths, "rows": len(rows)}, indent=2))
    else:
        for path in paths:
            print(f"trajectories written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdebias",
        description="Moment-constrained automatic debiasing: oracle checks, "
        "training, estimation, benchmarks, and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, loss=False, delta=False, replicates=False, checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override every configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        if loss:
            p.add_argument(
                "--loss", action="append", choices=("constrained", "ad", "bdmm"),
                help="loss kind override (repeatable for diagnose)",
            )
        if delta:
            p.add_argument("--delta", type=float, help="multiplier damping override")
        if replicates:
            p.add_argument("--replicates", type=int, help="replicate count override")
        if checkpoint:
            p.add_argument("--checkpoint", help="trained model checkpoint JSON")

    p_oracle = sub.add_parser("oracle", help="run the exact identity suite")
    common(p_oracle)
    p_oracle.add_argument("--cases", type=int, default=200, help="random distributions to draw")
    p_oracle.add_argument(
        "--inject-error", action="store_true",
        help="negate one reconstruction internally to prove the suite detects a break",
    )
    p_oracle.set_defaults(fn=cmd_oracle)

    p_train = sub.add_parser("train", help="fit the multi-headed network")
    common(p_train, loss=True, delta=True)
    p_train.set_defaults(fn=cmd_train)

    p_est = sub.add_parser("estimate", help="estimator table from a checkpoint")
    common(p_est, checkpoint=True)
    p_est.add_argument(
        "--estimator", action="append", choices=BENCH_ESTIMATORS,
        help="restrict output to these estimators (repeatable)",
    )
    p_est.set_defaults(fn=cmd_estimate)

    p_bench = sub.add_parser("benchmark", help="multi-replicate error study")
    common(p_bench, loss=True, delta=True, replicates=True)
    p_bench.set_defaults(fn=cmd_benchmark)

    p_diag = sub.add_parser("diagnose", help="per-epoch trajectory study")
    common(p_diag, loss=True, delta=True, replicates=True)
    p_diag.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "loss", None) is not None and args.command != "diagnose":
        if len(args.loss) > 1:
            parser.error(f"{args.command} takes a single --loss value")
        args.loss = args.loss[0]
    elif getattr(args, "loss", None) is None and hasattr(args, "loss"):
        args.loss = None
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
