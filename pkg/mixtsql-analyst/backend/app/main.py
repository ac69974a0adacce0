"""
MixTSQL Analyst command-line entry point

    python -m app.main <command> [flags]

Commands: fit, granger, simulate, bootstrap, mc-study, diagnose, forecast.
Every command writes its artifacts to --out-dir, prints a JSON summary to
stdout and logs progress to stderr.
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app import __version__
from app.causality_service import granger_test
from app.config import DIRECTION_CHOICES, RunConfig, load_run_config
from app.diagnostics_service import acf_pacf, ccf, pit, pit_uniformity_test, residuals
from app.errors import ConfigError, ErrorPayload, InvalidReplicationCount, MixTSQLError
from app.estimation_service import FitResult, bootstrap_se, fit_qmle
from app.families import FamilyKind, family
from app.forecast_service import gaussian_baseline, osa_forecast
from app.models import (
    LinkKind,
    ModelContext,
    ParamVector,
    SeriesDomain,
    TransformKind,
    VarianceKind,
    validate_spec,
)
from app.simulation_service import configuration, simulate_trajectory
from app.series_utils import (
    dumps_json,
    ingest_csv,
    write_csv_artifact,
    write_json_artifact,
    write_series_csv,
)
from app.study_service import McStudyConfig, run_mc_study

logger = logging.getLogger("mixtsql")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MODEL_ERROR = 2


class CommandSummary(BaseModel):
    """Success summary printed to stdout after a command"""

    status: str = "success"
    command: str
    artifacts: List[str]
    config_hash: str
    result: Dict[str, Any]


class Artifacts:
    """Collects the files a command writes, stamped with the run's provenance"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.config_hash = config.config_hash()
        self.written: List[str] = []

    def provenance(self) -> Dict[str, Any]:
        return {
            "version": __version__,
            "config": self.config.effective_dict(),
            "config_hash": self.config_hash,
            "seed": self.config.seed,
        }

    def csv(self, name: str, frame: pd.DataFrame) -> None:
        write_csv_artifact(frame, self.out_dir / name, self.config_hash, self.config.seed)
        self.written.append(name)

    def json(self, name: str, payload: Dict[str, Any]) -> None:
        write_json_artifact({**payload, "provenance": self.provenance()}, self.out_dir / name)
        self.written.append(name)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_context(config: RunConfig) -> ModelContext:
    if not config.input:
        raise ConfigError("this command needs --input")
    data = ingest_csv(
        config.input,
        col_y1=config.col_y1,
        col_y2=config.col_y2,
        col_date=config.col_date,
        domain1=config.y1_domain,
        domain2=config.y2_domain,
        standardize_y1=config.standardize_y1,
        weekly=config.weekly,
    )
    return validate_spec(config.model_spec(), data)


def _fit(ctx: ModelContext, config: RunConfig) -> FitResult:
    fit = fit_qmle(ctx, tol=config.tol, max_iter=config.max_iter)
    logger.info(f"✅ Fit {fit.convergence.status.value} after {fit.convergence.iterations} iterations")
    return fit


def _generator(config: RunConfig):
    """(spec, theta, families, bootstrap families, fit spec) for simulation commands"""
    if config.configuration:
        preset = configuration(config.configuration, gamma2_zero=config.null_gamma2)
        families = preset.families
        if config.family1 or config.family2:
            families = config.families(preset.spec)
        boot = preset.bootstrap_families
        if config.boot_family1 or config.boot_family2:
            boot = config.families(preset.fitted_spec, boot=True)
        return preset.spec, preset.theta, families, boot, preset.fit_spec
    if not config.theta:
        raise ConfigError("simulation needs --configuration or --theta")
    spec = config.model_spec()
    try:
        theta = ParamVector.from_named(spec, config.theta)
    except ValueError as exc:
        raise ConfigError(f"invalid --theta: {exc}")
    return spec, theta, config.families(spec), config.families(spec, boot=True), None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    ctx = _load_context(config)
    fit = _fit(ctx, config)
    out.json("fit.json", {"status": "success", "fit": fit.to_dict()})
    out.csv("coefficients.csv", fit.coefficient_table())
    means = pd.DataFrame(
        {
            "t": np.arange(ctx.m + 1, ctx.n + 1),
            "y1": ctx.response(1),
            "mu1": fit.mean_path.mu(1),
            "y2": ctx.response(2),
            "mu2": fit.mean_path.mu(2),
        }
    )
    out.csv("fitted_means.csv", means)
    return {
        "converged": fit.converged,
        "qll": fit.qll,
        "phi1_hat": fit.phi1_hat,
        "phi2_hat": fit.phi2_hat,
        "coefficients": dict(zip(fit.coefficient_names, fit.coefficients.tolist())),
    }


def cmd_granger(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    ctx = _load_context(config)
    directions = ["1->2", "2->1"] if config.direction == "both" else [config.direction]
    results = {
        d: granger_test(ctx, d, tol=config.tol, max_iter=config.max_iter).to_dict() for d in directions
    }
    out.json("granger.json", {"status": "success", "tests": results})
    return {"tests": results}


def cmd_simulate(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    spec, theta, families, _, _ = _generator(config)
    rng = np.random.default_rng(config.seed)
    series = simulate_trajectory(spec, theta, families, config.n, burn_in=config.burn_in, rng=rng)
    write_series_csv(
        series, out.out_dir / "series.csv", out.config_hash, config.seed,
        col_y1=config.col_y1, col_y2=config.col_y2,
    )
    out.written.append("series.csv")
    summary = {
        "n": series.n,
        "domain1": series.domain1.value,
        "domain2": series.domain2.value,
        "families": [f.kind.value for f in families],
        "theta": {**theta.named(spec), "phi1": theta.phi1, "phi2": theta.phi2},
    }
    out.json("simulate.json", {"status": "success", **summary})
    return summary


def cmd_bootstrap(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    ctx = _load_context(config)
    fit = _fit(ctx, config)
    families = config.families(ctx.spec, boot=True)
    boot = bootstrap_se(
        ctx, fit, config.boot_B if config.boot_B is not None else 200, families[0], families[1],
        seed=config.seed, workers=config.threads, burn_in=config.burn_in,
        tol=config.tol, max_iter=config.max_iter, progress=config.progress,
    )
    table = boot.to_frame()
    table.insert(1, "estimate", np.concatenate([fit.coefficients, [fit.phi1_hat, fit.phi2_hat]]))
    table.insert(2, "se_theory", np.concatenate([fit.se, [np.nan, np.nan]]))
    out.csv("bootstrap_se.csv", table)
    out.json("bootstrap.json", {"status": "success", "bootstrap": boot.to_dict(), "fit": fit.to_dict()})
    return boot.to_dict()


def cmd_mc_study(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    spec, theta, families, boot_families, fit_spec = _generator(config)
    if config.boot_B is not None and config.boot_B < 1:
        raise InvalidReplicationCount(f"bootstrap needs B >= 1, got {config.boot_B}", B=config.boot_B)
    study = McStudyConfig(
        spec=spec,
        theta=theta,
        families=families,
        fit_spec=fit_spec,
        n=config.n,
        reps=config.reps,
        base_seed=config.seed,
        burn_in=config.burn_in,
        bootstrap_B=config.boot_B,
        bootstrap_families=boot_families,
        qlr_direction=config.qlr_direction,
        tol=config.tol,
        max_iter=config.max_iter,
    )
    report = run_mc_study(study, workers=config.threads, progress=config.progress)
    out.csv("mc_rows.csv", report.rows)
    out.csv("mc_summary.csv", report.summary)
    out.json("mc_study.json", {"status": "success", "study": report.to_dict()})
    return {"reps": report.reps, "failed": report.failed, "degenerate": report.degenerate}


def cmd_diagnose(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    ctx = _load_context(config)
    y1, y2 = ctx.data.values(1), ctx.data.values(2)
    acf1, pacf1 = acf_pacf(y1, config.max_lag)
    acf2, pacf2 = acf_pacf(y2, config.max_lag)
    out.csv(
        "acf_pacf.csv",
        pd.DataFrame({"acf_y1": acf1, "pacf_y1": pacf1, "acf_y2": acf2, "pacf_y2": pacf2}).reset_index(),
    )
    out.csv("ccf.csv", ccf(y1, y2, config.max_lag).to_frame().reset_index())

    fit = _fit(ctx, config)
    r1, r2 = residuals(fit)
    max_lag = min(config.max_lag, len(r1) - 1)
    racf1, rpacf1 = acf_pacf(r1, max_lag)
    racf2, rpacf2 = acf_pacf(r2, max_lag)
    out.csv(
        "residual_acf.csv",
        pd.DataFrame({"acf_r1": racf1, "pacf_r1": rpacf1, "acf_r2": racf2, "pacf_r2": rpacf2}).reset_index(),
    )

    pit_summary = {}
    for margin in (1, 2):
        reference = family(config.pi_family) if config.pi_family and margin == config.margin else None
        hist = pit(fit, margin, reference, bin_count=config.bins)
        statistic, p_value = pit_uniformity_test(hist)
        out.csv(f"pit_margin{margin}.csv", hist.to_frame())
        pit_summary[f"margin{margin}"] = {**hist.to_dict(), "chi2": statistic, "p_value": p_value}

    payload = {
        "pit": pit_summary,
        "residual_variance": [float(np.var(r1)), float(np.var(r2))],
        "n": ctx.n,
        "max_lag": config.max_lag,
    }
    out.json("diagnose.json", {"status": "success", **payload})
    return payload


def cmd_forecast(config: RunConfig, out: Artifacts) -> Dict[str, Any]:
    ctx = _load_context(config)
    if config.train_T is None:
        raise ConfigError("forecast needs --train-T")
    reference = family(config.pi_family) if config.pi_family else None
    run_q = osa_forecast(
        ctx, config.train_T, reference, margin=config.margin,
        tol=config.tol, max_iter=config.max_iter, progress=config.progress,
    )
    run_g = gaussian_baseline(ctx, config.train_T, margin=config.margin)
    out.csv("forecast.csv", run_q.to_frame())
    out.csv("forecast_gaussian.csv", run_g.to_frame())
    payload = {"mixtsql": run_q.to_dict(), "gaussian": run_g.to_dict()}
    out.json("forecast.json", {"status": "success", **payload})
    return payload


COMMANDS: Dict[str, Callable[[RunConfig, Artifacts], Dict[str, Any]]] = {
    "fit": cmd_fit,
    "granger": cmd_granger,
    "simulate": cmd_simulate,
    "bootstrap": cmd_bootstrap,
    "mc-study": cmd_mc_study,
    "diagnose": cmd_diagnose,
    "forecast": cmd_forecast,
}


def _emit_error(payload: ErrorPayload, out_dir: Path) -> None:
    print(dumps_json(payload))
    try:
        write_json_artifact(payload, out_dir / "error.json")
    except OSError:
        logger.error(f"❌ Could not write error.json to {out_dir}")


def run(command: str, config: RunConfig) -> int:
    """Execute one command; returns the process exit status"""
    if command not in COMMANDS:
        _emit_error(
            ErrorPayload(error="UnknownCommand", message=f"unknown command '{command}'"), Path(config.out_dir)
        )
        return EXIT_UNEXPECTED
    out = Artifacts(config)
    logger.info(f"🔄 Running {command} (config {out.config_hash[:12]}, seed {config.seed})")
    try:
        result = COMMANDS[command](config, out)
    except MixTSQLError as exc:
        logger.error(f"❌ {exc.code}: {exc.message}")
        _emit_error(exc.payload(), out.out_dir)
        return EXIT_MODEL_ERROR
    except Exception as exc:
        logger.exception(f"❌ Unexpected failure in {command}")
        _emit_error(ErrorPayload(error=type(exc).__name__, message=str(exc)), out.out_dir)
        return EXIT_UNEXPECTED

    summary = CommandSummary(command=command, artifacts=out.written, config_hash=out.config_hash, result=result)
    print(dumps_json(summary))
    logger.info(f"✅ {command} finished; artifacts in {out.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parse_theta(text: str) -> Dict[str, float]:
    """'beta1_0=1,gamma1_l1=-0.2' or a JSON object"""
    text = text.strip()
    if text.startswith("{"):
        return {k: float(v) for k, v in json.loads(text).items()}
    values = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        name, _, value = item.partition("=")
        values[name.strip()] = float(value)
    return values


def _choices(enum) -> List[str]:
    return [e.value for e in enum]


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--input")
    shared.add_argument("--config", dest="config_path")
    shared.add_argument("--out-dir", dest="out_dir")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threads", type=int)
    shared.add_argument("--verbose", action="store_true")
    shared.add_argument("--progress", action="store_const", const=True)
    shared.add_argument("--col-y1", dest="col_y1")
    shared.add_argument("--col-y2", dest="col_y2")
    shared.add_argument("--col-date", dest="col_date")
    shared.add_argument("--y1-domain", dest="y1_domain", choices=_choices(SeriesDomain))
    shared.add_argument("--y2-domain", dest="y2_domain", choices=_choices(SeriesDomain))
    shared.add_argument("--standardize-y1", dest="standardize_y1", action="store_const", const=True)
    shared.add_argument("--weekly", action="store_const", const=True)
    shared.add_argument("--own-lags-1", dest="own_lags_1")
    shared.add_argument("--cross-lags-1", dest="cross_lags_1")
    shared.add_argument("--own-lags-2", dest="own_lags_2")
    shared.add_argument("--cross-lags-2", dest="cross_lags_2")
    shared.add_argument("--link1", choices=_choices(LinkKind))
    shared.add_argument("--link2", choices=_choices(LinkKind))
    shared.add_argument("--transform1", choices=_choices(TransformKind))
    shared.add_argument("--transform2", choices=_choices(TransformKind))
    shared.add_argument("--var1", choices=_choices(VarianceKind))
    shared.add_argument("--var2", choices=_choices(VarianceKind))
    shared.add_argument("--tol", type=float)
    shared.add_argument("--max-iter", dest="max_iter", type=int)

    generator = argparse.ArgumentParser(add_help=False)
    generator.add_argument("--configuration", help="preset C1, C2 or C3")
    generator.add_argument("--null-gamma2", dest="null_gamma2", action="store_const", const=True)
    generator.add_argument("--theta", type=_parse_theta, help="true parameters, e.g. beta1_0=1,phi1=0.2")
    generator.add_argument("--n", type=int)
    generator.add_argument("--family1", choices=_choices(FamilyKind))
    generator.add_argument("--family2", choices=_choices(FamilyKind))

    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument("--boot-B", dest="boot_B", type=int)
    boot.add_argument("--boot-family1", dest="boot_family1", choices=_choices(FamilyKind))
    boot.add_argument("--boot-family2", dest="boot_family2", choices=_choices(FamilyKind))

    burn = argparse.ArgumentParser(add_help=False)
    burn.add_argument("--burn-in", dest="burn_in", type=int)

    parser = argparse.ArgumentParser(prog="mixtsql", description="MixTSQL bivariate quasi-likelihood models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", parents=[shared], help="QMLE fit with sandwich standard errors")
    granger = sub.add_parser("granger", parents=[shared], help="QLR Granger causality test")
    granger.add_argument("--direction", choices=DIRECTION_CHOICES)
    sub.add_parser("simulate", parents=[shared, generator, burn], help="simulate a trajectory")
    sub.add_parser("bootstrap", parents=[shared, boot, burn], help="pseudo-parametric bootstrap SEs")
    study = sub.add_parser("mc-study", parents=[shared, generator, boot, burn], help="Monte Carlo study")
    study.add_argument("--reps", type=int)
    study.add_argument("--qlr-direction", dest="qlr_direction", choices=DIRECTION_CHOICES[:2])
    diagnose = sub.add_parser("diagnose", parents=[shared], help="ACF/PACF/CCF, residuals and PIT")
    diagnose.add_argument("--max-lag", dest="max_lag", type=int)
    diagnose.add_argument("--bins", type=int)
    diagnose.add_argument("--margin", type=int, choices=(1, 2))
    diagnose.add_argument("--pi-family", dest="pi_family", choices=_choices(FamilyKind))
    forecast = sub.add_parser("forecast", parents=[shared], help="one-step-ahead forecasting")
    forecast.add_argument("--train-T", dest="train_T", type=int)
    forecast.add_argument("--margin", type=int, choices=(1, 2))
    forecast.add_argument("--pi-family", dest="pi_family", choices=_choices(FamilyKind))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config_path")
    verbose = args.pop("verbose")
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_run_config(config_path, args)
    except MixTSQLError as exc:
        logger.error(f"❌ {exc.code}: {exc.message}")
        _emit_error(exc.payload(), Path(args.get("out_dir") or "out"))
        return EXIT_MODEL_ERROR
    return run(command, config)


if __name__ == "__main__":
    sys.exit(main())
