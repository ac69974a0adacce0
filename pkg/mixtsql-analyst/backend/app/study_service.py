"""
Study Service
Monte Carlo studies of the estimator: bias, standard-error calibration,
bootstrap agreement, detection rates and Granger test size
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.causality_service import granger_test
from app.estimation_service import DEFAULT_MAX_ITER, DEFAULT_TOL, bootstrap_se, fit_qmle
from app.families import SamplingFamily, check_family_matches
from app.models import ModelSpec, ParamVector, validate_spec
from app.replication_service import get_replication_service
from app.simulation_service import DEFAULT_BURN_IN, Configuration, simulate_trajectory

logger = logging.getLogger(__name__)

# Bootstrap streams are offset far from the trajectory seeds base_seed + r
BOOTSTRAP_SEED_STRIDE = 1_000_003


class McStudyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ModelSpec
    theta: ParamVector
    families: Tuple[SamplingFamily, SamplingFamily]
    fit_spec: Optional[ModelSpec] = None
    n: int = Field(default=100, gt=0)
    reps: int = Field(default=500, ge=1)
    base_seed: int = 0
    burn_in: int = Field(default=DEFAULT_BURN_IN, ge=0)
    bootstrap_B: Optional[int] = Field(default=None, ge=1)
    bootstrap_families: Optional[Tuple[SamplingFamily, SamplingFamily]] = None
    qlr_direction: Optional[str] = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    @property
    def fitted_spec(self) -> ModelSpec:
        return self.fit_spec or self.spec

    @classmethod
    def from_configuration(cls, config: Configuration, **overrides) -> "McStudyConfig":
        values = dict(
            spec=config.spec,
            theta=config.theta,
            families=config.families,
            fit_spec=config.fit_spec,
            bootstrap_families=config.bootstrap_families,
        )
        values.update(overrides)
        return cls(**values)


def mc_replication(payload) -> Dict[str, Any]:
    """Simulate, fit and optionally bootstrap / test one Monte Carlo replication"""
    cfg, r = payload
    rng = np.random.default_rng(cfg.base_seed + r)
    series = simulate_trajectory(cfg.spec, cfg.theta, cfg.families, cfg.n, burn_in=cfg.burn_in, rng=rng)
    ctx = validate_spec(cfg.fitted_spec, series)
    fit = fit_qmle(ctx, tol=cfg.tol, max_iter=cfg.max_iter)
    record: Dict[str, Any] = {
        "estimate": fit.coefficients,
        "se": fit.se,
        "ci": fit.ci,
        "phi": np.array([fit.phi1_hat, fit.phi2_hat]),
        "converged": fit.converged,
    }
    if cfg.bootstrap_B:
        families = cfg.bootstrap_families or cfg.families
        boot = bootstrap_se(
            ctx, fit, cfg.bootstrap_B, families[0], families[1],
            seed=cfg.base_seed + BOOTSTRAP_SEED_STRIDE * (r + 1),
            workers=1, burn_in=cfg.burn_in, tol=cfg.tol, max_iter=cfg.max_iter,
        )
        record.update(boot_se=boot.se, boot_quantile_ci=boot.quantile_ci, boot_normal_ci=boot.normal_ci)
    if cfg.qlr_direction:
        test = granger_test(ctx, cfg.qlr_direction, tol=cfg.tol, max_iter=cfg.max_iter)
        record.update(qlr=test.qlr, qlr_df=test.df, qlr_p=test.p_value)
    return record


def _excludes_zero(ci: np.ndarray) -> np.ndarray:
    return (ci[:, 0] > 0.0) | (ci[:, 1] < 0.0)


@dataclass(frozen=True)
class McStudyReport:
    rows: pd.DataFrame          # one row per replication x coefficient
    summary: pd.DataFrame       # one row per coefficient
    reps: int
    failed: int
    failure_codes: Dict[str, int]
    phi_summary: Dict[str, Optional[float]]
    qlr_summary: Optional[Dict[str, float]] = None

    @property
    def degenerate(self) -> bool:
        # Monte Carlo spreads need at least two successful replications
        return self.reps - self.failed < 2

    def to_dict(self) -> Dict[str, Any]:
        summary = self.summary.astype(object).where(self.summary.notna(), None)
        return {
            "reps": self.reps,
            "succeeded": self.reps - self.failed,
            "failed": self.failed,
            "failure_codes": dict(sorted(self.failure_codes.items())),
            "degenerate": self.degenerate,
            "coefficients": summary.to_dict(orient="records"),
            "phi": self.phi_summary,
            "qlr": self.qlr_summary,
        }


def _sd(values: np.ndarray) -> Optional[float]:
    return float(np.std(values, ddof=1)) if len(values) > 1 else None


def summarize(cfg: McStudyConfig, records: List[Tuple[int, Dict[str, Any]]], failed: int,
              failure_codes: Dict[str, int]) -> McStudyReport:
    names = cfg.fitted_spec.coefficient_names()
    truth = cfg.theta.named(cfg.spec)
    true_values = np.array([truth.get(name, 0.0) for name in names])
    has_boot = bool(cfg.bootstrap_B)

    frames = []
    for r, rec in records:
        frame = pd.DataFrame(
            {
                "replication": r,
                "parameter": names,
                "true": true_values,
                "estimate": rec["estimate"],
                "se": rec["se"],
                "ci_low": rec["ci"][:, 0],
                "ci_high": rec["ci"][:, 1],
                "excludes_zero": _excludes_zero(rec["ci"]),
                "converged": rec["converged"],
            }
        )
        if has_boot:
            frame["boot_se"] = rec["boot_se"]
            frame["boot_q_low"] = rec["boot_quantile_ci"][:, 0]
            frame["boot_q_high"] = rec["boot_quantile_ci"][:, 1]
            frame["boot_quantile_excludes_zero"] = _excludes_zero(rec["boot_quantile_ci"])
            frame["boot_normal_excludes_zero"] = _excludes_zero(rec["boot_normal_ci"])
        frames.append(frame)
    rows = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["replication", "parameter"])

    summary_rows = []
    for k, name in enumerate(names):
        sub = rows[rows["parameter"] == name] if frames else rows.iloc[0:0]
        est = sub["estimate"].to_numpy(dtype=float) if len(sub) else np.empty(0)
        mc_sd = _sd(est)
        mean_se = float(sub["se"].mean()) if len(sub) else None
        row = {
            "parameter": name,
            "true": float(true_values[k]),
            "mean_estimate": float(est.mean()) if len(est) else None,
            "bias": float(est.mean() - true_values[k]) if len(est) else None,
            "mc_sd": mc_sd,
            "mean_se": mean_se,
            "se_ratio": mean_se / mc_sd if mc_sd and mean_se is not None else None,
            "detection_theory": float(sub["excludes_zero"].mean()) if len(sub) else None,
        }
        if has_boot:
            row.update(
                mean_boot_se=float(sub["boot_se"].mean()) if len(sub) else None,
                median_boot_theory_ratio=float(np.median(sub["boot_se"] / sub["se"])) if len(sub) else None,
                detection_boot_quantile=float(sub["boot_quantile_excludes_zero"].mean()) if len(sub) else None,
                detection_boot_normal=float(sub["boot_normal_excludes_zero"].mean()) if len(sub) else None,
            )
        summary_rows.append(row)

    phis = np.array([rec["phi"] for _, rec in records]) if records else np.empty((0, 2))
    phi_summary = {
        "phi1_true": cfg.theta.phi1,
        "phi2_true": cfg.theta.phi2,
        "phi1_mean": float(phis[:, 0].mean()) if len(phis) else None,
        "phi2_mean": float(phis[:, 1].mean()) if len(phis) else None,
        "phi1_sd": _sd(phis[:, 0]),
        "phi2_sd": _sd(phis[:, 1]),
    }
    qlr_summary = None
    if cfg.qlr_direction and records:
        qlr = np.array([rec["qlr"] for _, rec in records])
        p = np.array([rec["qlr_p"] for _, rec in records])
        qlr_summary = {
            "direction": cfg.qlr_direction,
            "df": int(records[0][1]["qlr_df"]),
            "mean_qlr": float(qlr.mean()),
            "rejection_rate_5pct": float(np.mean(p < 0.05)),
        }
    return McStudyReport(
        rows=rows,
        summary=pd.DataFrame(summary_rows),
        reps=cfg.reps,
        failed=failed,
        failure_codes=failure_codes,
        phi_summary=phi_summary,
        qlr_summary=qlr_summary,
    )


def run_mc_study(cfg: McStudyConfig, workers: Optional[int] = None, progress: bool = False) -> McStudyReport:
    """
    Replication r draws its trajectory from seed base_seed + r; results are
    aggregated in replication order, so reports do not depend on the
    worker count.
    """
    check_family_matches(cfg.spec, cfg.families)
    if cfg.bootstrap_B and cfg.bootstrap_families:
        check_family_matches(cfg.fitted_spec, cfg.bootstrap_families)
    logger.info(f"🔄 Monte Carlo study: {cfg.reps} replications at n={cfg.n}")
    outcomes = get_replication_service(workers).run_batch(
        mc_replication, [(cfg, r) for r in range(cfg.reps)], label="mc-study", progress=progress
    )
    records = [(o.index, o.value) for o in outcomes if o.ok]
    failure_codes: Dict[str, int] = {}
    for o in outcomes:
        if not o.ok:
            failure_codes[o.error] = failure_codes.get(o.error, 0) + 1
    failed = cfg.reps - len(records)
    report = summarize(cfg, records, failed, failure_codes)
    if report.degenerate:
        logger.warning("⚠️ Fewer than two successful replications; Monte Carlo SDs are undefined")
    logger.info(f"✅ Monte Carlo study complete: {len(records)}/{cfg.reps} replications succeeded")
    return report
