"""
Estimation Service
Quasi-maximum-likelihood fitting, dispersion estimates, sandwich covariance
and pseudo-parametric bootstrap standard errors
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy import optimize, stats

from app.errors import InvalidReplicationCount, SingularS2, ZeroVarianceDenominator
from app.models import LinkKind, ModelContext, ParamVector
from app.quasi_likelihood import (
    EPS,
    MeanPath,
    expected_information,
    link_function,
    mean_path,
    objective_and_gradient,
    quasi_loglik,
    score_contributions,
    variance,
)

logger = logging.getLogger(__name__)

Z_975 = float(stats.norm.ppf(0.975))
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
MAX_CONDITION = 1e14


class FitStatus(str, Enum):
    CONVERGED = "converged"
    NON_CONVERGENCE = "non_convergence"


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm: float
    tolerance: float
    status: FitStatus
    optimizer: str
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "tolerance": self.tolerance,
            "status": self.status.value,
            "optimizer": self.optimizer,
            "message": self.message,
        }


@dataclass(frozen=True)
class FitResult:
    """
    Outcome of a QMLE fit. `cov` is the coefficient covariance (n - m)^-1 Sigma
    in flattening order; `cov`, `se` and `ci` are None when the covariance was
    not requested.
    """

    ctx: ModelContext
    theta_hat: ParamVector
    phi1_hat: float
    phi2_hat: float
    cov: Optional[np.ndarray]
    se: Optional[np.ndarray]
    ci: Optional[np.ndarray]
    qll: float
    mean_path: MeanPath
    convergence: ConvergenceReport
    degenerate_dispersion: Tuple[bool, bool] = (False, False)

    @property
    def converged(self) -> bool:
        return self.convergence.status == FitStatus.CONVERGED

    @property
    def coefficient_names(self) -> List[str]:
        return self.ctx.spec.coefficient_names()

    @property
    def coefficients(self) -> np.ndarray:
        return self.theta_hat.flatten()

    def phi_hat(self, j: int) -> float:
        return self.phi1_hat if j == 1 else self.phi2_hat

    @property
    def boundary_clamped(self) -> Tuple[bool, bool]:
        return (
            self.ctx.boundary_clamped[0] or self.mean_path.clamped[0],
            self.ctx.boundary_clamped[1] or self.mean_path.clamped[1],
        )

    def coefficient_table(self) -> pd.DataFrame:
        """Parameter, estimate and 95% CI, one row per coefficient"""
        table = pd.DataFrame({"parameter": self.coefficient_names, "estimate": self.coefficients})
        if self.se is not None:
            table["se"] = self.se
            table["ci_low"] = self.ci[:, 0]
            table["ci_high"] = self.ci[:, 1]
        return table

    def to_dict(self) -> Dict[str, Any]:
        coefficients = []
        for i, name in enumerate(self.coefficient_names):
            row = {"name": name, "estimate": float(self.coefficients[i])}
            if self.se is not None:
                row["se"] = float(self.se[i])
                row["ci"] = [float(self.ci[i, 0]), float(self.ci[i, 1])]
            coefficients.append(row)
        return {
            "coefficients": coefficients,
            "phi1_hat": self.phi1_hat,
            "phi2_hat": self.phi2_hat,
            "qll": self.qll,
            "n": self.ctx.n,
            "m": self.ctx.m,
            "cov": None if self.cov is None else self.cov.tolist(),
            "convergence": self.convergence.to_dict(),
            "degenerate_dispersion": list(self.degenerate_dispersion),
            "boundary_clamped": list(self.boundary_clamped),
        }


def initial_coefficients(ctx: ModelContext) -> np.ndarray:
    """Intercepts at g(sample mean of the response), lag coefficients at zero"""
    x0 = np.zeros(ctx.spec.n_coefficients)
    for j in (1, 2):
        eq = ctx.spec.equation(j)
        mean = float(np.mean(ctx.response(j)))
        if eq.link.kind == LinkKind.LOGIT:
            mean = min(max(mean, EPS), 1.0 - EPS)
        elif eq.link.kind == LinkKind.LOG:
            mean = max(mean, EPS)
        x0[ctx.spec.block_slice(j).start] = float(link_function(mean, eq.link))
    return x0


def _criterion(ctx: ModelContext, flat: np.ndarray) -> Tuple[float, float]:
    """(max-norm of the score, 1 + |Q|) at unit dispersions"""
    value, grad = objective_and_gradient(ctx, flat)
    return float(np.max(np.abs(grad))), 1.0 + abs(value)


def _fisher_scoring(ctx: ModelContext, flat: np.ndarray, tol: float, max_steps: int = 50):
    """Newton steps with the expected information, halving on objective increase"""
    spec = ctx.spec
    x = flat.copy()
    steps = 0
    for steps in range(1, max_steps + 1):
        f0, grad = objective_and_gradient(ctx, x)
        if np.max(np.abs(grad)) <= tol * (1.0 + abs(f0)):
            return x, steps - 1
        info = expected_information(ctx, ParamVector.unflatten(spec, x))
        try:
            direction = np.linalg.solve(info, -grad)
        except np.linalg.LinAlgError:
            return x, steps
        step = 1.0
        for _ in range(30):
            candidate = x + step * direction
            try:
                f1, _ = objective_and_gradient(ctx, candidate)
            except Exception:
                f1 = np.inf
            if np.isfinite(f1) and f1 <= f0 + 1e-12 * abs(f0):
                x = candidate
                break
            step *= 0.5
        else:
            return x, steps
    return x, steps


def fit_qmle(
    ctx: ModelContext,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    compute_covariance: bool = True,
) -> FitResult:
    """
    Minimize -Q(theta) over the regression coefficients with BFGS and the
    analytic score, then estimate dispersions and the sandwich covariance.
    A fit that misses the tolerance is returned with status NON_CONVERGENCE.
    """
    spec = ctx.spec
    x0 = initial_coefficients(ctx)

    def fun(x):
        return objective_and_gradient(ctx, x)

    _, scale0 = _criterion(ctx, x0)
    result = optimize.minimize(
        fun, x0, jac=True, method="BFGS",
        options={"gtol": tol * scale0 * 0.1, "maxiter": max_iter},
    )
    x = result.x
    iterations = int(result.nit)
    optimizer_used = "bfgs"
    message = str(result.message)

    # Polish to well below the reporting tolerance; cheap near the optimum
    x, extra = _fisher_scoring(ctx, x, tol * 1e-2)
    iterations += extra
    grad_norm, scale = _criterion(ctx, x)

    if not np.isfinite(grad_norm) or grad_norm > tol * scale:
        logger.warning("⚠️ BFGS did not reach tolerance, restarting from a simplex search")
        simplex = optimize.minimize(
            lambda z: fun(z)[0], x, method="Nelder-Mead",
            options={"maxiter": max_iter * len(x), "xatol": 1e-10, "fatol": 1e-12},
        )
        retry = optimize.minimize(
            fun, simplex.x, jac=True, method="BFGS",
            options={"gtol": tol * scale * 0.1, "maxiter": max_iter},
        )
        x, extra = _fisher_scoring(ctx, retry.x, tol * 1e-2)
        iterations += int(simplex.nit) + int(retry.nit) + extra
        optimizer_used = "bfgs+nelder-mead"
        message = str(retry.message)
        grad_norm, scale = _criterion(ctx, x)

    status = FitStatus.CONVERGED if grad_norm <= tol * scale else FitStatus.NON_CONVERGENCE
    if status == FitStatus.NON_CONVERGENCE:
        logger.warning(f"⚠️ QMLE did not converge: gradient max-norm {grad_norm:.3e}")

    coef_only = ParamVector.unflatten(spec, x)
    phi1_hat, phi2_hat = estimate_dispersion(ctx, coef_only)
    degenerate = (phi1_hat <= 0.0, phi2_hat <= 0.0)
    theta_hat = coef_only.with_dispersions(
        phi1_hat if phi1_hat > 0 else 1.0, phi2_hat if phi2_hat > 0 else 1.0
    )

    cov = se = ci = None
    if compute_covariance:
        cov = sandwich_covariance(ctx, theta_hat, (phi1_hat, phi2_hat))
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        ci = np.column_stack([x - Z_975 * se, x + Z_975 * se])

    path = mean_path(ctx, theta_hat)
    if any(path.clamped):
        logger.warning(f"⚠️ Fitted means hit the boundary clamp (margins: {path.clamped})")

    return FitResult(
        ctx=ctx,
        theta_hat=theta_hat,
        phi1_hat=float(phi1_hat),
        phi2_hat=float(phi2_hat),
        cov=cov,
        se=se,
        ci=ci,
        qll=quasi_loglik(ctx, theta_hat),
        mean_path=path,
        convergence=ConvergenceReport(
            iterations=iterations,
            grad_norm=grad_norm,
            tolerance=tol * scale,
            status=status,
            optimizer=optimizer_used,
            message=message,
        ),
        degenerate_dispersion=degenerate,
    )


def estimate_dispersion(ctx: ModelContext, theta_hat: ParamVector) -> Tuple[float, float]:
    """Method of moments: sum (y - mu)^2 / sum V(mu) over t = m+1..n"""
    path = mean_path(ctx, theta_hat)
    phis = []
    for j in (1, 2):
        eq = ctx.spec.equation(j)
        mu = path.mu(j)
        denominator = float(np.sum(variance(mu, eq.variance)))
        if not denominator > 0:
            raise ZeroVarianceDenominator(
                f"sum of fitted variances is {denominator} for equation {j}", equation=j
            )
        phi = float(np.sum((ctx.response(j) - mu) ** 2)) / denominator
        if phi <= 0.0:
            logger.warning(f"⚠️ Dispersion estimate of equation {j} is zero (perfect fit)")
        phis.append(phi)
    return phis[0], phis[1]


@dataclass(frozen=True)
class SandwichParts:
    s1: np.ndarray
    s2: np.ndarray
    sigma: np.ndarray
    n_eff: int

    @property
    def cov(self) -> np.ndarray:
        return self.sigma / self.n_eff


def sandwich_components(
    ctx: ModelContext, theta_hat: ParamVector, phi_hats: Sequence[float]
) -> SandwichParts:
    """
    S1 = mean of U_t U_t', S2 = mean of H_t, Sigma = S2^-1 S1 S2^-1, all
    normalized by the number of summands n - m. Degenerate (zero) dispersions
    are replaced by 1, which leaves Sigma unchanged.
    """
    phis = [float(p) if p > 0 else 1.0 for p in phi_hats]
    theta = theta_hat.with_dispersions(phis[0], phis[1])
    n_eff = ctx.n_eff
    u = score_contributions(ctx, theta)
    s1 = u.T @ u / n_eff
    s2 = expected_information(ctx, theta) / n_eff
    if not np.isfinite(s2).all() or np.linalg.cond(s2) > MAX_CONDITION:
        raise SingularS2("expected information matrix S2 is singular", condition=float(np.linalg.cond(s2)))
    try:
        s2_inv = np.linalg.inv(s2)
    except np.linalg.LinAlgError as exc:
        raise SingularS2(f"expected information matrix S2 is singular: {exc}")
    sigma = s2_inv @ s1 @ s2_inv
    sigma = 0.5 * (sigma + sigma.T)
    return SandwichParts(s1=s1, s2=s2, sigma=sigma, n_eff=n_eff)


def sandwich_covariance(
    ctx: ModelContext, theta_hat: ParamVector, phi_hats: Sequence[float]
) -> np.ndarray:
    return sandwich_components(ctx, theta_hat, phi_hats).cov


@dataclass(frozen=True)
class BootstrapResult:
    """Pseudo-parametric bootstrap summary over the successful replications"""

    coefficient_names: List[str]
    requested: int
    n_failed: int
    estimates: np.ndarray
    phi_estimates: np.ndarray
    se: np.ndarray
    phi_se: np.ndarray
    quantile_ci: np.ndarray
    normal_ci: np.ndarray
    failure_codes: Dict[str, int]

    @property
    def valid(self) -> bool:
        return self.n_failed <= 0.05 * self.requested

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "parameter": self.coefficient_names + ["phi1", "phi2"],
                "se_boot": np.concatenate([self.se, self.phi_se]),
                "q025": np.concatenate([self.quantile_ci[:, 0], np.full(2, np.nan)]),
                "q975": np.concatenate([self.quantile_ci[:, 1], np.full(2, np.nan)]),
                "normal_low": np.concatenate([self.normal_ci[:, 0], np.full(2, np.nan)]),
                "normal_high": np.concatenate([self.normal_ci[:, 1], np.full(2, np.nan)]),
            }
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "requested": self.requested,
            "succeeded": int(self.estimates.shape[0]),
            "failed": self.n_failed,
            "valid": self.valid,
            "failure_codes": dict(sorted(self.failure_codes.items())),
            "se": dict(zip(self.coefficient_names, self.se.tolist())),
            "phi_se": {"phi1": float(self.phi_se[0]), "phi2": float(self.phi_se[1])},
        }


def bootstrap_replication(payload) -> np.ndarray:
    """
    One bootstrap replication: simulate from the fitted model with its own
    seeded generator and refit. Returns coefficients followed by (phi1, phi2).
    """
    from app.models import validate_spec
    from app.simulation_service import simulate_trajectory

    spec, theta, families, n, burn_in, seed, tol, max_iter = payload
    rng = np.random.default_rng(seed)
    series = simulate_trajectory(spec, theta, families, n, burn_in=burn_in, rng=rng)
    fit = fit_qmle(validate_spec(spec, series), tol=tol, max_iter=max_iter, compute_covariance=False)
    return np.concatenate([fit.coefficients, [fit.phi1_hat, fit.phi2_hat]])


def bootstrap_se(
    ctx: ModelContext,
    fit: FitResult,
    B: int,
    family1,
    family2,
    seed: int,
    workers: Optional[int] = None,
    burn_in: int = 500,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    progress: bool = False,
) -> BootstrapResult:
    """
    Replication b simulates a trajectory of the observed length from the
    fitted model under (family1, family2) with seed `seed + b`, refits it and
    records the estimates. Results are merged in replication order.
    """
    from app.families import check_family_matches
    from app.replication_service import get_replication_service

    if B < 1:
        raise InvalidReplicationCount(f"bootstrap needs B >= 1, got {B}", B=B)
    check_family_matches(ctx.spec, (family1, family2))
    if not fit.converged:
        logger.warning("⚠️ Bootstrapping around a fit that did not converge")

    theta = fit.theta_hat.with_dispersions(
        fit.phi1_hat if fit.phi1_hat > 0 else 1.0, fit.phi2_hat if fit.phi2_hat > 0 else 1.0
    )
    payloads = [
        (ctx.spec, theta, (family1, family2), ctx.n, burn_in, seed + b, tol, max_iter)
        for b in range(B)
    ]
    logger.info(f"🔄 Running {B} bootstrap replications")
    outcomes = get_replication_service(workers).run_batch(
        bootstrap_replication, payloads, label="bootstrap", progress=progress
    )

    values = [o.value for o in outcomes if o.ok]
    failure_codes: Dict[str, int] = {}
    for o in outcomes:
        if not o.ok:
            failure_codes[o.error] = failure_codes.get(o.error, 0) + 1
    n_failed = B - len(values)
    p = ctx.spec.n_coefficients
    table = np.vstack(values) if values else np.empty((0, p + 2))
    estimates, phis = table[:, :p], table[:, p:]
    ddof = 1 if len(values) > 1 else 0
    with np.errstate(invalid="ignore"):
        se = estimates.std(axis=0, ddof=ddof) if len(values) else np.full(p, np.nan)
        phi_se = phis.std(axis=0, ddof=ddof) if len(values) else np.full(2, np.nan)
    if len(values):
        quantile_ci = np.column_stack(
            [np.quantile(estimates, 0.025, axis=0), np.quantile(estimates, 0.975, axis=0)]
        )
    else:
        quantile_ci = np.full((p, 2), np.nan)
    point = fit.coefficients
    normal_ci = np.column_stack([point - Z_975 * se, point + Z_975 * se])

    result = BootstrapResult(
        coefficient_names=ctx.spec.coefficient_names(),
        requested=B,
        n_failed=n_failed,
        estimates=estimates,
        phi_estimates=phis,
        se=se,
        phi_se=phi_se,
        quantile_ci=quantile_ci,
        normal_ci=normal_ci,
        failure_codes=failure_codes,
    )
    if not result.valid:
        logger.warning(f"⚠️ {n_failed}/{B} bootstrap replications failed; result is invalid")
    else:
        logger.info(f"✅ Bootstrap complete: {B - n_failed}/{B} replications succeeded")
    return result
