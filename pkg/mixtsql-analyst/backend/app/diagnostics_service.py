"""
Diagnostics Service
Correlation diagnostics for lag selection, Pearson residuals and PIT
calibration histograms
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple
import logging
import math

import numpy as np
import pandas as pd
from scipy import stats
from statsmodels.tsa import stattools

from app.errors import ConstantSeries, FamilyDomainMismatch, SeriesTooShort
from app.estimation_service import FitResult
from app.families import SamplingFamily, default_family
from app.quasi_likelihood import variance

logger = logging.getLogger(__name__)

DEFAULT_MAX_LAG = 24
DEFAULT_BIN_COUNT = 10


def bartlett_band(n: int, z: float = 1.96) -> float:
    """Half-width of the white-noise band for sample autocorrelations"""
    return z / math.sqrt(n)


def _centered(y, name: str) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    centered = y - y.mean()
    if not np.any(np.abs(centered) > 0):
        raise ConstantSeries(f"{name} is constant; correlations are undefined", series=name)
    return centered


def autocorrelation(y, max_lag: int = DEFAULT_MAX_LAG) -> np.ndarray:
    """Sample ACF r(0..max_lag) with the 1/n autocovariance convention"""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n <= max_lag:
        raise SeriesTooShort(f"need more than {max_lag} observations, got {n}", n=n, max_lag=max_lag)
    _centered(y, "series")
    return stattools.acf(y, adjusted=False, nlags=max_lag, fft=False)


def acf_pacf(y, max_lag: int = DEFAULT_MAX_LAG) -> Tuple[pd.Series, pd.Series]:
    """ACF indexed by lag 0..max_lag and PACF indexed by lag 1..max_lag"""
    acf = autocorrelation(y, max_lag)
    # Durbin-Levinson on the sample autocorrelations
    _, _, pacf, _, _ = stattools.levinson_durbin(acf, nlags=max_lag, isacov=True)
    return (
        pd.Series(acf, index=pd.RangeIndex(0, max_lag + 1, name="lag"), name="acf"),
        pd.Series(pacf[1:], index=pd.RangeIndex(1, max_lag + 1, name="lag"), name="pacf"),
    )


def ccf(y1, y2, max_lag: int = DEFAULT_MAX_LAG) -> pd.Series:
    """
    Sample cross-correlation cor(Y1[t-h], Y2[t]) for h = -max_lag..max_lag,
    with full-sample means and the 1/n convention, so that
    ccf(y1, y2)[h] == ccf(y2, y1)[-h].
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if len(y1) != len(y2):
        raise ValueError(f"series lengths differ: {len(y1)} != {len(y2)}")
    n = len(y1)
    if n <= max_lag:
        raise SeriesTooShort(f"need more than {max_lag} observations, got {n}", n=n, max_lag=max_lag)
    _centered(y1, "y1")
    _centered(y2, "y2")
    # stattools.ccf(x, y)[k] pairs x[t + k] with y[t]
    leads = stattools.ccf(y2, y1, adjusted=False, fft=False, nlags=max_lag + 1)
    lags = stattools.ccf(y1, y2, adjusted=False, fft=False, nlags=max_lag + 1)
    values = np.concatenate([lags[:0:-1], leads])
    return pd.Series(values, index=pd.RangeIndex(-max_lag, max_lag + 1, name="lag"), name="ccf")


def residuals(fit: FitResult) -> Tuple[np.ndarray, np.ndarray]:
    """Pearson residuals (y - mu) / sqrt(phi V(mu)) for t = m+1..n"""
    out = []
    for j in (1, 2):
        y = fit.ctx.response(j)
        mu = fit.mean_path.mu(j)
        phi = fit.phi_hat(j)
        if not phi > 0:
            out.append(np.zeros_like(y))
            continue
        v = variance(mu, fit.ctx.spec.equation(j).variance)
        out.append((y - mu) / np.sqrt(phi * v))
    return out[0], out[1]


@dataclass(frozen=True)
class PitHistogram:
    bin_count: int
    heights: np.ndarray
    counts: np.ndarray
    reference_family: str
    randomized: bool = False

    @property
    def n_observations(self) -> float:
        return float(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        edges = np.linspace(0.0, 1.0, self.bin_count + 1)
        return pd.DataFrame(
            {
                "bin_low": edges[:-1],
                "bin_high": edges[1:],
                "height": self.heights,
                "mass": self.counts,
            }
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bin_count": self.bin_count,
            "heights": self.heights.tolist(),
            "reference_family": self.reference_family,
            "randomized": self.randomized,
        }


def _spread_segments(lower: np.ndarray, upper: np.ndarray, bin_count: int) -> np.ndarray:
    """Distribute each uniform segment [lower, upper] over equal-width bins"""
    edges = np.linspace(0.0, 1.0, bin_count + 1)
    counts = np.zeros(bin_count)
    width = upper - lower
    point = width <= 0.0
    if np.any(point):
        idx = np.clip(np.searchsorted(edges, upper[point], side="right") - 1, 0, bin_count - 1)
        np.add.at(counts, idx, 1.0)
    lo, hi, w = lower[~point], upper[~point], width[~point]
    for b in range(bin_count):
        overlap = np.minimum(hi, edges[b + 1]) - np.maximum(lo, edges[b])
        counts[b] += float(np.sum(np.clip(overlap, 0.0, None) / w))
    return counts


def pit_from_cdf(lower: np.ndarray, upper: np.ndarray, bin_count: int, reference: str) -> PitHistogram:
    counts = _spread_segments(np.asarray(lower, float), np.asarray(upper, float), bin_count)
    heights = counts * bin_count / counts.sum()
    return PitHistogram(bin_count=bin_count, heights=heights, counts=counts, reference_family=reference)


def pit(
    fit: FitResult,
    margin: int = 2,
    family: Optional[SamplingFamily] = None,
    bin_count: int = DEFAULT_BIN_COUNT,
) -> PitHistogram:
    """
    Probability integral transform histogram of one margin under the
    reference family at (mu_hat_t, phi_hat). Count margins use the
    non-randomized PIT: the segment [F(y - 1), F(y)] is spread uniformly.
    """
    if margin not in (1, 2):
        raise ValueError(f"margin must be 1 or 2, got {margin}")
    if bin_count < 1:
        raise ValueError(f"bin_count must be positive, got {bin_count}")
    eq = fit.ctx.spec.equation(margin)
    family = family or default_family(eq.variance.kind)
    domain = fit.ctx.data.domain(margin)
    if family.support != domain:
        raise FamilyDomainMismatch(
            f"family '{family.kind.value}' has support {family.support.value}, "
            f"margin {margin} is {domain.value}",
            family=family.kind.value, margin=margin, domain=domain.value,
        )

    y = fit.ctx.response(margin)
    mu = fit.mean_path.mu(margin)
    phi = fit.phi_hat(margin)
    if not phi > 0:
        phi = 1.0
        logger.warning("⚠️ Degenerate dispersion; PIT uses phi = 1")
    upper = np.array([float(family.cdf(y_t, mu_t, phi)) for y_t, mu_t in zip(y, mu)])
    if family.is_discrete:
        lower = np.array([float(family.cdf(y_t - 1.0, mu_t, phi)) for y_t, mu_t in zip(y, mu)])
    else:
        lower = upper
    hist = pit_from_cdf(lower, upper, bin_count, family.kind.value)
    logger.info(f"📊 PIT margin {margin} under {family.kind.value}: heights {np.round(hist.heights, 3).tolist()}")
    return hist


def pit_uniformity_test(hist: PitHistogram) -> Tuple[float, float]:
    """Chi-square goodness of fit of the PIT masses against equal bins"""
    expected = np.full(hist.bin_count, hist.counts.sum() / hist.bin_count)
    result = stats.chisquare(hist.counts, expected)
    return float(result.statistic), float(result.pvalue)
