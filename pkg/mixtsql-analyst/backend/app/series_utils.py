"""
Series Utilities
CSV ingestion and preprocessing of bivariate series, and writers for the
self-describing output artifacts
"""

from pathlib import Path
from typing import Any, Dict, Optional, Union
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from app import __version__
from app.errors import DomainViolation, MissingColumn, ParseError
from app.models import BivariateSeries, SeriesDomain, check_domain

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7


def _leading_comment_lines(path: Path) -> int:
    count = 0
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
    return count


def _parse_numeric(frame: pd.DataFrame, column: str, first_row: int) -> np.ndarray:
    raw = frame[column]
    parsed = pd.to_numeric(raw.str.strip(), errors="coerce")
    bad = parsed.isna()
    if bad.any():
        pos = int(np.argmax(bad.to_numpy()))
        raise ParseError(
            f"column '{column}' row {first_row + pos}: cannot parse {raw.iloc[pos]!r} as a number",
            row=first_row + pos, column=column, value=str(raw.iloc[pos]),
        )
    return parsed.to_numpy(dtype=float)


def standardize_and_flip(values: np.ndarray) -> np.ndarray:
    """
    Min-max standardize to [0, 1] and take 1 - x, which turns a raw
    cycle-threshold style column into a load-like bounded series.
    """
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        raise DomainViolation("cannot standardize a constant column", low=lo, high=hi)
    return 1.0 - (values - lo) / (hi - lo)


def aggregate_weekly(
    y1: np.ndarray,
    y2: np.ndarray,
    domain1: SeriesDomain,
    domain2: SeriesDomain,
    dates: Optional[pd.Series] = None,
    first_row: int = 2,
):
    """
    Collapse daily rows into weeks: counts are summed, other domains averaged.

    Args:
        y1, y2: daily values
        domain1, domain2: declared domains of the two series
        dates: optional date labels; rows are grouped by ISO week when given,
            otherwise into consecutive blocks of 7 rows (a trailing partial
            block is dropped)

    Returns:
        (weekly y1, weekly y2, week labels)
    """
    frame = pd.DataFrame({"y1": y1, "y2": y2})
    if dates is not None:
        parsed = pd.to_datetime(dates, errors="coerce")
        if parsed.isna().any():
            pos = int(np.argmax(parsed.isna().to_numpy()))
            raise ParseError(
                f"unparseable date {dates.iloc[pos]!r} at row {first_row + pos}",
                row=first_row + pos, value=str(dates.iloc[pos]),
            )
        iso = parsed.dt.isocalendar()
        frame["week"] = [f"{y}-W{w:02d}" for y, w in zip(iso["year"], iso["week"])]
    else:
        full = (len(frame) // DAYS_PER_WEEK) * DAYS_PER_WEEK
        if full < len(frame):
            logger.warning(f"⚠️ Dropping {len(frame) - full} trailing rows that do not fill a week")
        frame = frame.iloc[:full].copy()
        frame["week"] = [f"week-{i // DAYS_PER_WEEK + 1}" for i in range(full)]

    how = {
        "y1": "sum" if domain1 == SeriesDomain.NONNEGATIVE_COUNT else "mean",
        "y2": "sum" if domain2 == SeriesDomain.NONNEGATIVE_COUNT else "mean",
    }
    weekly = frame.groupby("week", sort=False).agg(how)
    return weekly["y1"].to_numpy(), weekly["y2"].to_numpy(), [str(w) for w in weekly.index]


def ingest_csv(
    path,
    col_y1: str = "y1",
    col_y2: str = "y2",
    col_date: Optional[str] = "date",
    domain1: SeriesDomain = SeriesDomain.UNIT_INTERVAL,
    domain2: SeriesDomain = SeriesDomain.NONNEGATIVE_COUNT,
    standardize_y1: bool = False,
    weekly: bool = False,
) -> BivariateSeries:
    """
    Read a bivariate series from a headed CSV file.

    Args:
        path: CSV file; lines starting with '#' before the header are ignored
        col_y1, col_y2: value columns
        col_date: optional label column, used when present
        domain1, domain2: declared domains, validated per row
        standardize_y1: min-max standardize y1 and flip it (1 - x)
        weekly: aggregate daily rows into weeks

    Returns:
        BivariateSeries with the date column as labels

    Row numbers in errors count file lines, the header being line 1 after
    any leading comments.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"input file not found: {path}", path=str(path))
    skipped = _leading_comment_lines(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skipped, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}", path=str(path))

    for column in (col_y1, col_y2):
        if column not in frame.columns:
            raise MissingColumn(
                f"column '{column}' not found in {path.name}", column=column, columns=list(frame.columns)
            )
    first_row = skipped + 2
    y1 = _parse_numeric(frame, col_y1, first_row)
    y2 = _parse_numeric(frame, col_y2, first_row)
    dates = frame[col_date] if col_date and col_date in frame.columns else None

    if standardize_y1:
        y1 = standardize_and_flip(y1)

    for series, values, domain in ((1, y1, domain1), (2, y2, domain2)):
        try:
            check_domain(values, domain, series)
        except DomainViolation as exc:
            idx = exc.context["index"]
            raise DomainViolation(
                f"series {series} value {values[idx]} at row {first_row + idx} is outside domain '{domain.value}'",
                series=series, row=first_row + idx, value=float(values[idx]), domain=domain.value,
            )

    labels = None if dates is None else [str(d) for d in dates]
    if weekly:
        y1, y2, labels = aggregate_weekly(y1, y2, domain1, domain2, dates, first_row=first_row)

    series = BivariateSeries(
        y1=tuple(float(v) for v in y1),
        y2=tuple(float(v) for v in y2),
        domain1=domain1,
        domain2=domain2,
        labels=None if labels is None else tuple(labels),
    )
    logger.info(f"✅ Loaded {series.n} observations from {path.name}")
    return series


def artifact_header(config_hash: str, seed: Optional[int]) -> str:
    return f"# mixtsql-analyst {__version__} config_hash={config_hash} seed={seed}\n"


def write_csv_artifact(frame: pd.DataFrame, path, config_hash: str, seed: Optional[int]) -> Path:
    """CSV with a one-line provenance comment; floats written round-trip exact"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(artifact_header(config_hash, seed))
        frame.to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")
    return path


def series_frame(series: BivariateSeries, col_y1: str = "y1", col_y2: str = "y2") -> pd.DataFrame:
    frame = pd.DataFrame({col_y1: series.y1, col_y2: series.y2})
    if series.labels is not None:
        frame.insert(0, "date", list(series.labels))
    if series.domain1 == SeriesDomain.NONNEGATIVE_COUNT:
        frame[col_y1] = frame[col_y1].astype(np.int64)
    if series.domain2 == SeriesDomain.NONNEGATIVE_COUNT:
        frame[col_y2] = frame[col_y2].astype(np.int64)
    return frame


def write_series_csv(
    series: BivariateSeries, path, config_hash: str = "none", seed: Optional[int] = None,
    col_y1: str = "y1", col_y2: str = "y2",
) -> Path:
    """Write a series in the layout ingest_csv reads"""
    return write_csv_artifact(series_frame(series, col_y1, col_y2), path, config_hash, seed)


def _numpy_to_python(value: Any) -> Any:
    """Serializer fallback for values pydantic has no JSON form for"""
    if isinstance(value, (np.ndarray, np.generic)):
        return value.tolist()
    return str(value)


class JsonArtifact(BaseModel):
    """Free-form JSON document; NaN and infinities are written as null"""

    model_config = ConfigDict(extra="allow", ser_json_inf_nan="null")


def dumps_json(payload: Union[BaseModel, Dict[str, Any]]) -> str:
    if not isinstance(payload, BaseModel):
        payload = JsonArtifact(**payload)
    return payload.model_dump_json(indent=2, fallback=_numpy_to_python)


def write_json_artifact(payload: Union[BaseModel, Dict[str, Any]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(payload) + "\n", encoding="utf-8")
    return path

