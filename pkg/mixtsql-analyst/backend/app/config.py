"""
Run Configuration
Parameter bundle for the command-line workflows, merged from model defaults,
an optional JSON config file and command-line flags (highest precedence)
"""

from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import hashlib
import json
import logging

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import ConfigError
from app.families import FamilyKind, SamplingFamily, default_family, family
from app.models import (
    EquationSpec,
    LinkFunction,
    LinkKind,
    ModelSpec,
    SeriesDomain,
    TransformKind,
    VarianceFunction,
    VarianceKind,
    parse_lags,
)

logger = logging.getLogger(__name__)

DIRECTION_CHOICES = ("1->2", "2->1", "both")

# Excluded from the embedded config and its hash: they do not change results
RUNTIME_ONLY_FIELDS = {"out_dir", "threads", "progress"}


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # data
    input: Optional[str] = None
    col_y1: str = "y1"
    col_y2: str = "y2"
    col_date: Optional[str] = "date"
    y1_domain: SeriesDomain = SeriesDomain.UNIT_INTERVAL
    y2_domain: SeriesDomain = SeriesDomain.NONNEGATIVE_COUNT
    standardize_y1: bool = False
    weekly: bool = False

    # model
    link1: LinkKind = LinkKind.LOGIT
    link2: LinkKind = LinkKind.LOG
    transform1: TransformKind = TransformKind.SAME_AS_LINK
    transform2: TransformKind = TransformKind.LOG_PLUS_ONE
    var1: VarianceKind = VarianceKind.BERNOULLI_LIKE
    var2: VarianceKind = VarianceKind.LINEAR
    own_lags_1: Tuple[int, ...] = (1,)
    cross_lags_1: Tuple[int, ...] = (1,)
    own_lags_2: Tuple[int, ...] = (1,)
    cross_lags_2: Tuple[int, ...] = (1,)
    tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=500, ge=1)

    # simulation / replication
    seed: int = 0
    configuration: Optional[str] = None
    null_gamma2: bool = False
    theta: Optional[Dict[str, float]] = None
    n: int = Field(default=100, ge=2)
    burn_in: int = Field(default=500, ge=0)
    family1: Optional[FamilyKind] = None
    family2: Optional[FamilyKind] = None
    boot_family1: Optional[FamilyKind] = None
    boot_family2: Optional[FamilyKind] = None
    reps: int = Field(default=100, ge=1)
    boot_B: Optional[int] = None
    qlr_direction: Optional[str] = None

    # diagnostics / forecasting / testing
    max_lag: int = Field(default=24, ge=1)
    bins: int = Field(default=10, ge=1)
    margin: int = Field(default=2, ge=1, le=2)
    pi_family: Optional[FamilyKind] = None
    train_T: Optional[int] = None
    direction: str = "1->2"

    # runtime
    out_dir: str = "out"
    threads: Optional[int] = None
    progress: bool = False

    @field_validator("own_lags_1", "cross_lags_1", "own_lags_2", "cross_lags_2", mode="before")
    @classmethod
    def _coerce_lags(cls, value):
        return parse_lags(value)

    @field_validator("direction")
    @classmethod
    def _check_direction(cls, value: str) -> str:
        if value not in DIRECTION_CHOICES:
            raise ValueError(f"direction must be one of {DIRECTION_CHOICES}")
        return value

    @field_validator("qlr_direction")
    @classmethod
    def _check_qlr_direction(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value not in DIRECTION_CHOICES[:2]:
            raise ValueError(f"qlr_direction must be one of {DIRECTION_CHOICES[:2]}")
        return value

    @field_validator("configuration")
    @classmethod
    def _check_configuration(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value.upper() not in ("C1", "C2", "C3"):
            raise ValueError("configuration must be C1, C2 or C3")
        return None if value is None else value.upper()

    def model_spec(self) -> ModelSpec:
        try:
            return ModelSpec(
                eq1=EquationSpec(
                    link=LinkFunction(kind=self.link1, transform_kind=self.transform1),
                    variance=VarianceFunction(kind=self.var1),
                    own_lags=self.own_lags_1,
                    cross_lags=self.cross_lags_1,
                ),
                eq2=EquationSpec(
                    link=LinkFunction(kind=self.link2, transform_kind=self.transform2),
                    variance=VarianceFunction(kind=self.var2),
                    own_lags=self.own_lags_2,
                    cross_lags=self.cross_lags_2,
                ),
            )
        except ValidationError as exc:
            raise ConfigError(f"invalid model specification: {_first_error(exc)}")

    def families(self, spec: ModelSpec, boot: bool = False) -> Tuple[SamplingFamily, SamplingFamily]:
        """Configured sampling families, falling back to each variance's natural family"""
        chosen = (self.boot_family1, self.boot_family2) if boot else (self.family1, self.family2)
        return tuple(
            family(kind) if kind is not None else default_family(spec.equation(j).variance.kind)
            for j, kind in zip((1, 2), chosen)
        )

    def effective_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude=RUNTIME_ONLY_FIELDS)

    def config_hash(self) -> str:
        canonical = json.dumps(self.effective_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err.get("loc", ()))
    return f"{where}: {err.get('msg')}" if where else str(err.get("msg"))


def load_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge a JSON config file with flag overrides (None values are ignored)"""
    values: Dict[str, Any] = {}
    if config_path:
        path = Path(config_path)
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", path=str(path))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}", path=str(path))
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object", path=str(path))
        values.update(loaded)
        logger.info(f"📋 Loaded config file {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_first_error(exc)}")
