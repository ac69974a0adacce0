"""
Replication Service
Runs independent, individually seeded replications (bootstrap refits, Monte
Carlo study runs) over a worker pool and returns them in replication order
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence
import logging
import os

import numpy as np
from tqdm import tqdm

from app.errors import MixTSQLError, error_code

logger = logging.getLogger(__name__)


def resolve_worker_count(requested: Optional[int] = None) -> int:
    """Explicit request, else MIXTSQL_THREADS, else the machine's CPU count"""
    if requested is not None and requested > 0:
        return int(requested)
    env = os.getenv("MIXTSQL_THREADS")
    if env:
        try:
            value = int(env)
            if value > 0:
                return value
        except ValueError:
            logger.warning(f"⚠️ Ignoring non-integer MIXTSQL_THREADS={env!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ReplicationOutcome:
    index: int
    value: Any = None
    error: Optional[str] = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None


# Recorded as a failed replication; other exceptions propagate
RECOVERABLE_ERRORS = (MixTSQLError, FloatingPointError, np.linalg.LinAlgError)


def _guarded(fn: Callable, index: int, payload: Any) -> ReplicationOutcome:
    try:
        return ReplicationOutcome(index=index, value=fn(payload))
    except RECOVERABLE_ERRORS as exc:
        return ReplicationOutcome(index=index, error=error_code(exc), message=str(exc))


class ReplicationService:
    """
    Executes a batch of replications. A replication that fails with a
    recoverable numerical error is recorded as a failed outcome instead of
    aborting the batch; any other exception is re-raised.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = resolve_worker_count(max_workers)
        logger.debug(f"Replication service using {self.max_workers} worker(s)")

    def run_batch(
        self,
        fn: Callable[[Any], Any],
        payloads: Sequence[Any],
        label: str = "replications",
        progress: bool = False,
    ) -> List[ReplicationOutcome]:
        total = len(payloads)
        if self.max_workers == 1 or total < 2:
            outcomes = [
                _guarded(fn, i, p)
                for i, p in tqdm(enumerate(payloads), total=total, desc=label, disable=not progress)
            ]
        else:
            with ProcessPoolExecutor(max_workers=min(self.max_workers, total)) as pool:
                futures = [pool.submit(_guarded, fn, i, p) for i, p in enumerate(payloads)]
                outcomes = [
                    f.result() for f in tqdm(futures, total=total, desc=label, disable=not progress)
                ]

        failed = [o for o in outcomes if not o.ok]
        if failed:
            logger.warning(f"⚠️ {len(failed)}/{total} {label} failed (first: {failed[0].error}: {failed[0].message})")
        logger.info(f"✅ Batch complete: {total - len(failed)}/{total} {label}")
        return outcomes


# Global service instance
_replication_service: Optional[ReplicationService] = None


def get_replication_service(max_workers: Optional[int] = None) -> ReplicationService:
    """
    Get or create the global replication service. Asking for a different
    worker count replaces the instance.
    """
    global _replication_service
    wanted = resolve_worker_count(max_workers)
    if _replication_service is None or _replication_service.max_workers != wanted:
        _replication_service = ReplicationService(wanted)
    return _replication_service
