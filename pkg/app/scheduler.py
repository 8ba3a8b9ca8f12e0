# app/scheduler.py
"""
Per-item fan-out for corpus rendering, index extraction and grid cells.
Each task is independent (own inputs, own output files); results come back in
input order regardless of completion order, and a failing item never stops
the others.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence

from app.config import apply_thread_env

logger = logging.getLogger(__name__)


@dataclass
class TaskResult:
    item: Any
    value: Any = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _init_worker(threads: int, log_level: str) -> None:
    apply_thread_env(threads)
    logging.basicConfig(level=log_level, format="%(asctime)s %(levelname)s [%(process)d] %(name)s: %(message)s")


def _guarded(fn: Callable, item: Any) -> TaskResult:
    try:
        return TaskResult(item, fn(item))
    except Exception as e:
        logger.error(f"❌ Task {item!r} failed: {e}", exc_info=True)
        return TaskResult(item, error=f"{type(e).__name__}: {e}")


def run_tasks(fn: Callable, items: Sequence, workers: int = 1, threads: int = 1, label: str = "tasks") -> List[TaskResult]:
    """Apply `fn` to every item; `fn` must be a picklable module-level function when workers > 1."""
    items = list(items)
    logger.info(f"🚀 Running {len(items)} {label} on {workers} worker(s)")
    if workers <= 1 or len(items) <= 1:
        results = [_guarded(fn, item) for item in items]
    else:
        log_level = logging.getLevelName(logging.getLogger().level)
        with ProcessPoolExecutor(max_workers=min(workers, len(items), os.cpu_count() or 1),
                                 initializer=_init_worker, initargs=(threads, log_level)) as pool:
            futures = [pool.submit(_guarded, fn, item) for item in items]
            results = [f.result() for f in futures]
    failed = sum(1 for r in results if not r.ok)
    if failed:
        logger.warning(f"⚠️ {failed} of {len(items)} {label} failed")
    else:
        logger.info(f"✅ All {len(items)} {label} finished")
    return results
