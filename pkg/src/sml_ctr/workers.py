import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, List, Optional, Sequence, Tuple

from .config import settings

logger = logging.getLogger(__name__)


def run_jobs(fn: Callable[..., Any], args_list: Sequence[Tuple[Any, ...]], jobs: Optional[int] = None) -> List[Any]:
    """
    Выполняет fn(*args) для каждого набора аргументов.
    jobs <= 1 — последовательно в текущем процессе; иначе пул процессов.
    Порядок результатов совпадает с порядком args_list.
    """
    jobs = settings.jobs if jobs is None else jobs
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    return asyncio.run(_run_pool(fn, args_list, jobs))


async def _run_pool(fn: Callable[..., Any], args_list: Sequence[Tuple[Any, ...]], jobs: int) -> List[Any]:
    loop = asyncio.get_running_loop()
    workers = min(jobs, len(args_list))
    logger.info("Running %d jobs on %d worker processes", len(args_list), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, fn, *args) for args in args_list]
        return list(await asyncio.gather(*futures))
