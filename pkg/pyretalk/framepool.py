import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Optional, Sequence

_LOGGER = logging.getLogger(__name__)


class FramePool:
    """Runs a per-item function on a thread pool and collects results in index order."""

    def __init__(self, workers: Optional[int] = None):
        self._workers = workers

    async def run(self, func: Callable[[int, Any], Any], items: Sequence) -> list:
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self._workers) as executor:
            futures = [loop.run_in_executor(executor, func, index, item) for index, item in enumerate(items)]
            results = await asyncio.gather(*futures)
        _LOGGER.debug("Pool finished %d items", len(results))
        return list(results)

    def map(self, func: Callable[[int, Any], Any], items: Sequence) -> list:
        """Synchronous entry point; must not be called from a running event loop."""
        if not len(items):
            return []
        return asyncio.run(self.run(func, items))
