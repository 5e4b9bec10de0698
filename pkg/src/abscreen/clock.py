"""Real and simulated time sources for the batch engine.

The engine only ever calls ``now()`` and ``sleep()``, so swapping in
:class:`VirtualClock` runs the exact same dispatch/retry/backoff code under
simulated time. The virtual clock advances when every registered worker
thread is blocked in ``sleep``: the earliest pending wake time becomes the
new now. Threads that are computing (not sleeping) hold time still, which is
what makes window audits on the dispatch log exact.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class RealClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Deterministic simulated time shared by cooperating worker threads.

    Workers must call :meth:`register_worker` before participating and
    :meth:`unregister_worker` when done (the engine does this around each
    worker's lifetime). Non-registered threads may read ``now()`` freely but
    must not sleep on the clock.
    """

    def __init__(self, start: float = 0.0):
        self._now = start
        self._cond = threading.Condition()
        self._wakes: dict[int, float] = {}
        self._workers = 0

    def register_worker(self) -> None:
        with self._cond:
            self._workers += 1
            self._cond.notify_all()

    def unregister_worker(self) -> None:
        with self._cond:
            self._workers -= 1
            self._cond.notify_all()

    def now(self) -> float:
        with self._cond:
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        ident = threading.get_ident()
        with self._cond:
            wake = self._now + seconds
            self._wakes[ident] = wake
            self._cond.notify_all()
            try:
                while self._now < wake:
                    if self._wakes and len(self._wakes) >= self._workers:
                        # Everyone is asleep: jump to the earliest wake time.
                        target = min(self._wakes.values())
                        if target > self._now:
                            self._now = target
                            self._cond.notify_all()
                            continue
                    # Someone is still computing; wait for them to sleep or exit.
                    self._cond.wait(timeout=0.02)
            finally:
                del self._wakes[ident]
                self._cond.notify_all()
