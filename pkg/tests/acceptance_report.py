"""Per-criterion PASS/FAIL lines for the acceptance suite."""

import contextlib
import time

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(num: int, title: str, time_limit: float | None = None):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if time_limit is not None and elapsed >= time_limit:
            raise AssertionError(f"took {elapsed:.2f}s, limit {time_limit:.0f}s")
    except BaseException as exc:
        line = f"criterion {num} FAIL  {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        RESULTS[num] = line
        print(line)
        raise
    line = f"criterion {num} PASS  {title} ({time.perf_counter() - start:.2f}s)"
    RESULTS[num] = line
    print(line)
