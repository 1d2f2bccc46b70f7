import os
from concurrent.futures import ThreadPoolExecutor


def n_threads() -> int:
    raw = os.environ.get("PRUNEKIT_THREADS")
    if raw is None or not raw.strip():
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"PRUNEKIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def ordered_map(fn, items):
    """Map ``fn`` over ``items`` using up to PRUNEKIT_THREADS workers; output keeps input order."""
    items = list(items)
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
