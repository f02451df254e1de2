import os
from concurrent.futures import ProcessPoolExecutor


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get("ATTRIB_WORKERS", "1") or 1)
    return max(1, int(workers))


def pmap(fn, items, workers=1, chunksize=None):
    """Ordered map; runs in a process pool when ``workers > 1``.

    ``fn`` must be picklable. Output order always matches ``items``.
    """
    items = list(items)
    workers = resolve_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))
