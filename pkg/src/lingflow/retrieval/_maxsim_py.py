"""numpy fallback with the same signatures as the compiled ``_maxsim`` module."""

import numpy as np

# cap on the similarity block held in memory at once (float64 cells)
CHUNK_CELLS = 4_000_000


def maxsim(q: np.ndarray, p: np.ndarray) -> float:
    sim = q.astype(np.float64) @ p.astype(np.float64).T
    return float(sim.max(axis=1).sum())


def maxsim_packed(q: np.ndarray, packed: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n_pages = len(offsets) - 1
    out = np.zeros(max(n_pages, 0), dtype=np.float64)
    if n_pages <= 0:
        return out
    q64 = q.astype(np.float64)
    budget = max(1, CHUNK_CELLS // max(1, q.shape[0]))
    start = 0
    while start < n_pages:
        # last page boundary that keeps the block within budget, but always at least one page
        stop = int(np.searchsorted(offsets, offsets[start] + budget, side="right")) - 1
        stop = min(max(stop, start + 1), n_pages)
        lo, hi = offsets[start], offsets[stop]
        sim = q64 @ packed[lo:hi].astype(np.float64).T
        per_page = np.maximum.reduceat(sim, offsets[start:stop] - lo, axis=1)
        out[start:stop] = per_page.sum(axis=0)
        start = stop
    return out
