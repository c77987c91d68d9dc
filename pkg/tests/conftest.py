import os

# keep BLAS single-threaded before numpy loads; training tests fork workers
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from collections import deque

import numpy as np
import pytest

from langnav import presets, world


@pytest.fixture(scope="session")
def default_scenario():
    return world.default_scenario()


@pytest.fixture(scope="session")
def smoke_scenario():
    return presets.smoke()


def bfs_distance(start, targets, blocked, dims):
    """Independent reachability oracle: plain BFS, no shared code with the
    module's path search beyond the action definition."""
    rows, cols = dims
    if start in targets:
        return 0
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        (r, c), d = frontier.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols):
                continue
            if nxt in blocked or nxt in seen:
                continue
            if nxt in targets:
                return d + 1
            seen.add(nxt)
            frontier.append((nxt, d + 1))
    return None


def relative_error(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def gradcheck(loss_fn, params, names=None, samples=6, eps=1e-6, tol=1e-4, rng=None):
    """Central finite differences against params.grads (already populated).

    loss_fn() -> scalar, recomputed per perturbation; 64-bit params expected.
    """
    assert params.dtype == np.float64, "gradient checks run in float64"
    rng = rng or np.random.default_rng(0)
    analytic = {k: v.copy() for k, v in params.grads.items()}
    failures = []
    for name in names or params.names():
        flat = params.params[name].reshape(-1)
        count = min(samples, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            # the absolute floor absorbs central-difference noise on
            # negligible-magnitude coordinates (kink-adjacent subgradients)
            if abs(numeric - ana) > 5e-9 and relative_error(numeric, ana) > tol:
                failures.append((name, int(i), float(numeric), float(ana)))
    assert not failures, f"gradient mismatches: {failures[:8]}"
