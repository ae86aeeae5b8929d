"""Worker-parallel coordinate-wise gradient estimation with feature reuse.

A single base forward pass evaluates the unperturbed loss and fills the
activation cache. The active coordinates are then split into contiguous
blocks, one per worker; each worker owns a private scratch copy of the
parameter vector, perturbs one coordinate at a time, resumes the forward
pass from the deepest cached activation still valid for that coordinate's
layer, and writes the finite difference into its own output slot. No
reduction ever sums across workers, so the result is bit-identical for
every worker count.

BLAS pools are pinned to one thread inside the fork-join region: the
workers own the cores, and nested library threading would only fight them.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from .coords import CoordinateSet
from .engine import Batch, ModelSpec, ParamVector, forward, forward_from, param_count
from .estimators import GradEstimate, Objective, StageTimings, rge, sparse_cge


def max_workers_cap() -> int | None:
    """Optional global worker cap from the ZOFORGE_THREADS variable."""
    raw = os.environ.get("ZOFORGE_THREADS", "").strip()
    if not raw:
        return None
    cap = int(raw)
    if cap < 1:
        raise ValueError("ZOFORGE_THREADS must be a positive integer")
    return cap


def partition(active: CoordinateSet, workers: int) -> list[np.ndarray]:
    """Contiguous blocks of the sorted active set with sizes differing by
    at most one. Workers beyond the set size receive empty blocks."""
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return np.array_split(active.indices, workers)


def cge_parallel(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    active: CoordinateSet,
    mu: float,
    workers: int = 1,
    reuse: bool = True,
) -> GradEstimate:
    """Sparse coordinate-wise estimate over `workers` threads.

    Numerically identical to `estimators.sparse_cge` on the same batch:
    per-coordinate differences are computed independently and written to
    disjoint slots. `reuse=False` forces every evaluation to start from
    the input layer (benchmark baseline)."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    workers = max(1, workers)
    cap = max_workers_cap()
    if cap is not None:
        workers = min(workers, cap)

    d = param_count(spec)
    timings = StageTimings()

    t0 = time.perf_counter()
    base, _, cache = forward(spec, params, batch)
    timings.mi += time.perf_counter() - t0  # base pass also builds the cache

    grad = np.zeros(d, dtype=params.data.dtype)
    blocks = partition(active, workers)
    evals = [0]

    def run_block(block):
        local = StageTimings()
        if block.size == 0:
            return local, 0
        scratch = ParamVector(params.data.copy(), params.segments)
        depths = params.layers_of(block) if reuse else np.zeros(block.size, dtype=np.int64)
        flat = scratch.data
        n = 0
        for j, depth in zip(block, depths):
            t0 = time.perf_counter()
            orig = flat[j]
            flat[j] = orig + mu
            t1 = time.perf_counter()
            val = forward_from(spec, scratch, batch, cache, int(depth))
            t2 = time.perf_counter()
            flat[j] = orig
            grad[j] = (val - base) / mu
            t3 = time.perf_counter()
            local.wp += t1 - t0
            local.mi += t2 - t1
            local.ao += t3 - t2
            n += 1
        return local, n

    with threadpool_limits(limits=1):
        if workers == 1:
            results = [run_block(blocks[0])]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_block, blocks))
    for local, n in results:
        timings += local
        evals[0] += n

    return GradEstimate(grad, evals[0] + 1, timings, value=base)


def model_objective(spec: ModelSpec, params: ParamVector, batch: Batch) -> Objective:
    """Objective closing over a fixed batch: theta -> mean loss."""
    segments = params.segments

    def fn(theta):
        pv = ParamVector(np.asarray(theta), segments)
        return forward(spec, pv, batch)[0]

    return Objective(fn)


def bench_stages(
    kind: str,
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    mu: float,
    q_or_active,
    reuse: bool = True,
) -> StageTimings:
    """Wall-clock attribution of one gradient estimate over the four
    stages. kind="rge" expects a direction count, kind="cge" an active
    CoordinateSet (or None for the full set)."""
    if kind == "rge":
        f = model_objective(spec, params, batch)
        with threadpool_limits(limits=1):  # same BLAS regime as the cge path
            est = rge(f, params.data, int(q_or_active), mu, seed=0)
    elif kind == "cge":
        active = q_or_active
        if active is None:
            active = CoordinateSet.full(params.dim)
        est = cge_parallel(spec, params, batch, active, mu, workers=1, reuse=reuse)
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return est.timings
