"""Function-value gradient estimators with exact query accounting.

All estimators consume an `Objective` (theta -> scalar with a monotone
evaluation counter) and return a `GradEstimate` carrying the dense
gradient vector, the number of objective evaluations spent, and
wall-clock attribution over the four estimation stages:

    DV  generation of direction vectors
    WP  perturbation of the parameter vector
    MI  objective (model inference) evaluations
    AO  remaining arithmetic of the estimate

Forward differences throughout, with the base value evaluated once per
estimate and shared across all directions or coordinates.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .coords import CoordinateSet


class Objective:
    """Wraps a deterministic theta -> scalar map and counts evaluations.

    The counter increments by exactly one per call and is safe under
    concurrent evaluation from worker threads.
    """

    def __init__(self, fn):
        self._fn = fn
        self._count = 0
        self._lock = threading.Lock()

    def __call__(self, theta) -> float:
        with self._lock:
            self._count += 1
        return float(self._fn(theta))

    @property
    def queries(self) -> int:
        return self._count


@dataclass
class StageTimings:
    dv: float = 0.0
    wp: float = 0.0
    mi: float = 0.0
    ao: float = 0.0

    def total(self) -> float:
        return self.dv + self.wp + self.mi + self.ao

    def __iadd__(self, other):
        self.dv += other.dv
        self.wp += other.wp
        self.mi += other.mi
        self.ao += other.ao
        return self

    def as_dict(self):
        return {"dv": self.dv, "wp": self.wp, "mi": self.mi, "ao": self.ao}


@dataclass
class GradEstimate:
    grad: np.ndarray
    queries: int
    timings: StageTimings = field(default_factory=StageTimings)
    value: float | None = None  # objective at the unperturbed point


def rge(f: Objective, theta: np.ndarray, q: int, mu: float, seed) -> GradEstimate:
    """Randomized estimate: average of q forward differences along
    standard Gaussian directions. Spends q + 1 evaluations."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta)
    d = theta.shape[0]
    rng = np.random.default_rng(seed)
    t = StageTimings()
    before = f.queries

    t0 = time.perf_counter()
    base = f(theta)
    t.mi += time.perf_counter() - t0

    accum = np.zeros(d, dtype=theta.dtype)
    for _ in range(q):
        t0 = time.perf_counter()
        u = rng.standard_normal(d).astype(theta.dtype, copy=False)
        t1 = time.perf_counter()
        pert = theta + mu * u
        t2 = time.perf_counter()
        val = f(pert)
        t3 = time.perf_counter()
        accum += ((val - base) / mu) * u
        t4 = time.perf_counter()
        t.dv += t1 - t0
        t.wp += t2 - t1
        t.mi += t3 - t2
        t.ao += t4 - t3

    t0 = time.perf_counter()
    grad = accum / q
    t.ao += time.perf_counter() - t0
    return GradEstimate(grad, f.queries - before, t, value=base)


def cge(f: Objective, theta: np.ndarray, mu: float) -> GradEstimate:
    """Coordinate-wise estimate: one deterministic forward difference per
    coordinate. Spends d + 1 evaluations."""
    theta = np.asarray(theta)
    return sparse_cge(f, theta, mu, CoordinateSet.full(theta.shape[0]))


def sparse_cge(f: Objective, theta: np.ndarray, mu: float, active: CoordinateSet) -> GradEstimate:
    """Coordinate-wise estimate restricted to an active set; inactive
    coordinates are exactly zero. Spends |active| + 1 evaluations."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta)
    d = theta.shape[0]
    if active.dim != d:
        raise ValueError(f"active set is over dim {active.dim}, theta has {d}")
    t = StageTimings()
    before = f.queries

    t0 = time.perf_counter()
    base = f(theta)
    t.mi += time.perf_counter() - t0

    grad = np.zeros(d, dtype=theta.dtype)
    scratch = theta.copy()
    for i in active.indices:
        t0 = time.perf_counter()
        orig = scratch[i]
        scratch[i] = orig + mu
        t1 = time.perf_counter()
        val = f(scratch)
        t2 = time.perf_counter()
        scratch[i] = orig
        grad[i] = (val - base) / mu
        t3 = time.perf_counter()
        t.wp += t1 - t0
        t.mi += t2 - t1
        t.ao += t3 - t2
    return GradEstimate(grad, f.queries - before, t, value=base)
