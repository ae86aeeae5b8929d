"""Query-only pruning at initialization and sparsity-pattern sampling.

Scores follow the gradient-flow-preservation rule: a weight's score is
-theta_i * (H g)_i, with the Hessian-gradient product taken as a
directional difference of two gradients. The query-only variant replaces
both gradients with randomized estimates computed from function values
alone; the two outer estimates share one direction stream so their Monte
Carlo error cancels in the difference instead of being amplified by 1/mu.

Masks keep the LOWEST-scored coordinates (pruning removes the highest).
Kept counts use round-half-away-from-zero, with at least one coordinate
kept per nonempty layer whenever its kept fraction is positive.
"""

from __future__ import annotations

import numpy as np

from .coords import CoordinateSet, round_half_away
from .engine import Batch, ModelSpec, ParamVector
from .estimators import Objective, cge, rge
from .oracle import backprop_grad, hessian_grad_product


def grasp_scores_fo(spec: ModelSpec, params: ParamVector, batch: Batch, mu: float = 1e-6):
    """First-order reference scores: -theta * (H g) with the analytic
    gradient and a directional gradient difference for H g."""
    grad_fn = lambda th: backprop_grad(spec, ParamVector(np.asarray(th), params.segments), batch)
    hg = hessian_grad_product(grad_fn, params.data, mu)
    return -params.data * hg


def grasp_scores_from_grad_fn(grad_fn, theta: np.ndarray, mu: float):
    """Score rule applied to an arbitrary gradient source (tests and
    closed-form objectives)."""
    theta = np.asarray(theta)
    hg = hessian_grad_product(grad_fn, theta, mu)
    return -theta * hg


def zo_grasp_scores(
    f: Objective,
    theta: np.ndarray,
    q: int,
    mu: float,
    seed,
    estimator: str = "rge",
) -> np.ndarray:
    """Query-only scores: -theta * (ghat(theta + mu*g) - ghat(theta)) / mu
    with every gradient replaced by a finite-difference estimate.

    estimator="cge" switches the inner estimates to coordinate-wise
    differences (q is ignored); this removes Monte Carlo noise and is the
    mode used to check convergence against the first-order scores.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    inner_seed, outer_seed = seq.spawn(2)
    if estimator == "cge":
        ghat = cge(f, theta, mu).grad
        e1 = cge(f, theta + mu * ghat, mu).grad
        e0 = cge(f, theta, mu).grad
    elif estimator == "rge":
        ghat = rge(f, theta, q, mu, inner_seed).grad
        e1 = rge(f, theta + mu * ghat, q, mu, outer_seed).grad
        e0 = rge(f, theta, q, mu, outer_seed).grad
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return -theta * (e1 - e0) / mu


def prune_mask_global(scores: np.ndarray, ratio: float) -> CoordinateSet:
    """Keep the round((1 - ratio) * d) lowest-scored coordinates, ties
    resolved toward the lower index."""
    if not 0 <= ratio < 1:
        raise ValueError("pruning ratio must lie in [0, 1)")
    scores = np.asarray(scores)
    d = scores.shape[0]
    kept = round_half_away((1.0 - ratio) * d)
    order = np.argsort(scores, kind="stable")
    idx = np.sort(order[:kept])
    return CoordinateSet(idx, d)


def lpr_from_mask(mask: CoordinateSet, segments) -> np.ndarray:
    """Per-layer kept fraction |mask ∩ layer| / layer size, aligned with
    the segment table order."""
    keep = np.zeros(len(segments), dtype=np.float64)
    for s, seg in enumerate(segments):
        lo = np.searchsorted(mask.indices, seg.offset, side="left")
        hi = np.searchsorted(mask.indices, seg.offset + seg.length, side="left")
        keep[s] = (hi - lo) / seg.length
    return keep


def _kept_count(keep: float, size: int) -> int:
    k = round_half_away(keep * size)
    if keep > 0 and size > 0:
        k = max(k, 1)  # never starve a layer that is meant to stay alive
    return min(k, size)


def sample_dynamic_mask(layer_keep: np.ndarray, segments, seed) -> CoordinateSet:
    """Sample a fresh coordinate set obeying the layer-wise kept
    fractions: per layer, a uniform draw without replacement of exactly
    the rounded kept count."""
    layer_keep = np.asarray(layer_keep, dtype=np.float64)
    if np.any(layer_keep < 0) or np.any(layer_keep > 1):
        raise ValueError("kept fractions must lie in [0, 1]")
    if len(layer_keep) != len(segments):
        raise ValueError("kept-fraction table and segment table disagree")
    rng = np.random.default_rng(seed)
    chunks = []
    total = 0
    for keep, seg in zip(layer_keep, segments):
        total += seg.length
        k = _kept_count(float(keep), seg.length)
        if k == 0:
            continue
        picks = rng.choice(seg.length, size=k, replace=False)
        chunks.append(np.sort(picks) + seg.offset)
    dim = max(s.offset + s.length for s in segments) if len(segments) else 0
    idx = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return CoordinateSet(idx.astype(np.int64), dim, layer_keep=layer_keep)


def random_mask(d: int, ratio: float, seed) -> CoordinateSet:
    """Keep a uniform random subset of round((1 - ratio) * d) coordinates."""
    if not 0 <= ratio < 1:
        raise ValueError("pruning ratio must lie in [0, 1)")
    kept = round_half_away((1.0 - ratio) * d)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(d, size=kept, replace=False))
    return CoordinateSet(idx.astype(np.int64), d)


def magnitude_mask(theta: np.ndarray, ratio: float) -> CoordinateSet:
    """Keep the round((1 - ratio) * d) largest-magnitude coordinates,
    ties resolved toward the lower index."""
    if not 0 <= ratio < 1:
        raise ValueError("pruning ratio must lie in [0, 1)")
    theta = np.asarray(theta)
    d = theta.shape[0]
    kept = round_half_away((1.0 - ratio) * d)
    order = np.argsort(-np.abs(theta), kind="stable")
    idx = np.sort(order[:kept])
    return CoordinateSet(idx, d)
