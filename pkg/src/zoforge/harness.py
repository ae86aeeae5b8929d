"""Black-box objective surface and the solver-in-the-loop correction toy.

The simulation side is a 1-D diffusion equation with zero-flux boundaries,
integrated by explicit Euler on a coarse grid and, as ground truth, on a
finer grid whose states are cell-averaged back to coarse resolution. A
small dense network adds a state correction after every coarse step; its
training loss unrolls the corrected solver over n steps per window and
accumulates squared deviation from the reference frames.

Four training regimes are compared on held-out diffusivities:
uncorrected coarse simulation, a corrector fit on one-step pairs without
solver interaction, in-loop training with analytic gradients, and in-loop
training driven purely by objective queries.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .coords import CoordinateSet
from .errors import StabilityError
from .estimators import Objective, sparse_cge
from .pruning import random_mask


def quadratic_objective(diag, b=None) -> Objective:
    """f(theta) = 0.5 theta' A theta - b' theta with diagonal A > 0."""
    diag = np.asarray(diag, dtype=np.float64)
    if np.any(diag <= 0):
        raise ValueError("diagonal entries must be positive")
    if b is None:
        b = np.zeros_like(diag)
    b = np.asarray(b, dtype=np.float64)
    return Objective(lambda th: float(0.5 * th @ (diag * th) - b @ th))


def quadratic_gradient(diag, b, theta) -> np.ndarray:
    """Closed-form gradient A theta - b, for tests only."""
    return np.asarray(diag) * np.asarray(theta) - np.asarray(b)


# ---------------------------------------------------------------------------
# 1-D diffusion with zero-flux boundaries


@dataclass(frozen=True)
class SimState:
    grid: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class SolConfig:
    coarse_cells: int = 16
    fine_cells: int = 32
    diffusivity: float = 1.0e-3
    dt: float = 0.195
    steps: int = 32  # reference horizon
    unroll: int = 16  # corrected steps per training window
    domain: float = 1.0
    hidden: int = 16  # corrector width

    def __post_init__(self):
        if self.fine_cells % self.coarse_cells:
            raise StabilityError("fine grid must be an integer multiple of the coarse grid")
        if not 1 <= self.unroll <= self.steps:
            raise StabilityError("unroll count must lie in [1, steps]")
        for cells in (self.coarse_cells, self.fine_cells):
            if self.alpha(cells) > 0.5:
                raise StabilityError(
                    f"explicit step unstable: nu*dt/dx^2 = {self.alpha(cells):.3f} > 0.5 "
                    f"on the {cells}-cell grid"
                )

    def alpha(self, cells: int) -> float:
        dx = self.domain / cells
        return self.diffusivity * self.dt / (dx * dx)


def _diffuse(u: np.ndarray, alpha: float) -> np.ndarray:
    """One conservative explicit Euler step; zero-flux ends."""
    out = u.copy()
    out[1:-1] += alpha * (u[2:] - 2.0 * u[1:-1] + u[:-2])
    out[0] += alpha * (u[1] - u[0])
    out[-1] += alpha * (u[-2] - u[-1])
    return out


def _diffuse_transpose(g: np.ndarray, alpha: float) -> np.ndarray:
    # the stencil matrix is symmetric, so the adjoint is the step itself
    return _diffuse(g, alpha)


def coarse_step(state: SimState, cfg: SolConfig) -> SimState:
    if state.grid.shape[0] != cfg.coarse_cells:
        raise StabilityError("state grid does not match the coarse resolution")
    return SimState(_diffuse(state.grid, cfg.alpha(cfg.coarse_cells)), state.t + 1)


def downsample(fine: np.ndarray, factor: int) -> np.ndarray:
    return fine.reshape(-1, factor).mean(axis=1)


def fine_rollout(cfg: SolConfig, initial_fine: np.ndarray) -> np.ndarray:
    """Reference trajectory: fine-grid integration, cell-averaged to coarse
    resolution. Returns (steps + 1, coarse_cells) including the start."""
    if initial_fine.shape[0] != cfg.fine_cells:
        raise StabilityError("initial state does not match the fine resolution")
    factor = cfg.fine_cells // cfg.coarse_cells
    alpha = cfg.alpha(cfg.fine_cells)
    u = np.asarray(initial_fine, dtype=np.float64).copy()
    frames = [downsample(u, factor)]
    for _ in range(cfg.steps):
        u = _diffuse(u, alpha)
        frames.append(downsample(u, factor))
    return np.stack(frames)


def bump_initial_condition(cfg: SolConfig, seed) -> np.ndarray:
    """Sum of random Gaussian bumps on the fine grid; widths reach down to
    a couple of coarse cells so the resolution gap actually matters."""
    rng = np.random.default_rng(seed)
    x = (np.arange(cfg.fine_cells) + 0.5) * (cfg.domain / cfg.fine_cells)
    u = np.zeros(cfg.fine_cells)
    for _ in range(4):
        center = rng.uniform(0.1, 0.9) * cfg.domain
        width = rng.uniform(0.02, 0.08) * cfg.domain
        height = rng.uniform(0.5, 1.5)
        u += height * np.exp(-((x - center) ** 2) / (2 * width * width))
    return u


# ---------------------------------------------------------------------------
# corrector network: coarse width -> hidden (tanh) -> coarse width, additive.
# Bias-free on purpose: the correction then vanishes with the state, so a
# decaying simulation is never pushed off its fixed point.


@dataclass(frozen=True)
class Corrector:
    cells: int
    hidden: int = 16

    @property
    def dim(self) -> int:
        return 2 * self.hidden * self.cells

    def init_params(self, seed, scale: float = 1e-3) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return scale * rng.standard_normal(self.dim)

    def _unpack(self, theta):
        n, h = self.cells, self.hidden
        return theta[: h * n].reshape(h, n), theta[h * n :].reshape(n, h)

    def apply(self, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
        w1, w2 = self._unpack(theta)
        return w2 @ np.tanh(w1 @ u)

    def apply_with_tape(self, theta, u):
        w1, w2 = self._unpack(theta)
        h = np.tanh(w1 @ u)
        return w2 @ h, h

    def backward(self, theta, u, h, upstream, grad_out):
        """Accumulate dL/dtheta into grad_out and return dL/du, given the
        hidden activation h recorded during the forward pass."""
        w1, w2 = self._unpack(theta)
        n, hid = self.cells, self.hidden
        gh = w2.T @ upstream
        ga = gh * (1.0 - h * h)
        grad_out[: hid * n] += np.outer(ga, u).ravel()
        grad_out[hid * n :] += np.outer(upstream, h).ravel()
        return w1.T @ ga


# ---------------------------------------------------------------------------
# unrolled training loss


def _window_starts(cfg: SolConfig) -> range:
    return range(0, cfg.steps - cfg.unroll + 1, cfg.unroll)


def sol_loss(corrector_fn, cfg: SolConfig, reference: np.ndarray) -> float:
    """Sum over non-overlapping windows and unroll offsets of the squared
    deviation between the corrected coarse step and the reference frame.
    corrector_fn maps a coarse state to an additive correction; windows are
    processed in increasing t, offsets in increasing i."""
    alpha = cfg.alpha(cfg.coarse_cells)
    total = 0.0
    for t in _window_starts(cfg):
        s = reference[t]
        for i in range(cfg.unroll):
            u = _diffuse(s, alpha)
            s = u + corrector_fn(u)
            diff = s - reference[t + i + 1]
            total += float(diff @ diff)
    return total


def sol_loss_grad(corrector: Corrector, theta: np.ndarray, cfg: SolConfig,
                  reference: np.ndarray):
    """Analytic (loss, gradient) of sol_loss for the dense corrector,
    reverse-accumulated through every unrolled window."""
    alpha = cfg.alpha(cfg.coarse_cells)
    grad = np.zeros_like(theta)
    total = 0.0
    for t in _window_starts(cfg):
        s = reference[t]
        tape = []  # (u_i, hidden_i, s_{i+1})
        for i in range(cfg.unroll):
            u = _diffuse(s, alpha)
            c, h = corrector.apply_with_tape(theta, u)
            s = u + c
            diff = s - reference[t + i + 1]
            total += float(diff @ diff)
            tape.append((u, h, diff))
        carry = np.zeros(cfg.coarse_cells)
        for u, h, diff in reversed(tape):
            gs = 2.0 * diff + carry  # dL/ds_{i+1}
            gu = gs + corrector.backward(theta, u, h, gs, grad)
            carry = _diffuse_transpose(gu, alpha)
    return total, grad


# ---------------------------------------------------------------------------
# evaluation rollouts and the four-variant study


def corrected_rollout(corrector_fn, cfg: SolConfig, y0: np.ndarray) -> np.ndarray:
    """Free-running corrected coarse simulation from the first reference
    frame; corrector_fn=None gives the uncorrected baseline."""
    alpha = cfg.alpha(cfg.coarse_cells)
    s = np.asarray(y0, dtype=np.float64).copy()
    frames = [s.copy()]
    for _ in range(cfg.steps):
        s = _diffuse(s, alpha)  # correction applies to the post-step state
        if corrector_fn is not None:
            s = s + corrector_fn(s)
        frames.append(s.copy())
    return np.stack(frames)


def trajectory_mae(traj: np.ndarray, reference: np.ndarray) -> float:
    """MAE against the reference, averaged over every step past the start."""
    return float(np.mean(np.abs(traj[1:] - reference[1:])))


@dataclass
class SolStudyConfig:
    train_diffusivities: tuple = (6e-4, 1.0e-3, 1.6e-3, 2.4e-3)
    test_diffusivities: tuple = (8e-4, 1.3e-3, 2.0e-3)
    ics_per_diffusivity: int = 2
    train_steps: int = 600
    lr: float = 1e-4
    zo_sparsity: float = 0.95
    zo_mu: float = 1e-3
    zo_lr: float = 1e-4
    zo_step_factor: int = 4  # query-only route gets extra plain steps
    seed: int = 0


def _references(cfg: SolConfig, diffusivities, seed, per_nu=1) -> list[tuple[SolConfig, np.ndarray]]:
    refs = []
    for k, nu in enumerate(diffusivities):
        sub = replace(cfg, diffusivity=float(nu))
        for j in range(per_nu):
            ic = bump_initial_condition(sub, np.random.SeedSequence((seed, k, j)))
            refs.append((sub, fine_rollout(sub, ic)))
    return refs


def _train_fo(corrector, theta0, refs, steps, lr):
    theta = theta0.copy()
    for _ in range(steps):
        grad = np.zeros_like(theta)
        for sub, ref in refs:
            _, g = sol_loss_grad(corrector, theta, sub, ref)
            grad += g
        theta -= lr * grad
    return theta


def _train_zo(corrector, theta0, refs, steps, lr, study: SolStudyConfig):
    theta = theta0.copy()
    d = theta.shape[0]
    mask_seq = np.random.SeedSequence((study.seed, 777))

    def total_loss(th):
        return sum(sol_loss(lambda u: corrector.apply(th, u), sub, ref) for sub, ref in refs)

    f = Objective(total_loss)
    for _ in range(steps):
        active = random_mask(d, study.zo_sparsity, mask_seq.spawn(1)[0])
        est = sparse_cge(f, theta, study.zo_mu, active)
        theta = theta - lr * est.grad
    return theta, f.queries


def run_sol_study(cfg: SolConfig, study: SolStudyConfig | None = None) -> dict:
    """Train the corrector four ways and report test MAE per variant.

    Returns a report dict with per-diffusivity and mean MAE for SRC
    (uncorrected), NON (one-step pairs, no interaction), ZO-SOL
    (query-only in-loop training) and FO-SOL (analytic in-loop training).
    """
    study = study or SolStudyConfig()
    train_refs = _references(cfg, study.train_diffusivities, study.seed)
    test_refs = _references(cfg, study.test_diffusivities, study.seed + 1)

    corrector = Corrector(cfg.coarse_cells, cfg.hidden)
    theta0 = corrector.init_params(np.random.SeedSequence((study.seed, 1)))

    # NON: unroll-1 windows over the same references, analytic gradients
    non_refs = [(replace(sub, unroll=1), ref) for sub, ref in train_refs]
    theta_non = _train_fo(corrector, theta0, non_refs, study.train_steps, study.lr)

    # FO-SOL: full unroll, analytic gradients
    theta_fo = _train_fo(corrector, theta0, train_refs, study.train_steps, study.lr)

    # ZO-SOL: full unroll, sparse coordinate-wise queries, plain steps
    theta_zo, zo_queries = _train_zo(
        corrector, theta0, train_refs, study.train_steps * study.zo_step_factor,
        study.lr, study
    )

    report = {"queries": {"zo_sol": int(zo_queries)}, "per_test": [], "mae": {}}
    maes = {"src": [], "non": [], "zo_sol": [], "fo_sol": []}
    for sub, ref in test_refs:
        row = {"diffusivity": sub.diffusivity}
        variants = {
            "src": None,
            "non": lambda u: corrector.apply(theta_non, u),
            "zo_sol": lambda u: corrector.apply(theta_zo, u),
            "fo_sol": lambda u: corrector.apply(theta_fo, u),
        }
        for name, fn in variants.items():
            mae = trajectory_mae(corrected_rollout(fn, sub, ref[0]), ref)
            row[name] = mae
            maes[name].append(mae)
        report["per_test"].append(row)
    for name, vals in maes.items():
        report["mae"][name] = float(np.mean(vals))
    report["params"] = {
        "src": None,
        "non": theta_non,
        "zo_sol": theta_zo,
        "fo_sol": theta_fo,
    }
    return report
