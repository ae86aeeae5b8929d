"""Training loops: momentum SGD over estimated or analytic gradients.

The sparsity-guided loop follows the recipe: query-only pruning scores are
computed once at initialization, reduced to layer-wise kept fractions,
and a fresh sparse coordinate set obeying those fractions is sampled every
`k_sparse` epochs; each step then spends |S|+1 forward passes on a
coordinate-wise estimate over the current mini-batch and applies a
momentum SGD update under a cosine learning-rate schedule.

Alternative modes: `m1` re-scores and re-masks periodically (query cost
ledgered), `m2` fixes one mask forever and freezes pruned coordinates,
`fo` is the analytic-gradient baseline, `rge` swaps in the randomized
estimator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .coords import CoordinateSet
from .datasets import Dataset
from .engine import Batch, ModelSpec, ParamVector, forward, init_params, param_count, predict
from .errors import ConfigError
from .estimators import GradEstimate, StageTimings, rge
from .oracle import backprop_grad
from .parallel import cge_parallel, model_objective
from .pruning import (
    lpr_from_mask,
    magnitude_mask,
    prune_mask_global,
    random_mask,
    sample_dynamic_mask,
    zo_grasp_scores,
)

MODES = ("deepzero", "m1", "m2", "fo", "rge")
MASK_SOURCES = ("zo_grasp", "random", "magnitude")


@dataclass
class TrainConfig:
    mode: str = "deepzero"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mu: float = 5e-3
    sparsity: float = 0.9
    k_sparse: int = 1
    workers: int = 1
    seed: int = 0
    grasp_queries: int = 192
    rge_queries: int = 0  # 0 means q = d
    mask_source: str = "zo_grasp"
    param_dtype: str = "float32"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.k_sparse < 1:
            raise ConfigError("k_sparse", "must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("sparsity", f"must lie in [0, 1), got {self.sparsity}")
        if self.mu <= 0:
            raise ConfigError("mu", "must be positive")
        for name in ("lr", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.grasp_queries < 1:
            raise ConfigError("grasp_queries", "must be >= 1")
        if self.rge_queries < 0:
            raise ConfigError("rge_queries", "must be >= 0")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError("mask_source", f"must be one of {MASK_SOURCES}")
        if self.param_dtype not in ("float32", "float64"):
            raise ConfigError("param_dtype", "must be float32 or float64")
        return self

    @property
    def dtype(self):
        return np.float32 if self.param_dtype == "float32" else np.float64


@dataclass
class OptState:
    buffer: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, d: int, dtype) -> "OptState":
        return cls(np.zeros(d, dtype=dtype))


def sgd_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: OptState,
    lr: float,
    momentum: float,
    weight_decay: float,
    active: CoordinateSet | None = None,
):
    """Classical momentum update in place:
    g' = g + wd*theta; buf = m*buf + g'; theta -= lr*buf.

    With `active` set, the whole pipeline is restricted to those
    coordinates and everything else (values and buffers) stays untouched.
    """
    if active is None:
        g = grad + weight_decay * theta if weight_decay else grad
        state.buffer *= momentum
        state.buffer += g
        theta -= lr * state.buffer
    else:
        idx = active.indices
        g = grad[idx] + weight_decay * theta[idx] if weight_decay else grad[idx]
        state.buffer[idx] = momentum * state.buffer[idx] + g
        theta[idx] -= lr * state.buffer[idx]
    state.step += 1
    return theta, state


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi t / total)) / 2, nonincreasing from lr0 to 0."""
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * t / total))


@dataclass
class RunMetrics:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    eval_acc: list = field(default_factory=list)
    queries: list = field(default_factory=list)  # cumulative
    seconds: list = field(default_factory=list)  # cumulative wall clock
    dv: list = field(default_factory=list)  # per-epoch stage seconds
    wp: list = field(default_factory=list)
    mi: list = field(default_factory=list)
    ao: list = field(default_factory=list)

    CSV_HEADER = "epoch,train_loss,eval_acc,queries,seconds,dv,wp,mi,ao"
    WALLCLOCK_COLUMNS = ("seconds", "dv", "wp", "mi", "ao")

    def add_epoch(self, epoch, train_loss, eval_acc, queries, seconds, stages: StageTimings):
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.eval_acc.append(float(eval_acc))
        self.queries.append(int(queries))
        self.seconds.append(float(seconds))
        self.dv.append(stages.dv)
        self.wp.append(stages.wp)
        self.mi.append(stages.mi)
        self.ao.append(stages.ao)

    def total_queries(self) -> int:
        return self.queries[-1] if self.queries else 0

    def final_accuracy(self) -> float:
        return self.eval_acc[-1] if self.eval_acc else float("nan")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for i in range(len(self.epoch)):
                row = [
                    str(self.epoch[i]),
                    repr(self.train_loss[i]),
                    repr(self.eval_acc[i]),
                    str(self.queries[i]),
                    repr(self.seconds[i]),
                    repr(self.dv[i]),
                    repr(self.wp[i]),
                    repr(self.mi[i]),
                    repr(self.ao[i]),
                ]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# checkpoints: text header, then raw little-endian parameter bytes


def save_checkpoint(path, params: ParamVector, seed: int):
    seg_txt = ",".join(f"{s.layer}:{s.offset}:{s.length}" for s in params.segments)
    header = (
        "zoforge-checkpoint 1\n"
        f"d={params.dim}\n"
        f"dtype={params.data.dtype.name}\n"
        f"seed={seed}\n"
        f"segments={seg_txt}\n"
        "---\n"
    )
    data = params.data.astype(params.data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(data.tobytes())


def load_checkpoint(path) -> tuple[ParamVector, int]:
    from .engine import Segment

    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, payload = blob.partition(b"---\n")
    fields = {}
    for line in head.decode().splitlines()[1:]:
        key, _, value = line.partition("=")
        fields[key] = value
    d = int(fields["d"])
    dtype = np.dtype(fields["dtype"]).newbyteorder("<")
    segments = tuple(
        Segment(*map(int, part.split(":")))
        for part in fields["segments"].split(",")
        if part
    )
    data = np.frombuffer(payload, dtype=dtype, count=d).astype(fields["dtype"])
    return ParamVector(data, segments), int(fields["seed"])


# ---------------------------------------------------------------------------
# training loops


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _grasp_batch(data: Dataset, cfg: TrainConfig, rng) -> Batch:
    n = len(data.train_inputs)
    idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    return Batch(data.train_inputs[idx], data.train_labels[idx])


def _initial_mask(spec, params, data, cfg: TrainConfig, grasp_seq):
    """Mask at initialization per the configured source. Returns
    (mask, queries_spent)."""
    d = params.dim
    if cfg.mask_source == "random":
        return random_mask(d, cfg.sparsity, grasp_seq.spawn(1)[0]), 0
    if cfg.mask_source == "magnitude":
        return magnitude_mask(params.data, cfg.sparsity), 0
    rng = np.random.default_rng(grasp_seq.spawn(1)[0])
    batch = _grasp_batch(data, cfg, rng)
    f = model_objective(spec, params, batch)
    scores = zo_grasp_scores(
        f, params.data, cfg.grasp_queries, cfg.mu, grasp_seq.spawn(1)[0]
    )
    return prune_mask_global(scores, cfg.sparsity), f.queries


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig):
    """Run the configured training mode. Returns (params, metrics)."""
    cfg.validate()
    d = param_count(spec)
    root = np.random.SeedSequence(cfg.seed)
    init_seq, grasp_seq, shuffle_seq, mask_seq, est_seq = root.spawn(5)

    params = init_params(spec, init_seq, dtype=cfg.dtype)
    state = OptState.zeros(d, cfg.dtype)
    metrics = RunMetrics()
    shuffle_rng = np.random.default_rng(shuffle_seq)

    total_queries = 0
    mask = None
    layer_keep = None
    active = None
    update_mask = None  # m2 restricts the update itself

    if cfg.mode in ("deepzero", "m2"):
        mask, spent = _initial_mask(spec, params, data, cfg, grasp_seq)
        total_queries += spent
        if cfg.mode == "deepzero":
            layer_keep = lpr_from_mask(mask, params.segments)
        else:
            active = mask
            update_mask = mask
    elif cfg.mode == "rge" and cfg.rge_queries == 0:
        cfg = replace(cfg, rge_queries=d)

    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        stages = StageTimings()
        losses = []

        if cfg.mode == "deepzero" and epoch % cfg.k_sparse == 0:
            active = sample_dynamic_mask(layer_keep, params.segments, mask_seq.spawn(1)[0])
        elif cfg.mode == "m1" and epoch % cfg.k_sparse == 0:
            mask, spent = _initial_mask(spec, params, data, cfg, grasp_seq)
            total_queries += spent
            active = mask

        for idx in _batches(len(data.train_inputs), cfg.batch_size, shuffle_rng):
            batch = Batch(data.train_inputs[idx], data.train_labels[idx])
            if cfg.mode == "fo":
                loss, _, _ = forward(spec, params, batch)
                grad = backprop_grad(spec, params, batch).astype(cfg.dtype)
                est = GradEstimate(grad, 0, StageTimings(), value=loss)
            elif cfg.mode == "rge":
                f = model_objective(spec, params, batch)
                est = rge(f, params.data, cfg.rge_queries, cfg.mu, est_seq.spawn(1)[0])
            else:
                est = cge_parallel(spec, params, batch, active, cfg.mu, cfg.workers)
            total_queries += est.queries
            stages += est.timings
            losses.append(est.value)
            sgd_step(
                params.data, est.grad, state, lr, cfg.momentum, cfg.weight_decay,
                active=update_mask,
            )

        acc = evaluate_accuracy(spec, params, data.test_inputs, data.test_labels)
        metrics.add_epoch(
            epoch,
            float(np.mean(losses)),
            acc,
            total_queries,
            time.perf_counter() - t_start,
            stages,
        )
    return params, metrics


def evaluate_accuracy(spec, params, inputs, labels) -> float:
    preds = predict(spec, params, inputs)
    return float(np.mean(preds == np.asarray(labels)))
