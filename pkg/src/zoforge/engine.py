"""Forward-only neural network evaluator over a small fixed layer vocabulary.

Models are described by an ordered list of layer descriptors and evaluated
against a flat parameter vector. Evaluation produces, besides the scalar
loss, a cache of every post-layer activation so that later queries which
perturb only deep parameters can resume mid-network (`forward_from`) and
still reproduce the full forward pass bit for bit.

Element width follows the parameter vector dtype: float32 for training
runs, float64 where finite-difference headroom matters.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError, StaleCacheError

# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int


@dataclass(frozen=True)
class AvgPool:
    size: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Dense | Conv2d | BatchNorm | ReLU | MaxPool | AvgPool | Flatten


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus the per-sample input shape.

    The loss is fixed: mean softmax cross-entropy over the batch, applied
    to the final activation (the logits).
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]  # (features,) or (channels, height, width)

    def __init__(self, layers, input_shape):
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in input_shape))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (N, *input_shape)
    labels: np.ndarray  # (N,) integer class indices

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if len(self.inputs) < 1:
            raise ShapeError("batch must contain at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ShapeError("inputs and labels disagree on batch size")


# ---------------------------------------------------------------------------
# shape and parameter bookkeeping


def _layer_param_shapes(layer):
    """Shapes of the trainable arrays of one layer, in storage order."""
    if isinstance(layer, Dense):
        shapes = [(layer.out_features, layer.in_features)]
        if layer.bias:
            shapes.append((layer.out_features,))
        return shapes
    if isinstance(layer, Conv2d):
        k = layer.kernel_size
        shapes = [(layer.out_channels, layer.in_channels, k, k)]
        if layer.bias:
            shapes.append((layer.out_channels,))
        return shapes
    if isinstance(layer, BatchNorm):
        return [(layer.channels,), (layer.channels,)]  # scale, shift
    return []


def layer_param_count(layer) -> int:
    return sum(int(np.prod(s)) for s in _layer_param_shapes(layer))


@functools.lru_cache(maxsize=64)
def infer_shapes(spec: ModelSpec) -> tuple[tuple[int, ...], ...]:
    """Per-layer output shapes (sample-wise, no batch dim). Raises ShapeError
    if adjacent layers do not compose."""
    shapes = []
    cur = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if len(cur) != 1 or cur[0] != layer.in_features:
                raise ShapeError(
                    f"layer {idx}: Dense expects ({layer.in_features},), got {cur}"
                )
            cur = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(cur) != 3 or cur[0] != layer.in_channels:
                raise ShapeError(
                    f"layer {idx}: Conv2d expects {layer.in_channels} channels, got {cur}"
                )
            _, h, w = cur
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            ho = (h + 2 * p - k) // s + 1
            wo = (w + 2 * p - k) // s + 1
            if ho < 1 or wo < 1 or (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ShapeError(f"layer {idx}: Conv2d does not tile {cur} exactly")
            cur = (layer.out_channels, ho, wo)
        elif isinstance(layer, BatchNorm):
            if len(cur) not in (1, 3) or cur[0] != layer.channels:
                raise ShapeError(
                    f"layer {idx}: BatchNorm expects {layer.channels} channels, got {cur}"
                )
        elif isinstance(layer, (MaxPool, AvgPool)):
            if len(cur) != 3:
                raise ShapeError(f"layer {idx}: pooling needs (C,H,W), got {cur}")
            c, h, w = cur
            if h % layer.size or w % layer.size:
                raise ShapeError(f"layer {idx}: pool size {layer.size} does not divide {cur}")
            cur = (c, h // layer.size, w // layer.size)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, Flatten):
            cur = (int(np.prod(cur)),)
        else:
            raise ShapeError(f"layer {idx}: unknown layer {layer!r}")
        shapes.append(cur)
    if len(shapes) == 0 or len(shapes[-1]) != 1:
        raise ShapeError("model must end with a 1-D logit activation")
    return tuple(shapes)


@functools.lru_cache(maxsize=64)
def param_count(spec: ModelSpec) -> int:
    """Total trainable scalar count. Validates shape composition."""
    infer_shapes(spec)
    return sum(layer_param_count(layer) for layer in spec.layers)


@dataclass(frozen=True)
class Segment:
    layer: int  # position in spec.layers
    offset: int
    length: int


def build_segments(spec: ModelSpec) -> tuple[Segment, ...]:
    segs, offset = [], 0
    for idx, layer in enumerate(spec.layers):
        n = layer_param_count(layer)
        if n:
            segs.append(Segment(idx, offset, n))
            offset += n
    return tuple(segs)


@dataclass
class ParamVector:
    """Flat parameter storage with the per-layer segment table."""

    data: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        total = sum(s.length for s in self.segments)
        if total != self.data.shape[0]:
            raise ShapeError(f"segment table covers {total} of {self.data.shape[0]} scalars")
        # offsets of segment starts, for coordinate -> layer lookup
        self._starts = np.array([s.offset for s in self.segments], dtype=np.int64)
        self._seg_by_layer = {s.layer: s for s in self.segments}

    def segment_for_layer(self, layer_idx: int):
        return self._seg_by_layer.get(layer_idx)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def layer_of(self, coord: int) -> int:
        """Layer position owning a coordinate."""
        return self.layers_of(np.asarray([coord]))[0]

    def layers_of(self, coords: np.ndarray) -> np.ndarray:
        """Vectorized coordinate -> layer position lookup."""
        coords = np.asarray(coords)
        if coords.size and (coords.min() < 0 or coords.max() >= self.dim):
            raise ShapeError("coordinate outside [0, d)")
        seg_idx = np.searchsorted(self._starts, coords, side="right") - 1
        return np.array([self.segments[i].layer for i in seg_idx], dtype=np.int64)

    def segment_view(self, seg: Segment) -> np.ndarray:
        return self.data[seg.offset : seg.offset + seg.length]

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.segments)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.data.astype(dtype), self.segments)


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ParamVector:
    """He-style initialization: normal(0, sqrt(2/fan_in)) weights, zero
    biases, unit scale / zero shift for batch norm."""
    param_count(spec)  # validate composition
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            w = rng.standard_normal((layer.out_features, layer.in_features))
            chunks.append(w.ravel() * np.sqrt(2.0 / layer.in_features))
            if layer.bias:
                chunks.append(np.zeros(layer.out_features))
        elif isinstance(layer, Conv2d):
            k = layer.kernel_size
            fan_in = layer.in_channels * k * k
            w = rng.standard_normal((layer.out_channels, layer.in_channels, k, k))
            chunks.append(w.ravel() * np.sqrt(2.0 / fan_in))
            if layer.bias:
                chunks.append(np.zeros(layer.out_channels))
        elif isinstance(layer, BatchNorm):
            chunks.append(np.ones(layer.channels))
            chunks.append(np.zeros(layer.channels))
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(flat.astype(dtype), build_segments(spec))


def _unpack(layer, flat: np.ndarray):
    """Views into a layer's slice of the flat vector, reshaped per array."""
    arrays, o = [], 0
    for shape in _layer_param_shapes(layer):
        n = int(np.prod(shape))
        arrays.append(flat[o : o + n].reshape(shape))
        o += n
    return arrays


# ---------------------------------------------------------------------------
# layer evaluation


def conv2d_forward(x, weight, bias, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = weight.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.einsum("nihwkl,oikl->nohw", windows, weight, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def batchnorm_forward(x, scale, shift, eps):
    # Current-batch statistics always: normalization over every axis except
    # channels, so reuse below an untouched prefix stays exact.
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    xn = (x - mean) / np.sqrt(var + eps)
    if x.ndim == 2:
        return xn * scale + shift
    return xn * scale[None, :, None, None] + shift[None, :, None, None]


def maxpool_forward(x, size):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // size, size, w // size, size)
    return v.max(axis=(3, 5))


def avgpool_forward(x, size):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // size, size, w // size, size)
    return v.mean(axis=(3, 5))


def apply_layer(layer, x, flat):
    """Evaluate one layer on activation x given its flat parameter slice."""
    if isinstance(layer, Dense):
        arrays = _unpack(layer, flat)
        out = x @ arrays[0].T
        if layer.bias:
            out += arrays[1]
        return out
    if isinstance(layer, Conv2d):
        arrays = _unpack(layer, flat)
        bias = arrays[1] if layer.bias else None
        return conv2d_forward(x, arrays[0], bias, layer.stride, layer.padding)
    if isinstance(layer, BatchNorm):
        scale, shift = _unpack(layer, flat)
        return batchnorm_forward(x, scale, shift, layer.eps)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0)
    if isinstance(layer, MaxPool):
        return maxpool_forward(x, layer.size)
    if isinstance(layer, AvgPool):
        return avgpool_forward(x, layer.size)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"unknown layer {layer!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, stable via log-sum-exp."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), labels]
    return float(np.mean(lse - picked))


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class FeatureCache:
    """Post-layer activations from one forward pass.

    activations[0] is the (dtype-cast) input batch; activations[l] is the
    output of spec.layers[l-1]. Digests fingerprint each parameterized
    layer's slice of the flat vector, so stale reuse can be detected.
    Immutable after construction; shareable across worker threads.
    """

    activations: tuple[np.ndarray, ...]
    digests: dict = field(default_factory=dict)  # layer position -> bytes

    def __post_init__(self):
        for arr in self.activations:
            arr.flags.writeable = False


def _cast_inputs(spec, params, batch):
    x = np.asarray(batch.inputs, dtype=params.data.dtype)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} != model input {spec.input_shape}")
    return x


def _segment_digest(params, seg):
    return hashlib.blake2b(params.segment_view(seg).tobytes(), digest_size=16).digest()


def forward(spec: ModelSpec, params: ParamVector, batch: Batch):
    """Full forward pass.

    Returns (loss, logits, cache) where loss is the mean softmax
    cross-entropy, logits the final activation, and cache every
    intermediate activation for later mid-network evaluation.
    """
    d = param_count(spec)
    if params.dim != d:
        raise ShapeError(f"parameter vector has {params.dim} scalars, model needs {d}")
    x = _cast_inputs(spec, params, batch)
    acts = [x.view()]  # view: freezing the cache must not freeze caller data
    for idx, layer in enumerate(spec.layers):
        seg = params.segment_for_layer(idx)
        flat = params.segment_view(seg) if seg else None
        x = apply_layer(layer, x, flat)
        acts.append(x)
    logits = acts[-1]
    if np.max(batch.labels) >= logits.shape[1]:
        raise ShapeError("label index exceeds class count")
    loss = softmax_cross_entropy(logits, batch.labels)
    if not np.isfinite(loss):
        raise NumericsError("non-finite loss in forward pass")
    digests = {s.layer: _segment_digest(params, s) for s in params.segments}
    return loss, logits, FeatureCache(tuple(acts), digests)


def forward_from(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    cache: FeatureCache,
    start: int,
    verify_cache: bool = False,
) -> float:
    """Loss of a forward pass resuming from cached activation `start`.

    Valid whenever `params` agrees with the cache's parameters on all
    layers before `start`; the result then equals a full forward() of
    `params` exactly. start=0 degenerates to a full re-evaluation.
    """
    if not 0 <= start <= len(spec.layers):
        raise ShapeError(f"start layer {start} outside [0, {len(spec.layers)}]")
    if verify_cache:
        for seg in params.segments:
            if seg.layer < start and _segment_digest(params, seg) != cache.digests.get(seg.layer):
                raise StaleCacheError(
                    f"cache built from different parameters at layer {seg.layer}"
                )
    x = cache.activations[start]
    for idx in range(start, len(spec.layers)):
        layer = spec.layers[idx]
        seg = params.segment_for_layer(idx)
        flat = params.segment_view(seg) if seg else None
        x = apply_layer(layer, x, flat)
    loss = softmax_cross_entropy(x, batch.labels)
    if not np.isfinite(loss):
        raise NumericsError("non-finite loss in resumed forward pass")
    return loss


def predict(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax class predictions (no loss, no cache retention)."""
    x = np.asarray(inputs, dtype=params.data.dtype)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != model input {spec.input_shape}")
    for idx, layer in enumerate(spec.layers):
        seg = params.segment_for_layer(idx)
        flat = params.segment_view(seg) if seg else None
        x = apply_layer(layer, x, flat)
    return np.argmax(x, axis=1)
